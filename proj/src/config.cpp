#include "cyclescope/config.hpp"

#include <sstream>

#include <nlohmann/json.hpp>

#include "cyclescope/errors.hpp"
#include "cyclescope/trace_io.hpp"

namespace cyclescope {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> known,
                    const std::string& context) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known)
      if (key == k) { ok = true; break; }
    if (!ok) throw ConfigError("unknown key '" + key + "' in " + context);
  }
}

}  // namespace

json RunConfig::to_json() const {
  return json{
      {"seed", seed},
      {"cycle",
       {{"anchor_hint", cycle.anchor_hint},
        {"min_anchor_calls", cycle.min_anchor_calls},
        {"phase_functions", cycle.phase_functions},
        {"forward_mode_key", cycle.forward_mode_key},
        {"prefill_keywords", cycle.prefill_keywords},
        {"decode_keywords", cycle.decode_keywords},
        {"prefill_duration_factor", cycle.prefill_duration_factor},
        {"prefill_gap_factor", cycle.prefill_gap_factor},
        {"stage_window", cycle.stage_window},
        {"batch_size_key", cycle.batch_size_key},
        {"input_len_key", cycle.input_len_key},
        {"output_len_key", cycle.output_len_key}}},
      {"pipeline",
       {{"latency_component", pipeline.latency_component},
        {"include_prefill", pipeline.include_prefill},
        {"extra_args_prefix", pipeline.extra_args_prefix}}},
      {"feature_set", to_string(feature_set)},
      {"gbdt",
       {{"n_trees", gbdt.n_trees},
        {"max_depth", gbdt.max_depth},
        {"learning_rate", gbdt.learning_rate},
        {"min_samples_leaf", gbdt.min_samples_leaf},
        {"prediction_floor", gbdt.prediction_floor}}},
      {"fit",
       {{"calibration_fraction", fit.calibration_fraction},
        {"ppe_epsilon", fit.ppe_epsilon},
        {"min_samples", fit.min_samples}}},
      {"detector",
       {{"strategy", to_string(detector.strategy)},
        {"window", detector.window},
        {"fixed_threshold", detector.fixed_threshold},
        {"sigma_k", detector.sigma_k},
        {"theta_max", detector.theta_max},
        {"min_ucl", detector.min_ucl},
        {"warmup", detector.warmup},
        {"epsilon", detector.epsilon}}},
      {"escalation",
       {{"pre_roll", escalation.pre_roll}, {"post_roll", escalation.post_roll}}},
      {"metric_map", metric_map.class_to_metric},
      {"calibration",
       {{"reference_domain", calibration.reference_domain},
        {"tolerance_ns", calibration.tolerance_ns},
        {"estimate_drift", calibration.estimate_drift}}},
  };
}

RunConfig RunConfig::from_json(const json& j) {
  reject_unknown(j,
                 {"seed", "cycle", "pipeline", "feature_set", "gbdt", "fit",
                  "detector", "escalation", "metric_map", "calibration"},
                 "run config");
  RunConfig c;
  c.seed = j.value("seed", c.seed);

  if (j.contains("cycle")) {
    const auto& y = j["cycle"];
    reject_unknown(y,
                   {"anchor_hint", "min_anchor_calls", "phase_functions",
                    "forward_mode_key", "prefill_keywords", "decode_keywords",
                    "prefill_duration_factor", "prefill_gap_factor",
                    "stage_window", "batch_size_key", "input_len_key",
                    "output_len_key"},
                   "cycle config");
    c.cycle.anchor_hint = y.value("anchor_hint", c.cycle.anchor_hint);
    c.cycle.min_anchor_calls = y.value("min_anchor_calls", c.cycle.min_anchor_calls);
    if (y.contains("phase_functions"))
      c.cycle.phase_functions = y["phase_functions"].get<std::vector<std::string>>();
    c.cycle.forward_mode_key = y.value("forward_mode_key", c.cycle.forward_mode_key);
    if (y.contains("prefill_keywords"))
      c.cycle.prefill_keywords = y["prefill_keywords"].get<std::vector<std::string>>();
    if (y.contains("decode_keywords"))
      c.cycle.decode_keywords = y["decode_keywords"].get<std::vector<std::string>>();
    c.cycle.prefill_duration_factor =
        y.value("prefill_duration_factor", c.cycle.prefill_duration_factor);
    c.cycle.prefill_gap_factor =
        y.value("prefill_gap_factor", c.cycle.prefill_gap_factor);
    c.cycle.stage_window = y.value("stage_window", c.cycle.stage_window);
    c.cycle.batch_size_key = y.value("batch_size_key", c.cycle.batch_size_key);
    c.cycle.input_len_key = y.value("input_len_key", c.cycle.input_len_key);
    c.cycle.output_len_key = y.value("output_len_key", c.cycle.output_len_key);
  }
  if (j.contains("pipeline")) {
    const auto& p = j["pipeline"];
    reject_unknown(p, {"latency_component", "include_prefill", "extra_args_prefix"},
                   "pipeline config");
    c.pipeline.latency_component =
        p.value("latency_component", c.pipeline.latency_component);
    c.pipeline.include_prefill =
        p.value("include_prefill", c.pipeline.include_prefill);
    c.pipeline.extra_args_prefix =
        p.value("extra_args_prefix", c.pipeline.extra_args_prefix);
  }
  if (j.contains("feature_set"))
    c.feature_set = feature_set_from_string(j["feature_set"].get<std::string>());
  if (j.contains("gbdt")) {
    const auto& g = j["gbdt"];
    reject_unknown(g,
                   {"n_trees", "max_depth", "learning_rate", "min_samples_leaf",
                    "prediction_floor"},
                   "gbdt config");
    c.gbdt.n_trees = g.value("n_trees", c.gbdt.n_trees);
    c.gbdt.max_depth = g.value("max_depth", c.gbdt.max_depth);
    c.gbdt.learning_rate = g.value("learning_rate", c.gbdt.learning_rate);
    c.gbdt.min_samples_leaf = g.value("min_samples_leaf", c.gbdt.min_samples_leaf);
    c.gbdt.prediction_floor = g.value("prediction_floor", c.gbdt.prediction_floor);
  }
  if (j.contains("fit")) {
    const auto& f = j["fit"];
    reject_unknown(f, {"calibration_fraction", "ppe_epsilon", "min_samples"},
                   "fit config");
    c.fit.calibration_fraction =
        f.value("calibration_fraction", c.fit.calibration_fraction);
    c.fit.ppe_epsilon = f.value("ppe_epsilon", c.fit.ppe_epsilon);
    c.fit.min_samples = f.value("min_samples", c.fit.min_samples);
  }
  if (j.contains("detector")) {
    const auto& d = j["detector"];
    reject_unknown(d,
                   {"strategy", "window", "fixed_threshold", "sigma_k",
                    "theta_max", "min_ucl", "warmup", "epsilon"},
                   "detector config");
    if (d.contains("strategy"))
      c.detector.strategy = strategy_from_string(d["strategy"].get<std::string>());
    c.detector.window = d.value("window", c.detector.window);
    c.detector.fixed_threshold =
        d.value("fixed_threshold", c.detector.fixed_threshold);
    c.detector.sigma_k = d.value("sigma_k", c.detector.sigma_k);
    c.detector.theta_max = d.value("theta_max", c.detector.theta_max);
    c.detector.min_ucl = d.value("min_ucl", c.detector.min_ucl);
    c.detector.warmup = d.value("warmup", c.detector.warmup);
    c.detector.epsilon = d.value("epsilon", c.detector.epsilon);
  }
  if (j.contains("escalation")) {
    const auto& e = j["escalation"];
    reject_unknown(e, {"pre_roll", "post_roll"}, "escalation policy");
    c.escalation.pre_roll = e.value("pre_roll", c.escalation.pre_roll);
    c.escalation.post_roll = e.value("post_roll", c.escalation.post_roll);
  }
  if (j.contains("metric_map"))
    c.metric_map.class_to_metric =
        j["metric_map"].get<std::map<std::string, std::string>>();
  if (j.contains("calibration")) {
    const auto& k = j["calibration"];
    reject_unknown(k, {"reference_domain", "tolerance_ns", "estimate_drift"},
                   "calibration config");
    c.calibration.reference_domain =
        k.value("reference_domain", c.calibration.reference_domain);
    c.calibration.tolerance_ns = k.value("tolerance_ns", c.calibration.tolerance_ns);
    c.calibration.estimate_drift =
        k.value("estimate_drift", c.calibration.estimate_drift);
  }

  if (c.detector.window < 1 || c.detector.theta_max <= 0.0 ||
      c.detector.sigma_k <= 0.0)
    throw ConfigError("detector requires window >= 1, theta_max > 0, sigma_k > 0");
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& err) {
    throw ConfigError("cannot parse config " + path.string() + ": " + err.what());
  }
  return from_json(j);
}

std::string config_reference_text() {
  struct Entry {
    const char* key;
    const char* def;
    const char* doc;
  };
  static const Entry entries[] = {
      {"seed", "1", "RNG seed for reproducible runs"},
      {"cycle.anchor_hint", "\"\"", "fix the anchor function instead of discovering it"},
      {"cycle.min_anchor_calls", "10", "minimum call count for anchor candidates"},
      {"cycle.phase_functions", "[run_batch, process_batch_result, get_next_batch_to_run]",
       "functions whose per-cycle durations are recorded"},
      {"cycle.forward_mode_key", "forward_mode", "args key that names the stage"},
      {"cycle.prefill_keywords", "[forward_prefill]", "sub-event names marking prefill"},
      {"cycle.decode_keywords", "[process_batch_result_decode]",
       "sub-event names marking decode"},
      {"cycle.prefill_duration_factor", "3.0",
       "temporal heuristic: duration vs trailing decode median"},
      {"cycle.prefill_gap_factor", "2.0",
       "temporal heuristic: idle gap vs trailing median"},
      {"cycle.stage_window", "32", "trailing decode cycles for the heuristic"},
      {"cycle.batch_size_key", "batch_size", "args key for B"},
      {"cycle.input_len_key", "input_len", "args key for input tokens"},
      {"cycle.output_len_key", "output_len", "args key for output tokens"},
      {"pipeline.latency_component", "run_batch",
       "phase whose duration is the monitored latency (empty = whole cycle)"},
      {"pipeline.include_prefill", "false", "include prefill cycles in modeling"},
      {"pipeline.extra_args_prefix", "post_",
       "numeric args harvested into the full feature set"},
      {"feature_set", "physical", "physical | extended | full"},
      {"gbdt.n_trees", "200", "boosting rounds"},
      {"gbdt.max_depth", "5", "tree depth limit"},
      {"gbdt.learning_rate", "0.1", "shrinkage per round"},
      {"gbdt.min_samples_leaf", "5", "minimum samples per leaf"},
      {"gbdt.prediction_floor", "1e-6", "seconds; predictions clamp here"},
      {"fit.calibration_fraction", "0.2", "holdout share for residual stats"},
      {"fit.ppe_epsilon", "1e-9", "epsilon in the positive prediction error"},
      {"fit.min_samples", "20", "minimum training samples"},
      {"detector.strategy", "dynamic_window",
       "fixed_point | fixed_window | dynamic_window"},
      {"detector.window", "10", "sliding window size W"},
      {"detector.fixed_threshold", "0.15", "limit for the fixed strategies"},
      {"detector.sigma_k", "3", "sigma coefficient k"},
      {"detector.theta_max", "0.18", "cap on the dynamic limit"},
      {"detector.min_ucl", "0.02", "floor on the dynamic limit"},
      {"detector.warmup", "100", "cycles before the detector arms"},
      {"detector.epsilon", "1e-9", "PPE epsilon"},
      {"escalation.pre_roll", "5", "cycles retained before an alert"},
      {"escalation.post_roll", "20", "cycles retained after an alert"},
      {"metric_map", "oncpu->cpu_usage, gemm_kernel->gpu_usage, ...",
       "event class to counter metric for diagnosis"},
      {"calibration.reference_domain", "reference", "clock domain others map onto"},
      {"calibration.tolerance_ns", "1000", "max beacon residual"},
      {"calibration.estimate_drift", "false", "fit drift, not just offset"},
  };
  std::ostringstream os;
  os << "Config file keys (JSON; every key optional, defaults shown):\n";
  for (const auto& e : entries) {
    os << "  " << e.key;
    for (std::size_t pad = std::string(e.key).size(); pad < 34; ++pad) os << ' ';
    os << e.def;
    for (std::size_t pad = std::string(e.def).size(); pad < 22; ++pad) os << ' ';
    os << e.doc << "\n";
  }
  return os.str();
}

}  // namespace cyclescope
