// cyclescope: trace-driven latency characterization and anomaly detection
// for iterative inference workloads.
//
// Exit codes: 0 success, 1 input/config error, 2 success with alerts emitted.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cyclescope/align.hpp"
#include "cyclescope/baseline.hpp"
#include "cyclescope/config.hpp"
#include "cyclescope/cycles.hpp"
#include "cyclescope/detector.hpp"
#include "cyclescope/errors.hpp"
#include "cyclescope/rca.hpp"
#include "cyclescope/simkit.hpp"
#include "cyclescope/trace_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cyclescope;

namespace {

struct CommonOptions {
  std::string config_path;

  RunConfig load() const {
    return config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
  }
};

Trace load_validated(const fs::path& path, bool print_summary) {
  auto parsed = load_trace(path);
  const auto report = validate_trace(parsed.trace, parsed.issues);
  if (print_summary) std::cerr << path.string() << ": " << report.summary() << "\n";
  if (!report.ok()) {
    std::string details;
    for (const auto& issue : report.issues) {
      if (issue.severity != ValidationIssue::Severity::Error) continue;
      if (!details.empty()) details += "; ";
      details += issue.code + ": " + issue.message;
      if (details.size() > 400) break;
    }
    throw MalformedTrace(path.string() + " failed validation: " + details);
  }
  return std::move(parsed.trace);
}

// feature vector for a model schema from a cycle record or a stream record
std::vector<double> features_by_name(const std::vector<std::string>& names,
                                     const WorkloadFeatures& w, Stage stage,
                                     const std::map<std::string, double>& extra) {
  std::vector<double> row;
  row.reserve(names.size());
  for (const auto& name : names) {
    if (name == "batch") row.push_back(static_cast<double>(w.batch));
    else if (name == "w_kv") row.push_back(static_cast<double>(w.kv_token_slots()));
    else if (name == "input_len") row.push_back(static_cast<double>(w.input_len));
    else if (name == "output_len") row.push_back(static_cast<double>(w.output_len));
    else if (name == "stage") row.push_back(stage == Stage::Prefill ? 1.0 : 0.0);
    else {
      auto it = extra.find(name);
      if (it == extra.end())
        throw FeatureMismatch("input lacks feature '" + name + "'");
      row.push_back(it->second);
    }
  }
  return row;
}

int cmd_ingest(const std::vector<std::string>& inputs, const std::string& out,
               const CommonOptions& common) {
  const auto config = common.load();
  std::vector<Trace> traces;
  std::vector<Beacon> beacons;
  for (const auto& input : inputs) {
    auto trace = load_validated(input, true);
    auto b = extract_beacons(trace);
    beacons.insert(beacons.end(), b.begin(), b.end());
    traces.push_back(std::move(trace));
  }
  const auto calibration = calibrate(beacons, config.calibration);
  for (auto& trace : traces) apply_calibration(trace, calibration);
  auto merged = merge_traces(std::move(traces));
  save_trace(merged, out);
  std::cerr << "wrote " << merged.events.size() << " events to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& input, const std::string& model_out,
              const std::string& report_out, const std::string& feature_set,
              std::size_t convergence_step, const CommonOptions& common) {
  auto config = common.load();
  if (!feature_set.empty()) config.feature_set = feature_set_from_string(feature_set);

  const auto trace = load_validated(input, true);
  const auto records = build_cycle_records(trace, config.cycle, config.pipeline);
  const auto samples = to_sample_set(records, config.feature_set);
  const auto model = fit_latency_model(samples, config.gbdt, config.fit);
  model.save(model_out);

  // held-out tail gives an honest quality readout next to the model file
  const std::size_t n_eval = std::max<std::size_t>(1, samples.size() / 5);
  const auto train_part = samples.head(samples.size() - n_eval);
  SampleSet eval_part;
  eval_part.feature_names = samples.feature_names;
  eval_part.x.cols = samples.x.cols;
  for (std::size_t i = samples.size() - n_eval; i < samples.size(); ++i) {
    eval_part.x.push_row(samples.x.row(i));
    eval_part.y.push_back(samples.y[i]);
  }
  auto metrics = evaluate_model(model, eval_part);
  if (convergence_step > 0)
    append_convergence_curve(metrics, train_part, eval_part, config.gbdt,
                             config.fit, convergence_step);

  json report = metrics.to_json();
  report["samples"] = samples.size();
  report["features"] = samples.feature_names;
  report["residual_stats"] = {{"mu", model.mu_train},
                              {"sigma", model.sigma_train},
                              {"calibration_size", model.calibration_size}};
  if (!report_out.empty()) write_file(report_out, report.dump(2) + "\n");
  std::cout << report.dump(2) << "\n";
  return 0;
}

struct MonitorResult {
  std::size_t alerts = 0;
  std::size_t cycles = 0;
};

MonitorResult monitor_loop(const LatencyModel& model, const RunConfig& config,
                           std::istream& stream_in, std::ostream& alert_out,
                           bool stream_mode, const Trace* trace) {
  const double ucl = ucl_from_stats(model.mu_train, model.sigma_train,
                                    config.detector);
  Detector detector(config.detector, ucl);
  Escalator escalator(config.escalation);
  MonitorResult result;

  auto process = [&](std::size_t cycle, Nanos ts, const WorkloadFeatures& w,
                     Stage stage, const std::map<std::string, double>& extra,
                     double actual_s) {
    const auto row = features_by_name(model.feature_names, w, stage, extra);
    const double predicted = model.predict(row);
    ResidualSample sample;
    sample.cycle = cycle;
    sample.ts = ts;
    sample.workload = w;
    sample.actual_s = actual_s;
    sample.predicted_s = predicted;
    sample.error = ppe(actual_s, predicted, config.detector.epsilon);
    const auto step = detector.step(sample);
    escalator.on_cycle(cycle);
    if (step.alert) {
      ++result.alerts;
      auto record = step.alert->to_json();
      if (const auto action = escalator.on_alert(*step.alert)) {
        record["retain"] = {{"begin", action->retain.begin},
                            {"end", action->retain.end}};
        record["mode"] = to_string(escalator.mode());
      }
      alert_out << record.dump() << "\n";
      alert_out.flush();
    }
    ++result.cycles;
  };

  if (stream_mode) {
    // newline-delimited cycle records; state stays O(W + model)
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(stream_in, line)) {
      ++line_no;
      if (line.empty()) continue;
      json rec;
      try {
        rec = json::parse(line);
      } catch (const json::exception& err) {
        throw MalformedTrace("stream line " + std::to_string(line_no) + ": " +
                             err.what());
      }
      WorkloadFeatures w;
      w.batch = rec.value("batch", std::int64_t{0});
      w.input_len = rec.value("input_len", std::int64_t{0});
      w.output_len = rec.value("output_len", std::int64_t{0});
      std::map<std::string, double> extra;
      for (const auto& [key, value] : rec.items())
        if (value.is_number() && key.rfind("post_", 0) == 0)
          extra[key] = value.get<double>();
      const auto cycle = rec.value("cycle", std::uint64_t{line_no - 1});
      process(cycle, rec.value("ts", std::int64_t{0}), w, Stage::Decode, extra,
              rec.at("latency_s").get<double>());
    }
  } else {
    const auto config_copy = config;  // records need the cycle/pipeline config
    const auto records =
        build_cycle_records(*trace, config_copy.cycle, config_copy.pipeline);
    for (const auto& rec : records)
      process(rec.cycle_index, rec.start_ts, rec.workload, rec.stage, rec.extra,
              rec.latency_s);
  }
  return result;
}

int cmd_monitor(const std::string& input, const std::string& model_path,
                const std::string& alerts_out, const CommonOptions& common) {
  const auto config = common.load();
  const auto model = LatencyModel::load(model_path);

  std::ofstream alert_file;
  std::ostream* alert_stream = &std::cout;
  if (!alerts_out.empty()) {
    alert_file.open(alerts_out, std::ios::trunc);
    if (!alert_file) throw IoError("cannot open " + alerts_out);
    alert_stream = &alert_file;
  }

  MonitorResult result;
  if (input == "-") {
    result = monitor_loop(model, config, std::cin, *alert_stream, true, nullptr);
  } else {
    const auto trace = load_validated(input, true);
    result = monitor_loop(model, config, std::cin, *alert_stream, false, &trace);
  }
  std::cerr << "monitored " << result.cycles << " cycles, " << result.alerts
            << " alerts\n";
  return result.alerts > 0 ? 2 : 0;
}

int cmd_diagnose(const std::string& input, const std::string& model_path,
                 std::size_t episode, const std::string& out,
                 const CommonOptions& common) {
  const auto config = common.load();
  const auto model = LatencyModel::load(model_path);
  const auto trace = load_validated(input, true);

  const auto cycles = segment_and_classify(trace, config.cycle);
  const auto records =
      build_cycle_records(trace, cycles, config.cycle, config.pipeline);
  if (records.empty()) throw InsufficientCycles("trace yields no monitored cycles");

  const double ucl = ucl_from_stats(model.mu_train, model.sigma_train,
                                    config.detector);
  Detector detector(config.detector, ucl);

  struct Episode {
    std::vector<std::size_t> cycles;
  };
  std::vector<Episode> episodes;
  std::vector<std::size_t> normal_cycles;
  bool open = false;
  for (const auto& rec : records) {
    ResidualSample sample;
    sample.cycle = rec.cycle_index;
    const auto row = features_by_name(model.feature_names, rec.workload,
                                      rec.stage, rec.extra);
    sample.error = ppe(rec.latency_s, model.predict(row), config.detector.epsilon);
    const auto step = detector.step(sample);
    if (step.flagged) {
      if (!open) episodes.emplace_back();
      open = true;
      episodes.back().cycles.push_back(rec.cycle_index);
    } else {
      open = false;
      if (step.armed) normal_cycles.push_back(rec.cycle_index);
    }
  }
  if (episodes.empty())
    throw InsufficientCycles("no alert episodes found in this trace");
  if (episode >= episodes.size())
    throw ConfigError("episode " + std::to_string(episode) + " out of range, " +
                      std::to_string(episodes.size()) + " episode(s) found");

  const auto counters = CounterTable::from_trace(trace);
  std::map<std::size_t, const Cycle*> by_index;
  for (const auto& c : cycles) by_index[c.index] = &c;
  auto stats_for = [&](const std::vector<std::size_t>& indices) {
    std::vector<CycleClassStats> stats;
    for (auto idx : indices)
      if (auto it = by_index.find(idx); it != by_index.end())
        stats.push_back(cycle_stats(*it->second, trace, counters,
                                    config.metric_map));
    return stats;
  };
  if (normal_cycles.size() > 300)
    normal_cycles.erase(normal_cycles.begin(), normal_cycles.end() - 300);
  const auto norm_stats = stats_for(normal_cycles);
  const auto abn_stats = stats_for(episodes[episode].cycles);

  auto entries = suspicion_rank(norm_stats, abn_stats);
  attribute_straggler(entries, resolve_topology(trace), norm_stats, abn_stats);

  const auto report = render_json_report(entries);
  if (!out.empty()) write_file(out, report.dump(2) + "\n");
  std::cout << render_text_report(entries);
  return 0;
}

int cmd_simulate(const std::string& suite_path, const std::string& out_dir) {
  const auto config = suite_path.empty() ? SuiteConfig{}
                                         : SuiteConfig::load(suite_path);
  simulate_suite(config, out_dir);
  std::cerr << "wrote " << config.trials << " trial datasets to " << out_dir
            << "\n";
  return 0;
}

int cmd_evaluate(const std::string& run_dir) {
  const auto result = evaluate_suite(run_dir);
  std::cout << result.to_json().dump(2) << "\n";
  std::cerr << "metrics.json and heatmap.csv written to " << run_dir << " in "
            << result.wall_seconds << " s\n";
  return 0;
}

std::string format_strategy_table(const json& metrics) {
  std::ostringstream os;
  os << "Detection strategies\n";
  os << "  strategy          precision   recall       f1      fpr      lag\n";
  for (const auto& row : metrics.at("strategies")) {
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "  %-16s %9.3f %8.3f %8.3f %7.2f%% %8.2f\n",
                  row.at("strategy").get<std::string>().c_str(),
                  row.at("precision").get<double>(),
                  row.at("recall").get<double>(), row.at("f1").get<double>(),
                  100.0 * row.at("fpr").get<double>(),
                  row.at("mean_lag").get<double>());
    os << buf;
  }
  return os.str();
}

std::string format_rca_table(const json& metrics) {
  std::ostringstream os;
  os << "Root-cause localization (per fault family)\n";
  os << "  fault               event          dBeta%       dMu     score  "
        "  top1      p\n";
  std::map<std::string, const json*> sample_rows;
  for (const auto& trial : metrics.at("trials")) {
    const auto family = trial.at("family").get<std::string>();
    if (!sample_rows.count(family) && trial.at("rca_ran").get<bool>())
      sample_rows[family] = &trial;
  }
  for (const auto& [family, summary] : metrics.at("families").items()) {
    char buf[200];
    const json* sample = sample_rows.count(family) ? sample_rows.at(family) : nullptr;
    std::snprintf(
        buf, sizeof(buf), "  %-19s %-13s %7.1f %9.3g %9.3g   %zu/%zu %7.1g\n",
        family.c_str(),
        sample ? (*sample).at("rca_top_class").get<std::string>().c_str() : "-",
        sample ? 100.0 * (*sample).at("rca_delta_beta").get<double>() : 0.0,
        sample ? (*sample).at("rca_delta_mu").get<double>() : 0.0,
        sample ? (*sample).at("rca_score").get<double>() : 0.0,
        summary.at("top1_hits").get<std::size_t>(),
        summary.at("trials").get<std::size_t>(),
        sample ? (*sample).at("rca_top_p").get<double>() : 1.0);
    os << buf;
  }
  return os.str();
}

int cmd_report(const std::string& run_dir) {
  json metrics;
  try {
    metrics = json::parse(read_file(fs::path(run_dir) / "metrics.json"));
  } catch (const json::exception& err) {
    throw ConfigError("cannot read metrics.json (run `evaluate` first): " +
                      std::string(err.what()));
  }
  std::cout << format_strategy_table(metrics) << "\n"
            << format_rca_table(metrics) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "cyclescope - iteration-cycle latency monitoring, anomaly detection and "
      "root-cause ranking for inference traces"};
  app.require_subcommand(1);
  app.footer(config_reference_text());

  CommonOptions common;

  auto* ingest = app.add_subcommand(
      "ingest", "validate, calibrate and merge traces onto one timeline");
  std::vector<std::string> ingest_inputs;
  std::string ingest_out = "merged.json";
  ingest->add_option("trace", ingest_inputs, "input trace files (.json/.json.gz)")
      ->required()
      ->expected(-1);
  ingest->add_option("--out", ingest_out, "merged output path");
  ingest->add_option("--config", common.config_path, "run config JSON");

  auto* train = app.add_subcommand(
      "train", "fit the workload->latency baseline from a trace");
  std::string train_input, train_model = "model.json", train_report,
              train_features;
  std::size_t train_convergence = 0;
  train->add_option("trace", train_input, "input trace")->required();
  train->add_option("--out", train_model, "model output path");
  train->add_option("--report", train_report, "metrics report output path");
  train->add_option("--feature-set", train_features,
                    "physical | extended | full");
  train->add_option("--convergence-step", train_convergence,
                    "emit a convergence curve, retraining every N samples");
  train->add_option("--config", common.config_path, "run config JSON");

  auto* monitor = app.add_subcommand(
      "monitor", "stream residual monitoring; alerts as NDJSON; exit 2 on alerts");
  std::string monitor_input, monitor_model, monitor_alerts;
  monitor->add_option("trace", monitor_input,
                      "input trace, or '-' for NDJSON cycle records on stdin")
      ->required();
  monitor->add_option("--model", monitor_model, "trained model JSON")->required();
  monitor->add_option("--alerts", monitor_alerts,
                      "alert sink path (default: stdout)");
  monitor->add_option("--config", common.config_path, "run config JSON");

  auto* diagnose = app.add_subcommand(
      "diagnose", "rank root-cause suspects for an alert episode");
  std::string diag_input, diag_model, diag_out;
  std::size_t diag_episode = 0;
  diagnose->add_option("trace", diag_input, "input trace")->required();
  diagnose->add_option("--model", diag_model, "trained model JSON")->required();
  diagnose->add_option("--episode", diag_episode, "episode index (default 0)");
  diagnose->add_option("--out", diag_out, "suspicion report JSON output");
  diagnose->add_option("--config", common.config_path, "run config JSON");

  auto* simulate = app.add_subcommand(
      "simulate", "generate a labeled synthetic benchmark run directory");
  std::string sim_suite, sim_out;
  simulate->add_option("suite", sim_suite,
                       "suite config JSON (omit for the default suite)");
  simulate->add_option("--out", sim_out, "run directory")->required();

  auto* evaluate = app.add_subcommand(
      "evaluate", "score all detection strategies and RCA over a run directory");
  std::string eval_dir;
  evaluate->add_option("rundir", eval_dir, "run directory")->required();

  auto* report = app.add_subcommand("report",
                                    "human-readable summary of a run directory");
  std::string report_dir;
  report->add_option("rundir", report_dir, "run directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (ingest->parsed()) return cmd_ingest(ingest_inputs, ingest_out, common);
    if (train->parsed())
      return cmd_train(train_input, train_model, train_report, train_features,
                       train_convergence, common);
    if (monitor->parsed())
      return cmd_monitor(monitor_input, monitor_model, monitor_alerts, common);
    if (diagnose->parsed())
      return cmd_diagnose(diag_input, diag_model, diag_episode, diag_out, common);
    if (simulate->parsed()) return cmd_simulate(sim_suite, sim_out);
    if (evaluate->parsed()) return cmd_evaluate(eval_dir);
    if (report->parsed()) return cmd_report(report_dir);
  } catch (const EngineError& err) {
    std::cerr << json{{"error", {{"type", err.type()}, {"message", err.what()}}}}
                     .dump()
              << "\n";
    return 1;
  } catch (const std::exception& err) {
    std::cerr << json{{"error",
                       {{"type", "internal"}, {"message", err.what()}}}}
                     .dump()
              << "\n";
    return 1;
  }
  return 0;
}
