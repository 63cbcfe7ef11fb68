// Acceptance suite: every release criterion as one pass/fail line, with the
// thresholds pinned in code. Exits nonzero when any criterion fails.
//
// Usage: acceptance [path-to-cyclescope-cli]
// The CLI path is needed by the bounded-memory criterion, which drives the
// real `monitor -` subprocess over a million-cycle stream.

#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cyclescope/baseline.hpp"
#include "cyclescope/cycles.hpp"
#include "cyclescope/detector.hpp"
#include "cyclescope/rca.hpp"
#include "cyclescope/rng.hpp"
#include "cyclescope/simkit.hpp"
#include "cyclescope/trace_io.hpp"
#include "oracles.hpp"

using namespace cyclescope;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int failures = 0;

void report(int criterion, bool pass, const std::string& what,
            const std::string& detail) {
  std::printf("[%s] criterion %d: %s (%s)\n", pass ? "PASS" : "FAIL", criterion,
              what.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string fmt(const char* format, ...) {
  char buf[512];
  va_list args;
  va_start(args, format);
  std::vsnprintf(buf, sizeof(buf), format, args);
  va_end(args);
  return buf;
}

fs::path scratch_dir() {
  const auto dir =
      fs::temp_directory_path() / ("cyclescope_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir;
}

SampleSet records_from_dataset(const LabeledDataset& dataset, FeatureSet set) {
  CycleConfig config;
  PipelineOptions pipeline;
  const auto records = build_cycle_records(dataset.trace, config, pipeline);
  return to_sample_set(records, set);
}

// --- criteria 1 and 5 share the default benchmark run -----------------------

BenchmarkResult run_default_suite(const fs::path& dir) {
  SuiteConfig config;  // the documented defaults: 20 trials, 8 families
  return run_benchmark(config, dir);
}

void criterion_detection(const BenchmarkResult& result, double wall_seconds) {
  const StrategyMetrics* dynamic = nullptr;
  const StrategyMetrics* fixed_window = nullptr;
  for (const auto& m : result.aggregate) {
    if (m.strategy == Strategy::DynamicWindow) dynamic = &m;
    if (m.strategy == Strategy::FixedWindow) fixed_window = &m;
  }
  bool pass = dynamic != nullptr && fixed_window != nullptr;
  std::string detail = "strategy rows missing";
  if (pass) {
    const bool f1_ok = dynamic->f1 >= 0.95;
    const bool fpr_ok = dynamic->fpr <= 0.010;
    const bool lag_ok = dynamic->mean_lag <= 1.0;
    const bool ordering_fpr = fixed_window->fpr <= dynamic->fpr + 1e-12;
    const bool ordering_lag = fixed_window->mean_lag >= dynamic->mean_lag - 1e-12;
    const bool runtime_ok = wall_seconds <= 300.0;
    pass = f1_ok && fpr_ok && lag_ok && ordering_fpr && ordering_lag && runtime_ok;
    detail = fmt(
        "dynamic F1=%.3f (>=0.95) FPR=%.2f%% (<=1%%) lag=%.2f (<=1.0); "
        "fixed FPR=%.2f%% lag=%.2f; suite %.0fs (<=300)",
        dynamic->f1, 100.0 * dynamic->fpr, dynamic->mean_lag,
        100.0 * fixed_window->fpr, fixed_window->mean_lag, wall_seconds);
  }
  report(1, pass, "detection quality on the default 20-trial suite", detail);
}

void criterion_rca(const BenchmarkResult& result) {
  bool pass = !result.families.empty();
  double worst_rate = 1.0, worst_p = 0.0;
  std::string worst_family = "all";
  for (const auto& [family, summary] : result.families) {
    const double rate = summary.trials > 0
                            ? static_cast<double>(summary.top1_hits) /
                                  static_cast<double>(summary.trials)
                            : 0.0;
    if (rate < worst_rate) {
      worst_rate = rate;
      worst_family = family;
    }
    worst_p = std::max(worst_p, summary.worst_top1_p);
    if (rate < 0.90 || summary.worst_top1_p >= 0.01) pass = false;
  }

  std::size_t straggler_trials = 0, straggler_hits = 0;
  for (const auto& [family, summary] : result.families) {
    straggler_trials += summary.straggler_trials;
    straggler_hits += summary.straggler_hits;
  }
  const double straggler_rate =
      straggler_trials > 0 ? static_cast<double>(straggler_hits) /
                                 static_cast<double>(straggler_trials)
                           : 0.0;
  if (straggler_trials == 0 || straggler_rate < 0.95) pass = false;

  report(5, pass, "root-cause target is top-1 per family with p < 0.01",
         fmt("worst family %s top1=%.0f%% (>=90%%), worst p=%.2g (<0.01), "
             "straggler %zu/%zu (>=95%%)",
             worst_family.c_str(), 100.0 * worst_rate, worst_p, straggler_hits,
             straggler_trials));
}

// --- criterion 2: baseline fidelity -----------------------------------------

// Fidelity generator: overlap max() with a per-request host floor and a steep
// per-batch host ramp, over a three-tier traffic mixture (interactive /
// long-context / bulk), all tiers within the documented workload ranges.
// This is the strongest honest quadratic-breaker found for the pinned
// max-of-affines surface family; see the decisions ledger for the analysis.
GroundTruthModel fidelity_model() {
  GroundTruthModel m;
  m.noise = 0.05;
  m.gpu_per_batch = 1e-6;
  m.cpu_fixed = 5e-5;
  m.cpu_per_batch = 1e-4;
  return m;
}

SampleSet fidelity_samples(std::size_t n, std::uint64_t seed) {
  const auto model = fidelity_model();
  WorkloadProfile interactive;
  interactive.batch_max = 32;
  interactive.input_min = 16;
  interactive.input_max = 256;
  WorkloadProfile long_context;
  long_context.batch_min = 4;
  long_context.batch_max = 64;
  long_context.input_min = 512;
  long_context.input_max = 2048;
  WorkloadProfile bulk;
  bulk.batch_min = 128;
  bulk.batch_max = 512;
  bulk.input_min = 64;
  bulk.input_max = 1024;

  std::vector<CycleWorkload> all;
  auto extend = [&](const WorkloadProfile& profile, std::size_t count,
                    std::uint64_t stream) {
    const auto part =
        generate_workload(profile, count, Rng::substream_seed(seed, stream));
    all.insert(all.end(), part.begin(), part.end());
  };
  extend(interactive, n * 65 / 100, 1);
  extend(long_context, n * 20 / 100, 2);
  extend(bulk, n - n * 65 / 100 - n * 20 / 100, 3);

  Rng rng(Rng::substream_seed(seed, 4));
  for (std::size_t i = all.size(); i > 1; --i)
    std::swap(all[i - 1],
              all[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

  std::vector<CycleRecord> records;
  for (const auto& w : all) {
    if (w.stage != Stage::Decode) continue;
    CycleRecord rec;
    rec.workload.batch = w.batch;
    rec.workload.input_len = w.input_len;
    rec.workload.output_len = w.output_len;
    rec.stage = w.stage;
    rec.latency_s =
        model.exec_latency(w.batch, w.batch * (w.input_len + w.output_len)) *
        rng.log_normal(model.noise);
    records.push_back(rec);
  }
  return to_sample_set(records, FeatureSet::Physical);
}

void criterion_baseline() {
  auto train = fidelity_samples(5400, 1001);
  const auto test = fidelity_samples(1050, 2002);
  if (train.size() > 5000) train = train.head(5000);

  const auto model = fit_latency_model(train, GbdtParams{});
  const auto metrics = evaluate_model(model, test);

  const auto poly = fit_poly2(train.x, train.y, train.feature_names);
  double poly_mape = 0.0;
  for (std::size_t i = 0; i < test.size(); ++i)
    poly_mape += std::abs(test.y[i] - poly.predict(test.x.row(i))) / test.y[i];
  poly_mape = 100.0 * poly_mape / static_cast<double>(test.size());

  const bool pass =
      metrics.r2 >= 0.95 && metrics.mape_percent <= 8.0 && poly_mape > 20.0;
  report(2, pass, "workload baseline fidelity on the overlap generator",
         fmt("gbdt R2=%.3f (>=0.95) MAPE=%.2f%% (<=8%%); poly MAPE=%.2f%% "
             "(criterion: >20%%), n=%zu",
             metrics.r2, metrics.mape_percent, poly_mape, train.size()));
}

// --- criterion 3: convergence ------------------------------------------------

void criterion_convergence() {
  SuiteConfig defaults;
  const auto stream_ds = synthesize_trace(
      generate_workload(defaults.profile, 1600, 2001), defaults.model, {}, {}, 2002);
  const auto held_ds = synthesize_trace(
      generate_workload(defaults.profile, 600, 2003), defaults.model, {}, {}, 2004);

  const auto stream = records_from_dataset(stream_ds, FeatureSet::Physical);
  const auto held_out = records_from_dataset(held_ds, FeatureSet::Physical);

  ModelMetrics metrics;
  append_convergence_curve(metrics, stream, held_out, GbdtParams{}, FitOptions{},
                           100);
  double at_1000 = 0.0;
  for (const auto& [n, frac] : metrics.convergence_within10)
    if (n <= 1000) at_1000 = std::max(at_1000, frac);
  const bool pass = at_1000 >= 0.90;
  report(3, pass, "within-10% fraction reaches 90% by 1000 samples",
         fmt("best within-10%% at n<=1000: %.1f%% (>=90%%), curve points=%zu",
             100.0 * at_1000, metrics.convergence_within10.size()));
}

// --- criterion 4: feature causality ------------------------------------------

void criterion_feature_causality() {
  SuiteConfig defaults;
  const auto ds = synthesize_trace(
      generate_workload(defaults.profile, 3200, 3001), defaults.model, {}, {}, 3002);
  const auto full = records_from_dataset(ds, FeatureSet::Full);

  const auto table = ablation_compare(full, GbdtParams{});
  const AblationRow* full_gbdt = nullptr;
  const AblationRow* phys_gbdt = nullptr;
  for (const auto& row : table) {
    if (row.model != "gbdt") continue;
    (row.strategy == "full" ? full_gbdt : phys_gbdt) = &row;
  }
  bool pass = full_gbdt != nullptr && phys_gbdt != nullptr &&
              !full_gbdt->top_features.empty() && !phys_gbdt->top_features.empty();
  std::string full_top = "-", phys_top = "-";
  if (pass) {
    full_top = full_gbdt->top_features[0];
    phys_top = phys_gbdt->top_features[0];
    pass = full_top.rfind("post_", 0) == 0 && phys_top == "w_kv";
  }
  report(4, pass, "spurious post_* features dominate only the full set",
         fmt("full-set top feature '%s' (post_*), physical top '%s' (w_kv)",
             full_top.c_str(), phys_top.c_str()));
}

// --- criterion 6: oracle equivalence ------------------------------------------

void criterion_oracles() {
  // detector vs brute force on 100 random streams of 10^4 cycles
  Rng rng(4001);
  bool detector_ok = true;
  for (int trial = 0; trial < 100 && detector_ok; ++trial) {
    ControlConfig config;
    config.strategy = trial % 3 == 0   ? Strategy::FixedPoint
                      : trial % 3 == 1 ? Strategy::FixedWindow
                                       : Strategy::DynamicWindow;
    config.window = 1 + static_cast<std::size_t>(rng.uniform_int(1, 25));
    config.warmup = static_cast<std::size_t>(rng.uniform_int(0, 200));
    const double ucl = rng.uniform(0.01, 0.25);

    std::vector<double> residuals(10000);
    for (auto& r : residuals) {
      r = std::max(0.0, rng.normal() * 0.04 + 0.01);
      if (rng.uniform01() < 0.01) r = rng.uniform(0.3, 0.95);
    }

    Detector detector(config, ucl);
    const auto oracle = cyclescope::testing::brute_force_detector(residuals, config, ucl);
    std::vector<std::size_t> alerts;
    for (std::size_t t = 0; t < residuals.size(); ++t) {
      ResidualSample sample;
      sample.cycle = t;
      sample.error = residuals[t];
      const auto step = detector.step(sample);
      if (step.flagged != oracle.flagged[t]) detector_ok = false;
      if (step.alert) alerts.push_back(t);
    }
    if (alerts != oracle.alert_cycles) detector_ok = false;
  }

  // interpolated counter means vs a 10^4-step Riemann sum on 100 series
  bool interp_ok = true;
  double worst_rel = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    CounterSeries series;
    series.metric = "m";
    Nanos t = 0;
    const int n = 2 + static_cast<int>(rng.uniform_int(0, 28));
    for (int i = 0; i < n; ++i) {
      t += static_cast<Nanos>(rng.uniform_int(100, 5000));
      series.samples.push_back({t, rng.uniform(1.0, 100.0)});
    }
    const Nanos lo = static_cast<Nanos>(rng.uniform_int(-500, t));
    const Nanos hi = lo + static_cast<Nanos>(rng.uniform_int(200, 20000));
    const double exact = interpolate_mean(series, lo, hi);
    const double oracle =
        cyclescope::testing::riemann_mean_knot_aligned(series, lo, hi, 10000);
    const double rel = std::abs(exact - oracle) / std::max(1e-12, std::abs(oracle));
    worst_rel = std::max(worst_rel, rel);
    if (rel > 1e-6) interp_ok = false;
  }

  report(6, detector_ok && interp_ok,
         "detector and counter-mean match independent oracles",
         fmt("100 alert-log replays %s; interpolation worst rel err %.2g (<=1e-6)",
             detector_ok ? "exact" : "DIVERGED", worst_rel));
}

// --- criterion 7: determinism and round trip ----------------------------------

std::uint64_t hash_file(const fs::path& path) {
  return fnv1a_hash(read_file(path));
}

void criterion_determinism(const fs::path& scratch) {
  SuiteConfig config;
  config.trials = 4;
  config.cycles_per_trial = 1200;
  config.train_cycles = 500;
  config.fault_onset = 800;
  config.fault_onset_jitter = 40;
  config.fault_duration = 100;
  config.detector.warmup = 60;

  const auto dir_a = scratch / "det_a";
  const auto dir_b = scratch / "det_b";
  simulate_suite(config, dir_a);
  simulate_suite(config, dir_b);

  bool identical = hash_file(dir_a / "manifest.json") == hash_file(dir_b / "manifest.json");
  for (std::size_t trial = 0; trial < config.trials && identical; ++trial) {
    char name[32];
    std::snprintf(name, sizeof(name), "trial_%03zu", trial);
    identical = hash_file(dir_a / name / "trace.json") ==
                    hash_file(dir_b / name / "trace.json") &&
                hash_file(dir_a / name / "labels.json") ==
                    hash_file(dir_b / name / "labels.json");
  }

  // evaluation artifacts are hash-stable too
  evaluate_suite(dir_a);
  evaluate_suite(dir_b);
  const bool metrics_stable =
      hash_file(dir_a / "metrics.json") == hash_file(dir_b / "metrics.json") &&
      hash_file(dir_a / "heatmap.csv") == hash_file(dir_b / "heatmap.csv");

  // golden corpus round trip: generated fixture plus a handcrafted edge trace
  bool round_trip = true;
  {
    const auto workloads = generate_workload(WorkloadProfile{}, 520, 5001);
    FaultSpec fault;
    fault.family = FaultFamily::NvlinkSaturation;
    fault.onset = 300;
    fault.duration = 80;
    fault.severity = 12.0;
    fault.target_rank = 3;
    SynthOptions options;
    options.n_ranks = 4;
    const auto golden =
        synthesize_trace(workloads, GroundTruthModel{}, {&fault, 1}, options, 5002);
    const auto reparsed = parse_trace_json(serialize_trace_json(golden.trace));
    round_trip = reparsed.issues.empty() &&
                 reparsed.trace.events == golden.trace.events;

    Trace edge;
    TraceEvent e;
    e.event_id = 1;
    e.kind = EventKind::Span;
    e.name = "edge \"quoted\" / unicode \xe2\x9c\x93";
    e.category = EventCategory::NetIo;
    e.start_ts = 1;
    e.duration = 0;
    e.source = {"node-x", Collector::KernelProbe, "domain-7"};
    e.args["f"] = -1.25e-9;
    e.args["i"] = std::int64_t{-9000000};
    e.args["b"] = true;
    e.args["s"] = std::string("value with\nnewline");
    edge.events.push_back(e);
    TraceEvent counter;
    counter.event_id = 2;
    counter.kind = EventKind::Counter;
    counter.name = "metric";
    counter.category = EventCategory::CounterTelemetry;
    counter.start_ts = 5;
    counter.args["value"] = 0.0;
    edge.events.push_back(counter);
    const auto edge_reparsed = parse_trace_json(serialize_trace_json(edge));
    round_trip = round_trip && edge_reparsed.trace.events == edge.events;
  }

  report(7, identical && metrics_stable && round_trip,
         "seeded reruns are byte-identical; serialize/parse is lossless",
         fmt("datasets %s, metrics %s, round trip %s",
             identical ? "identical" : "DIFFER",
             metrics_stable ? "stable" : "UNSTABLE",
             round_trip ? "lossless" : "LOSSY"));
}

// --- criterion 8: bounded-memory monitoring -----------------------------------

long rss_kb_of(pid_t pid) {
  std::ifstream status("/proc/" + std::to_string(pid) + "/status");
  std::string line;
  while (std::getline(status, line)) {
    if (line.rfind("VmRSS:", 0) == 0) {
      std::istringstream is(line.substr(6));
      long kb = 0;
      is >> kb;
      return kb;
    }
  }
  return -1;
}

void criterion_bounded_memory(const std::string& cli, const fs::path& scratch) {
  if (cli.empty() || !fs::exists(cli)) {
    report(8, false, "bounded-memory monitor", "cli binary not found: " + cli);
    return;
  }

  // train a model for the monitor to load
  SuiteConfig defaults;
  const auto ds = synthesize_trace(
      generate_workload(defaults.profile, 1500, 6001), defaults.model, {}, {}, 6002);
  const auto samples = records_from_dataset(ds, FeatureSet::Physical);
  const auto model = fit_latency_model(samples, GbdtParams{});
  const auto model_path = scratch / "memcheck_model.json";
  model.save(model_path);

  int pipe_fd[2];
  if (::pipe(pipe_fd) != 0) {
    report(8, false, "bounded-memory monitor", "pipe() failed");
    return;
  }
  const pid_t child = ::fork();
  if (child == 0) {
    ::dup2(pipe_fd[0], STDIN_FILENO);
    ::close(pipe_fd[0]);
    ::close(pipe_fd[1]);
    const std::string alerts = (scratch / "memcheck_alerts.ndjson").string();
    ::execl(cli.c_str(), cli.c_str(), "monitor", "-", "--model",
            model_path.c_str(), "--alerts", alerts.c_str(), nullptr);
    std::_Exit(127);
  }
  ::close(pipe_fd[0]);

  // one million cycles streamed through the pipe; RSS sampled along the way
  constexpr std::size_t kCycles = 1'000'000;
  GroundTruthModel gt = defaults.model;
  Rng rng(6003);
  FILE* out = ::fdopen(pipe_fd[1], "w");
  long rss_early = -1, rss_max = -1;
  char line[256];
  for (std::size_t i = 0; i < kCycles; ++i) {
    const std::int64_t batch = 1 + static_cast<std::int64_t>(rng.uniform01() * 63);
    const std::int64_t input = 1 + static_cast<std::int64_t>(rng.uniform01() * 1023);
    const std::int64_t output = 1 + static_cast<std::int64_t>(rng.uniform01() * 255);
    const double latency = gt.exec_latency(batch, batch * (input + output)) *
                           rng.log_normal(0.05);
    std::snprintf(line, sizeof(line),
                  "{\"cycle\":%zu,\"batch\":%lld,\"input_len\":%lld,"
                  "\"output_len\":%lld,\"latency_s\":%.9e}\n",
                  i, static_cast<long long>(batch), static_cast<long long>(input),
                  static_cast<long long>(output), latency);
    if (std::fputs(line, out) == EOF) break;
    if (i % 100000 == 0 && i > 0) {
      std::fflush(out);
      const long rss = rss_kb_of(child);
      if (i == 100000) rss_early = rss;
      rss_max = std::max(rss_max, rss);
    }
  }
  std::fclose(out);
  int status = 0;
  ::waitpid(child, &status, 0);

  const long growth_kb = rss_max - rss_early;
  const bool exited_clean = WIFEXITED(status) && (WEXITSTATUS(status) == 0 ||
                                                  WEXITSTATUS(status) == 2);
  const bool pass = exited_clean && rss_early > 0 && growth_kb < 10 * 1024;
  report(8, pass, "monitor state is O(W + model) over a 1M-cycle stream",
         fmt("RSS at 100k cycles %ld kB, peak %ld kB, growth %ld kB (<10240), exit %d",
             rss_early, rss_max, growth_kb, WEXITSTATUS(status)));
}

}  // namespace

int main(int argc, char** argv) {
  const std::string cli = argc > 1 ? argv[1] : "";
  const auto scratch = scratch_dir();

  const auto t0 = std::chrono::steady_clock::now();
  const auto benchmark = run_default_suite(scratch / "default_suite");
  const double suite_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  criterion_detection(benchmark, suite_seconds);
  criterion_baseline();
  criterion_convergence();
  criterion_feature_causality();
  criterion_rca(benchmark);
  criterion_oracles();
  criterion_determinism(scratch);
  criterion_bounded_memory(cli, scratch);

  fs::remove_all(scratch);
  if (failures > 0) {
    std::printf("%d criterion(s) failed\n", failures);
    return 1;
  }
  std::printf("all acceptance criteria passed\n");
  return 0;
}
