#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "cyclescope/errors.hpp"
#include "cyclescope/rca.hpp"
#include "cyclescope/rng.hpp"
#include "cyclescope/simkit.hpp"
#include "cyclescope/trace_io.hpp"

using namespace cyclescope;

TEST_CASE("workload generation: empty, fixed and default profiles") {
  CHECK(generate_workload(WorkloadProfile{}, 0, 1).empty());

  WorkloadProfile fixed;
  fixed.distribution = WorkloadProfile::Distribution::Fixed;
  fixed.fixed_batch = 4;
  fixed.fixed_input = 100;
  fixed.fixed_output = 8;
  const auto fixed_cycles = generate_workload(fixed, 100, 1);
  for (const auto& w : fixed_cycles) {
    if (w.stage == Stage::Decode) {
      CHECK(w.batch == 4);
      CHECK(w.input_len == 100);
    }
  }

  const auto cycles = generate_workload(WorkloadProfile{}, 10000, 2);
  REQUIRE(cycles.size() == 10000);
  std::int64_t b_min = 1 << 20, b_max = 0, in_max = 0, out_max = 0;
  for (const auto& w : cycles) {
    b_min = std::min(b_min, w.batch);
    b_max = std::max(b_max, w.batch);
    in_max = std::max(in_max, w.input_len);
    out_max = std::max(out_max, w.output_len);
  }
  CHECK(b_min >= 1);
  CHECK(b_max <= 512);
  CHECK(in_max <= 2048);
  CHECK(out_max <= 512);
}

TEST_CASE("decode output length advances monotonically within a request") {
  const auto cycles = generate_workload(WorkloadProfile{}, 5000, 3);
  for (std::size_t i = 1; i < cycles.size(); ++i) {
    if (cycles[i].request_id == cycles[i - 1].request_id &&
        cycles[i].stage == Stage::Decode &&
        cycles[i - 1].stage == Stage::Decode) {
      CHECK(cycles[i].output_len == cycles[i - 1].output_len + 1);
    }
    if (cycles[i].stage == Stage::Prefill)
      CHECK(cycles[i].request_id == cycles[i - 1].request_id + 1);
  }
  CHECK(cycles[0].stage == Stage::Prefill);
}

TEST_CASE("invalid profiles are rejected") {
  WorkloadProfile bad;
  bad.batch_min = 0;
  CHECK_THROWS_AS(generate_workload(bad, 10, 1), InvalidProfile);
  WorkloadProfile inverted;
  inverted.input_min = 100;
  inverted.input_max = 10;
  CHECK_THROWS_AS(generate_workload(inverted, 10, 1), InvalidProfile);
}

TEST_CASE("noiseless generation hits the analytic latency exactly") {
  GroundTruthModel model;
  model.noise = 0.0;
  const auto workloads = generate_workload(WorkloadProfile{}, 200, 4);
  const auto dataset = synthesize_trace(workloads, model, {}, {}, 5);

  CycleConfig config;
  auto cycles = segment_and_classify(dataset.trace, config);
  std::size_t checked = 0;
  for (const auto& c : cycles) {
    if (c.stage != Stage::Decode) continue;
    const auto& w = workloads[c.index];
    const double expected =
        model.exec_latency(w.batch, w.batch * (w.input_len + w.output_len));
    const double actual =
        static_cast<double>(c.component_durations.at("run_batch")) * 1e-9;
    CHECK(actual == doctest::Approx(expected).epsilon(1e-6));
    ++checked;
  }
  CHECK(checked > 100);
}

TEST_CASE("every generated trace passes validation with zero errors") {
  const auto workloads = generate_workload(WorkloadProfile{}, 300, 6);
  FaultSpec fault;
  fault.family = FaultFamily::NvlinkSaturation;
  fault.onset = 100;
  fault.duration = 50;
  fault.severity = 12.0;
  fault.target_rank = 2;
  SynthOptions options;
  options.n_ranks = 4;
  const auto dataset =
      synthesize_trace(workloads, GroundTruthModel{}, {&fault, 1}, options, 7);
  const auto report = validate_trace(dataset.trace);
  CAPTURE(report.summary());
  CHECK(report.error_count() == 0);
  CHECK(dataset.labels.anomalous.size() == workloads.size());
}

TEST_CASE("cpu contention roughly doubles oncpu occupancy in-window") {
  // GPU-bound fixed workload: doubling the oncpu spans leaves the latency
  // untouched, so the occupancy itself doubles cleanly
  WorkloadProfile profile;
  profile.distribution = WorkloadProfile::Distribution::Fixed;
  profile.fixed_batch = 64;
  profile.fixed_input = 2048;
  profile.fixed_output = 64;
  const auto workloads = generate_workload(profile, 700, 8);
  FaultSpec fault;
  fault.family = FaultFamily::CpuContention;
  fault.onset = 500;
  fault.duration = 100;
  fault.severity = 2.0;
  const auto dataset =
      synthesize_trace(workloads, GroundTruthModel{}, {&fault, 1}, {}, 9);

  CycleConfig config;
  auto cycles = segment_and_classify(dataset.trace, config);
  const auto counters = CounterTable::from_trace(dataset.trace);
  const auto metric_map = MetricMap::defaults();

  double beta_in = 0.0, beta_out = 0.0, cpu_in = 0.0, cpu_out = 0.0;
  std::size_t n_in = 0, n_out = 0;
  for (const auto& c : cycles) {
    if (c.stage != Stage::Decode) continue;
    const auto stats = cycle_stats(c, dataset.trace, counters, metric_map);
    auto it = stats.classes.find("oncpu");
    if (it == stats.classes.end()) continue;
    if (fault.covers(c.index)) {
      beta_in += it->second.beta;
      cpu_in += it->second.mu.value_or(0.0);
      ++n_in;
    } else {
      beta_out += it->second.beta;
      cpu_out += it->second.mu.value_or(0.0);
      ++n_out;
    }
  }
  REQUIRE(n_in > 50);
  REQUIRE(n_out > 400);
  beta_in /= n_in;
  beta_out /= n_out;
  cpu_in /= n_in;
  cpu_out /= n_out;
  CHECK(beta_in > 1.7 * beta_out);
  CHECK(beta_in < 2.4 * beta_out);
  CHECK(cpu_in > cpu_out + 8.0);  // stressor load visible in the counter
}

TEST_CASE("frequency drop lowers the frequency counter while latency rises") {
  const auto workloads = generate_workload(WorkloadProfile{}, 700, 10);
  FaultSpec fault;
  fault.family = FaultFamily::CpuFreqDrop;
  fault.onset = 500;
  fault.duration = 100;
  fault.severity = 5.0;
  const auto dataset =
      synthesize_trace(workloads, GroundTruthModel{}, {&fault, 1}, {}, 11);

  const auto counters = CounterTable::from_trace(dataset.trace);
  const auto* freq = counters.find("frequency");
  REQUIRE(freq != nullptr);

  CycleConfig config;
  auto cycles = segment_and_classify(dataset.trace, config);
  double freq_in = 0.0, freq_out = 0.0, lat_in = 0.0, lat_out = 0.0;
  std::size_t n_in = 0, n_out = 0;
  for (const auto& c : cycles) {
    if (c.stage != Stage::Decode) continue;
    const double f = interpolate_mean(*freq, c.start_ts, c.end_ts);
    const double lat = static_cast<double>(c.duration());
    if (fault.covers(c.index)) {
      freq_in += f;
      lat_in += lat;
      ++n_in;
    } else {
      freq_out += f;
      lat_out += lat;
      ++n_out;
    }
  }
  REQUIRE(n_in > 50);
  CHECK(freq_in / n_in < 0.5 * (freq_out / n_out));
  CHECK(lat_in / n_in > 1.5 * (lat_out / n_out));
}

TEST_CASE("generation is bit-deterministic in config and seed") {
  const auto workloads = generate_workload(WorkloadProfile{}, 400, 12);
  FaultSpec fault;
  fault.family = FaultFamily::GpuContention;
  fault.onset = 200;
  fault.duration = 80;
  fault.severity = 5.0;
  const auto a = synthesize_trace(workloads, GroundTruthModel{}, {&fault, 1}, {}, 13);
  const auto b = synthesize_trace(workloads, GroundTruthModel{}, {&fault, 1}, {}, 13);
  CHECK(serialize_trace_json(a.trace) == serialize_trace_json(b.trace));
  CHECK(a.labels.to_json() == b.labels.to_json());

  const auto c = synthesize_trace(workloads, GroundTruthModel{}, {&fault, 1}, {}, 14);
  CHECK(serialize_trace_json(a.trace) != serialize_trace_json(c.trace));
}

TEST_CASE("each fault family separates in-window latency by construction") {
  SuiteConfig config;
  config.trials = 8;
  config.cycles_per_trial = 1400;
  config.train_cycles = 600;
  config.fault_onset = 900;
  config.fault_onset_jitter = 50;
  config.fault_duration = 120;
  config.detector.warmup = 80;

  for (std::size_t trial = 0; trial < config.trials; ++trial) {
    const auto family = config.families[trial % config.families.size()];
    const auto workloads = generate_workload(
        config.profile, config.cycles_per_trial,
        Rng::substream_seed(config.seed, trial));
    FaultSpec fault;
    fault.family = family;
    fault.onset = 900;
    fault.duration = 120;
    fault.severity = default_severity(family);
    SynthOptions options;
    options.n_ranks = family == FaultFamily::NvlinkSaturation ? 4 : 1;
    const auto dataset =
        synthesize_trace(workloads, config.model, {&fault, 1}, options,
                         Rng::substream_seed(config.seed, 100 + trial));

    double in_sum = 0.0, out_sum = 0.0;
    std::size_t n_in = 0, n_out = 0;
    CycleConfig cycle_config;
    for (const auto& c : segment_and_classify(dataset.trace, cycle_config)) {
      if (c.stage != Stage::Decode) continue;
      const double lat = static_cast<double>(c.duration());
      if (fault.covers(c.index)) { in_sum += lat; ++n_in; }
      else { out_sum += lat; ++n_out; }
    }
    CAPTURE(to_string(family));
    REQUIRE(n_in > 0);
    CHECK(in_sum / n_in >= 1.3 * (out_sum / n_out));
  }
}

TEST_CASE("a no-op severity is rejected as an unlabeled effect") {
  SuiteConfig config;
  config.trials = 1;
  config.cycles_per_trial = 1200;
  config.train_cycles = 500;
  config.fault_onset = 800;
  config.fault_onset_jitter = 0;
  config.fault_duration = 100;
  config.detector.warmup = 60;

  const auto workloads =
      generate_workload(config.profile, config.cycles_per_trial, 1);
  FaultSpec fault;
  fault.family = FaultFamily::CpuContention;
  fault.onset = 800;
  fault.duration = 100;
  fault.severity = 1.0;  // multiplies by one: no effect
  const auto dataset =
      synthesize_trace(workloads, config.model, {&fault, 1}, {}, 2);
  CHECK_THROWS_AS(
      evaluate_trial(config, dataset, 0, FaultFamily::CpuContention),
      ConfigConflict);
}

TEST_CASE("clean noiseless run keeps the dynamic strategy quiet") {
  SuiteConfig config;
  config.cycles_per_trial = 1400;
  config.train_cycles = 600;
  config.detector.warmup = 80;

  const auto workloads =
      generate_workload(config.profile, config.cycles_per_trial, 21);
  const auto dataset = synthesize_trace(workloads, config.model, {}, {}, 22);
  const auto outcome =
      evaluate_trial(config, dataset, 0, FaultFamily::CpuContention);

  const auto& dynamic = outcome.strategies[2];
  CHECK(dynamic.strategy == Strategy::DynamicWindow);
  const double total = static_cast<double>(
      dynamic.false_positives + dynamic.true_negatives);
  CHECK(dynamic.false_positives <= 0.01 * total);
  CHECK(dynamic.alerts <= 2);
}

TEST_CASE("suite config rejects unknown keys and hashes stably") {
  auto j = SuiteConfig{}.to_json();
  CHECK(SuiteConfig::from_json(j).config_hash() == SuiteConfig{}.config_hash());
  j["not_a_key"] = 1;
  CHECK_THROWS_AS(SuiteConfig::from_json(j), ConfigError);

  auto nested = SuiteConfig{}.to_json();
  nested["detector"]["bogus"] = true;
  CHECK_THROWS_AS(SuiteConfig::from_json(nested), ConfigError);
}

TEST_CASE("run directories are locked against concurrent use") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "cyclescope_lock_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  {
    std::ofstream lock(dir / ".lock");
    lock << "held\n";
  }
  SuiteConfig config;
  config.trials = 1;
  CHECK_THROWS_AS(simulate_suite(config, dir), ConfigConflict);
  fs::remove_all(dir);
}
