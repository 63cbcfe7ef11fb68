#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cyclescope/baseline.hpp"
#include "cyclescope/cycles.hpp"
#include "cyclescope/detector.hpp"
#include "cyclescope/trace.hpp"

namespace cyclescope {

struct WorkloadProfile {
  enum class Distribution { LogUniform, Fixed };

  Distribution distribution = Distribution::LogUniform;
  std::int64_t batch_min = 1, batch_max = 512;
  std::int64_t input_min = 1, input_max = 2048;
  std::int64_t output_min = 1, output_max = 512;

  // Fixed distribution pins every request to these values
  std::int64_t fixed_batch = 4;
  std::int64_t fixed_input = 100;
  std::int64_t fixed_output = 32;

  void validate() const;  // throws InvalidProfile
};

struct CycleWorkload {
  std::size_t index = 0;
  Stage stage = Stage::Decode;
  std::int64_t batch = 0;
  std::int64_t input_len = 0;
  std::int64_t output_len = 0;
  std::uint64_t request_id = 0;
};

// Requests arrive back to back: one prefill cycle, then output-length decode
// cycles with L_out advancing monotonically.
std::vector<CycleWorkload> generate_workload(const WorkloadProfile& profile,
                                             std::size_t n_cycles,
                                             std::uint64_t seed);

// Analytic latency model the simulator grounds every trace in:
//   T_gpu = gpu_per_token_slot * B * K + gpu_per_batch * B + gpu_fixed
//   T_cpu = cpu_fixed + cpu_per_batch * B
//   exec  = overlap ? max(T_gpu, T_cpu) : T_gpu + T_cpu
// with multiplicative log-normal noise on the final cycle latency.
struct GroundTruthModel {
  double gpu_per_token_slot = 2e-8;  // seconds per token-slot (a)
  double gpu_per_batch = 1e-5;       // seconds per batch element (b)
  double gpu_fixed = 1e-3;           // seconds (c)
  double cpu_fixed = 2.2e-3;   // host-side floor the overlap hides under
  double cpu_per_batch = 0.0;
  bool overlap = true;
  double noise = 0.05;  // sigma of log-normal multiplier

  double prefill_per_token = 4e-8;
  double prefill_noise = 0.2;

  double t_gpu(std::int64_t batch, std::int64_t kv_slots) const;
  double t_cpu(std::int64_t batch) const;
  double exec_latency(std::int64_t batch, std::int64_t kv_slots) const;

  void validate() const;
};

enum class FaultFamily {
  CpuContention,
  CpuFreqDrop,
  GpuContention,
  GpuClockLock,
  MemoryThrash,
  NvlinkSaturation,
  PcieBottleneck,
  BusContention,
};

const char* to_string(FaultFamily family);
FaultFamily fault_family_from_string(const std::string& s);
double default_severity(FaultFamily family);

// trace-level observable signature of a fault family
struct FaultEffect {
  std::string target_class;   // event class the fault inflates
  std::string counter_metric; // counter that shifts in-window
  bool counter_drops = false; // e.g. clock/frequency counters fall
};

const FaultEffect& fault_effect(FaultFamily family);

struct FaultSpec {
  FaultFamily family = FaultFamily::CpuContention;
  std::size_t onset = 0;       // cycle index
  std::size_t duration = 0;    // cycles
  double severity = 2.0;       // component multiplier, > 1 slows down
  int target_rank = 0;         // collective faults: the straggler

  bool covers(std::size_t cycle) const {
    return cycle >= onset && cycle < onset + duration;
  }
};

struct SynthOptions {
  std::size_t n_ranks = 1;       // reduce spans per cycle; >1 enables straggling
  int gpus_per_node = 8;
  Nanos counter_period_ns = 0;   // 0 = one sample per metric per cycle
};

struct TrialLabels {
  std::vector<bool> anomalous;  // one per cycle
  std::vector<FaultSpec> faults;

  nlohmann::json to_json() const;
  static TrialLabels from_json(const nlohmann::json& j);
};

struct LabeledDataset {
  Trace trace;
  TrialLabels labels;
};

// Emits the full trace: anchor/phase spans, per-class kernel/oncpu/reduce/
// memcpy spans, correlated runtime-api launches, counters and collective
// topology args; fault windows perturb the target component, its counter and
// the cycle latency, and mark the labels.
LabeledDataset synthesize_trace(std::span<const CycleWorkload> workloads,
                                const GroundTruthModel& model,
                                std::span<const FaultSpec> faults,
                                const SynthOptions& options, std::uint64_t seed);

struct SuiteConfig {
  std::uint64_t seed = 42;
  std::size_t trials = 20;
  std::size_t cycles_per_trial = 3800;
  std::size_t train_cycles = 2400;  // clean prefix for the baseline fit

  WorkloadProfile profile;
  GroundTruthModel model;
  ControlConfig detector;
  GbdtParams gbdt;
  EscalationPolicy escalation;

  std::vector<FaultFamily> families = {
      FaultFamily::CpuContention,   FaultFamily::CpuFreqDrop,
      FaultFamily::GpuContention,   FaultFamily::GpuClockLock,
      FaultFamily::MemoryThrash,    FaultFamily::NvlinkSaturation,
      FaultFamily::PcieBottleneck,  FaultFamily::BusContention,
  };
  std::map<std::string, double> severity_overrides;  // family name -> severity
  std::size_t fault_onset = 3000;
  std::size_t fault_onset_jitter = 100;
  std::size_t fault_duration = 150;
  std::size_t nvlink_ranks = 4;
  double min_separability = 1.05;  // in/out latency ratio below this = no-op fault

  void validate() const;
  nlohmann::json to_json() const;
  static SuiteConfig from_json(const nlohmann::json& j);  // unknown keys rejected
  static SuiteConfig load(const std::filesystem::path& path);
  std::uint64_t config_hash() const;
};

struct TrialOutcome {
  std::size_t trial = 0;
  FaultFamily family = FaultFamily::CpuContention;
  FaultSpec fault;
  std::vector<StrategyMetrics> strategies;  // fixed_point, fixed_window, dynamic_window
  bool rca_ran = false;
  bool rca_top1 = false;
  std::string rca_top_class;
  double rca_top_p = 1.0;
  double rca_delta_beta = 0.0;
  double rca_delta_mu = 0.0;
  double rca_score = 0.0;
  std::string rca_metric;
  std::optional<bool> straggler_hit;  // multi-rank trials only
  std::vector<double> ebar_row;       // DynamicWindow smoothed error per monitored cycle
};

struct FamilySummary {
  std::size_t trials = 0;
  std::size_t top1_hits = 0;
  double worst_top1_p = 0.0;  // max Welch p among Top-1 hits
  std::size_t straggler_trials = 0;
  std::size_t straggler_hits = 0;
};

struct BenchmarkResult {
  std::vector<TrialOutcome> trials;
  std::vector<StrategyMetrics> aggregate;  // pooled over trials, per strategy
  std::map<std::string, FamilySummary> families;
  double wall_seconds = 0.0;

  nlohmann::json to_json() const;
  std::string heatmap_csv() const;  // trial x monitored-cycle -> ebar
};

// Writes run_dir/{manifest.json, trial_XXX/{trace.json, labels.json}};
// refuses a directory another run holds (advisory lock file).
void simulate_suite(const SuiteConfig& config, const std::filesystem::path& run_dir);

// Reads a run directory produced by simulate_suite, replays the full
// pipeline per trial and writes metrics.json + heatmap.csv into it.
BenchmarkResult evaluate_suite(const std::filesystem::path& run_dir);

// simulate + evaluate in one step.
BenchmarkResult run_benchmark(const SuiteConfig& config,
                              const std::filesystem::path& run_dir);

// Single-trial pipeline on an in-memory dataset (no disk); used by tests.
TrialOutcome evaluate_trial(const SuiteConfig& config, const LabeledDataset& dataset,
                            std::size_t trial_index, FaultFamily family);

std::uint64_t fnv1a_hash(std::string_view bytes);

}  // namespace cyclescope
