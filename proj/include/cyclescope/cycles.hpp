#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cyclescope/trace.hpp"

namespace cyclescope {

enum class Stage { Prefill, Decode, Unknown };

const char* to_string(Stage stage);

struct CycleConfig {
  // anchor discovery
  std::string anchor_hint;        // fixes the anchor when nonempty
  std::size_t min_anchor_calls = 10;

  // component accounting
  std::vector<std::string> phase_functions = {
      "run_batch", "process_batch_result", "get_next_batch_to_run"};

  // stage classification
  std::string forward_mode_key = "forward_mode";
  std::vector<std::string> prefill_keywords = {"forward_prefill"};
  std::vector<std::string> decode_keywords = {"process_batch_result_decode"};
  double prefill_duration_factor = 3.0;  // vs trailing decode duration median
  double prefill_gap_factor = 2.0;       // vs trailing idle-gap median
  std::size_t stage_window = 32;         // trailing decode cycles considered
  std::size_t stage_min_history = 8;     // heuristic disabled below this

  // workload extraction
  std::string batch_size_key = "batch_size";
  std::string input_len_key = "input_len";
  std::string output_len_key = "output_len";

  // frequency-domain fallback
  Nanos frequency_bin_ns = 1'000'000;  // 1 ms
};

struct AnchorCandidate {
  std::string name;
  std::size_t call_count = 0;
  double mean_duration_ns = 0.0;
  double duration_cv = 0.0;   // stddev / mean
  double periodicity = 0.0;   // 1 / (1 + CV of inter-start gaps)
  double score = 0.0;         // call_count / (1 + duration_cv)
};

// All candidates exceeding the minimum call count, best first. Ties break by
// lexicographic name so discovery is permutation-stable.
std::vector<AnchorCandidate> rank_anchor_candidates(const Trace& trace,
                                                    const CycleConfig& config);

// Best candidate, or NoAnchorFound.
AnchorCandidate discover_anchor(const Trace& trace, const CycleConfig& config);

struct Cycle {
  std::size_t index = 0;
  Nanos start_ts = 0;
  Nanos end_ts = 0;  // half-open [start_ts, end_ts)
  Stage stage = Stage::Unknown;
  std::optional<EventId> anchor_event_id;
  Nanos anchor_span_end = 0;  // end of the anchor occurrence's own span
  std::map<std::string, Nanos> component_durations;

  // contained events as an index range into the trace's canonical order
  std::size_t first_event = 0;
  std::size_t last_event = 0;  // exclusive

  Nanos duration() const { return end_ts - start_ts; }
  std::vector<EventId> contained_ids(const Trace& trace) const;
};

// Cycle i runs from anchor occurrence i's start to occurrence i+1's start;
// the trailing partial cycle is dropped. Component durations sum the spans of
// the configured phase functions, clipped to the cycle bounds.
std::vector<Cycle> segment(const Trace& trace, const std::string& anchor_name,
                           const CycleConfig& config);

// Stage decision priority: forward_mode args, then keyword match, then the
// temporal heuristic against trailing decode statistics; Unknown when no
// signal is available. Operates on the cycle sequence in order because the
// heuristic needs trailing windows.
void classify_stages(std::vector<Cycle>& cycles, const Trace& trace,
                     const CycleConfig& config);

struct WorkloadFeatures {
  std::int64_t batch = 0;       // B
  std::int64_t input_len = 0;   // prompt tokens
  std::int64_t output_len = 0;  // generated tokens so far
  Stage stage = Stage::Unknown;

  std::int64_t real_len() const { return input_len + output_len; }
  std::int64_t kv_token_slots() const { return batch * real_len(); }  // W_kv
};

// Reads B / L_in / L_out from the first contained event carrying the batch
// size key. Throws MissingWorkloadArgs.
WorkloadFeatures extract_workload(const Cycle& cycle, const Trace& trace,
                                  const CycleConfig& config);

// Lower-precision fallback when no suitable call-stack anchor exists:
// autocorrelation of GpuKernel start times binned at frequency_bin_ns picks
// the cycle period; resulting cycles carry stage Unknown.
std::vector<Cycle> segment_by_frequency(const Trace& trace,
                                        const CycleConfig& config);

// One monitored cycle ready for modeling.
struct CycleRecord {
  std::size_t cycle_index = 0;
  Nanos start_ts = 0;
  Stage stage = Stage::Unknown;
  WorkloadFeatures workload;
  double latency_s = 0.0;                // monitored target
  std::map<std::string, double> extra;   // numeric args harvested for the ablation set
};

struct PipelineOptions {
  // target = this component's summed duration; empty string = full cycle span
  std::string latency_component = "run_batch";
  bool include_prefill = false;
  std::string extra_args_prefix = "post_";
};

// Anchor discovery (frequency fallback when none) + segmentation + stage
// classification in one call.
std::vector<Cycle> segment_and_classify(const Trace& trace,
                                        const CycleConfig& config);

// trace -> cycles -> records; the standard path shared by the CLI, the
// benchmark harness and the tests. Cycles without workload args are skipped.
std::vector<CycleRecord> build_cycle_records(const Trace& trace,
                                             const CycleConfig& config,
                                             const PipelineOptions& options);
std::vector<CycleRecord> build_cycle_records(const Trace& trace,
                                             std::span<const Cycle> cycles,
                                             const CycleConfig& config,
                                             const PipelineOptions& options);

}  // namespace cyclescope
