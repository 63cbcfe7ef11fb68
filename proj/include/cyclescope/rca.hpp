#pragma once

#include <map>
#include <optional>
#include <span>
#include <tuple>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cyclescope/align.hpp"
#include "cyclescope/cycles.hpp"
#include "cyclescope/trace.hpp"

namespace cyclescope {

// Time-weighted mean of the piecewise-linear interpolant over [t0, t1];
// clamps to the nearest sample outside the sampled range. Throws EmptySeries.
double interpolate_mean(const CounterSeries& series, Nanos t0, Nanos t1);

// event class -> counter metric; classes without an entry keep beta-only stats
struct MetricMap {
  std::map<std::string, std::string> class_to_metric;

  static MetricMap defaults();
};

struct ClassStat {
  double beta = 0.0;                // fraction of cycle time, summed occupancy
  std::optional<double> mu;         // duration-weighted counter mean
  std::string metric;               // counter the mu came from
  Nanos total_duration = 0;
};

struct CycleClassStats {
  std::size_t cycle_index = 0;
  Nanos cycle_duration = 0;
  std::map<std::string, ClassStat> classes;
  // per-rank occupancy of collective classes: (class, commHash, rank) -> beta
  std::map<std::tuple<std::string, std::string, int>, double> collective_rank_beta;
};

// Per event class within one cycle: beta sums span durations (clipped to the
// cycle) over the cycle duration without deduplicating parallel tracks; mu is
// the duration-weighted interpolated counter mean over the class's spans.
CycleClassStats cycle_stats(const Cycle& cycle, const Trace& trace,
                            const CounterTable& counters, const MetricMap& metrics);

struct StragglerAttribution {
  std::string comm_hash;
  int rank = -1;
  std::optional<DeviceLocation> location;  // empty = unmapped rank
  double rank_beta_shift = 0.0;
};

struct SuspicionEntry {
  std::string event_class;
  double beta_norm = 0.0;
  double beta_abn = 0.0;
  double delta_beta = 0.0;  // fraction form; reports also show percent points
  double z_beta = 0.0;
  double z_log_mu = 0.0;
  double score = 0.0;  // |delta_beta| * (|z_beta| + |z_log_mu|)
  std::string metric;
  double mu_norm = 0.0;
  double mu_abn = 0.0;
  double delta_mu = 0.0;
  double welch_p = 1.0;  // two-sided, on beta; diagnostic metadata
  std::optional<StragglerAttribution> attribution;

  nlohmann::json to_json() const;
};

// Ranks classes by suspicion score, descending, ties by class name. Requires
// >= 10 normal and >= 3 abnormal cycles (InsufficientCycles). sigma_norm is
// floored at max(sigma, 0.01*|mean|, 1e-12).
std::vector<SuspicionEntry> suspicion_rank(
    std::span<const CycleClassStats> normal_cycles,
    std::span<const CycleClassStats> abnormal_cycles);

// Adds (node, device) attribution to collective-class suspects: the rank
// whose occupancy deviates most from its communicator group's normal-window
// behavior. Ranks missing from the topology stay annotated as unmapped.
void attribute_straggler(std::vector<SuspicionEntry>& entries,
                         const TopologyMap& topology,
                         std::span<const CycleClassStats> normal_cycles,
                         std::span<const CycleClassStats> abnormal_cycles);

// Two-sided Welch t-test p-value for unequal-variance means.
double welch_p_value(double mean_a, double var_a, std::size_t n_a,
                     double mean_b, double var_b, std::size_t n_b);

std::string render_text_report(std::span<const SuspicionEntry> entries,
                               std::size_t top_n = 10);
nlohmann::json render_json_report(std::span<const SuspicionEntry> entries);

}  // namespace cyclescope
