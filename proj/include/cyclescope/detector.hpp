#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cyclescope/cycles.hpp"

namespace cyclescope {

// One-sided relative residual; only slowdowns count. Always in [0, 1) for
// positive actuals and nonnegative predictions. Throws NonPositiveLatency.
double ppe(double actual_s, double predicted_s, double epsilon = 1e-9);

enum class Strategy { FixedPoint, FixedWindow, DynamicWindow };

const char* to_string(Strategy strategy);
Strategy strategy_from_string(const std::string& s);

struct ControlConfig {
  Strategy strategy = Strategy::DynamicWindow;
  std::size_t window = 10;        // W
  double fixed_threshold = 0.15;  // Fixed* strategies
  double sigma_k = 3.0;           // k
  double theta_max = 0.18;        // cap on the dynamic limit
  double min_ucl = 0.02;          // floor against zero-variance calibration
  std::size_t warmup = 100;       // samples before arming
  double epsilon = 1e-9;          // PPE epsilon
};

// min(mu + k*sigma, theta_max), floored at min_ucl; needs >= min_n residuals.
double compute_ucl(std::span<const double> calibration_residuals, double k,
                   double theta_max, double min_ucl, std::size_t min_n = 30);

// Same limit from precomputed calibration statistics (e.g. a persisted model).
double ucl_from_stats(double mu, double sigma, const ControlConfig& config);

struct ResidualSample {
  std::size_t cycle = 0;
  double actual_s = 0.0;
  double predicted_s = 0.0;
  double error = 0.0;  // PPE
  Nanos ts = 0;
  WorkloadFeatures workload;

  static ResidualSample make(std::size_t cycle, double actual_s,
                             double predicted_s, double epsilon = 1e-9);
};

struct Alert {
  std::size_t cycle = 0;
  Nanos ts = 0;
  double smoothed_error = 0.0;  // the statistic that crossed
  double limit = 0.0;
  Strategy strategy = Strategy::DynamicWindow;
  WorkloadFeatures workload;
  std::uint64_t episode_id = 0;

  nlohmann::json to_json() const;  // NDJSON alert-sink record
};

struct StepResult {
  double statistic = 0.0;  // E_t or the window mean, per strategy
  double limit = 0.0;
  bool armed = false;
  bool flagged = false;              // statistic > limit (per-cycle signal)
  std::optional<Alert> alert;        // only on episode-opening crossings
};

// Sequential control-chart monitor. State is O(W): a bounded residual window
// plus scalars, independent of stream length. Alerts within an episode are
// coalesced; the episode ends when the statistic falls back under the limit.
class Detector {
public:
  Detector(const ControlConfig& config, double dynamic_ucl);

  StepResult step(const ResidualSample& sample);

  double limit() const { return limit_; }
  std::size_t samples_seen() const { return samples_seen_; }
  bool in_episode() const { return in_episode_; }
  std::uint64_t episodes_opened() const { return next_episode_; }

private:
  ControlConfig config_;
  double limit_ = 0.0;
  std::deque<double> window_;
  std::size_t samples_seen_ = 0;
  bool in_episode_ = false;
  std::uint64_t next_episode_ = 0;
};

enum class Mode { Sentinel, DeepDive };

const char* to_string(Mode mode);

struct EscalationPolicy {
  std::size_t pre_roll = 5;
  std::size_t post_roll = 20;
};

struct RetentionWindow {
  std::size_t begin = 0;  // inclusive cycle
  std::size_t end = 0;    // inclusive cycle
};

// Emitted exactly once per Sentinel -> DeepDive edge: the signal that fine-
// grained collection should turn on for the retention window.
struct EscalationAction {
  RetentionWindow retain;
};

// Sentinel/deep-dive mode machine. A new alert during DeepDive extends the
// retention window of the same episode without re-emitting the action; the
// mode reverts to Sentinel after post_roll cycles with no alert.
class Escalator {
public:
  explicit Escalator(const EscalationPolicy& policy) : policy_(policy) {}

  std::optional<EscalationAction> on_alert(const Alert& alert);
  void on_cycle(std::size_t cycle);  // advances the timeout

  Mode mode() const { return mode_; }
  const std::vector<RetentionWindow>& retained() const { return retained_; }

private:
  EscalationPolicy policy_;
  Mode mode_ = Mode::Sentinel;
  std::size_t deadline_ = 0;
  std::vector<RetentionWindow> retained_;
};

struct StrategyMetrics {
  Strategy strategy = Strategy::DynamicWindow;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double fpr = 0.0;       // false positives over normal cycles
  double mean_lag = 0.0;  // cycles from injection to first flagged cycle
  std::size_t alerts = 0;
  std::size_t true_positives = 0, false_positives = 0;
  std::size_t false_negatives = 0, true_negatives = 0;

  nlohmann::json to_json() const;
};

struct LabeledStream {
  std::vector<double> residuals;  // one per monitored cycle, in order
  std::vector<bool> anomalous;    // ground-truth label per cycle
};

// Replays the stream through one strategy; per-cycle predictions are the
// flagged signal (not the coalesced alerts). Lag is measured per contiguous
// anomaly interval; an undetected interval contributes its full length.
StrategyMetrics evaluate_strategy(const LabeledStream& stream,
                                  const ControlConfig& config, double dynamic_ucl);

// All three strategies on one stream; the dynamic limit comes from the
// calibration residuals. Throws NoLabels on a missing/mismatched label vector.
std::vector<StrategyMetrics> evaluate_strategies(
    const LabeledStream& stream, const ControlConfig& base_config,
    std::span<const double> calibration_residuals);

}  // namespace cyclescope
