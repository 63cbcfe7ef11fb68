#include "cyclescope/detector.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "cyclescope/errors.hpp"

namespace cyclescope {

using nlohmann::json;

double ppe(double actual_s, double predicted_s, double epsilon) {
  if (!(actual_s > 0.0))
    throw NonPositiveLatency("actual latency must be positive, got " +
                             std::to_string(actual_s));
  return std::max(0.0, (actual_s - predicted_s) / (actual_s + epsilon));
}

const char* to_string(Strategy strategy) {
  switch (strategy) {
    case Strategy::FixedPoint: return "fixed_point";
    case Strategy::FixedWindow: return "fixed_window";
    case Strategy::DynamicWindow: return "dynamic_window";
  }
  return "?";
}

Strategy strategy_from_string(const std::string& s) {
  if (s == "fixed_point") return Strategy::FixedPoint;
  if (s == "fixed_window") return Strategy::FixedWindow;
  if (s == "dynamic_window") return Strategy::DynamicWindow;
  throw ConfigError("unknown detector strategy '" + s + "'");
}

const char* to_string(Mode mode) {
  return mode == Mode::Sentinel ? "sentinel" : "deep_dive";
}

double compute_ucl(std::span<const double> calibration_residuals, double k,
                   double theta_max, double min_ucl, std::size_t min_n) {
  if (calibration_residuals.size() < min_n)
    throw InsufficientCalibration(
        "need at least " + std::to_string(min_n) + " calibration residuals, got " +
        std::to_string(calibration_residuals.size()));
  double mean = 0.0;
  for (double r : calibration_residuals) mean += r;
  mean /= static_cast<double>(calibration_residuals.size());
  double var = 0.0;
  for (double r : calibration_residuals) var += (r - mean) * (r - mean);
  var /= static_cast<double>(calibration_residuals.size() - 1);
  const double ucl = std::min(mean + k * std::sqrt(var), theta_max);
  return std::max(ucl, min_ucl);
}

double ucl_from_stats(double mu, double sigma, const ControlConfig& config) {
  const double ucl = std::min(mu + config.sigma_k * sigma, config.theta_max);
  return std::max(ucl, config.min_ucl);
}

ResidualSample ResidualSample::make(std::size_t cycle, double actual_s,
                                    double predicted_s, double epsilon) {
  ResidualSample s;
  s.cycle = cycle;
  s.actual_s = actual_s;
  s.predicted_s = predicted_s;
  s.error = ppe(actual_s, predicted_s, epsilon);
  return s;
}

json Alert::to_json() const {
  return json{{"cycle", cycle},
              {"ts", ts},
              {"ebar", smoothed_error},
              {"ucl", limit},
              {"strategy", to_string(strategy)},
              {"workload",
               {{"batch", workload.batch},
                {"input_len", workload.input_len},
                {"output_len", workload.output_len}}},
              {"episode_id", episode_id}};
}

Detector::Detector(const ControlConfig& config, double dynamic_ucl)
    : config_(config) {
  limit_ = config.strategy == Strategy::DynamicWindow ? dynamic_ucl
                                                      : config.fixed_threshold;
}

StepResult Detector::step(const ResidualSample& sample) {
  StepResult result;
  result.limit = limit_;

  double statistic = sample.error;
  if (config_.strategy != Strategy::FixedPoint) {
    window_.push_back(sample.error);
    if (window_.size() > config_.window) window_.pop_front();
    // summed oldest-to-newest so an independent replay over the raw stream
    // reproduces the same floating-point value bit for bit
    double sum = 0.0;
    for (double e : window_) sum += e;
    statistic = sum / static_cast<double>(window_.size());
  }
  result.statistic = statistic;

  result.armed = samples_seen_ >= config_.warmup;
  ++samples_seen_;
  if (!result.armed) {
    in_episode_ = false;
    return result;
  }

  result.flagged = statistic > limit_;
  if (result.flagged && !in_episode_) {
    in_episode_ = true;
    Alert alert;
    alert.cycle = sample.cycle;
    alert.ts = sample.ts;
    alert.smoothed_error = statistic;
    alert.limit = limit_;
    alert.strategy = config_.strategy;
    alert.workload = sample.workload;
    alert.episode_id = next_episode_++;
    result.alert = alert;
  } else if (!result.flagged) {
    in_episode_ = false;
  }
  return result;
}

std::optional<EscalationAction> Escalator::on_alert(const Alert& alert) {
  deadline_ = alert.cycle + policy_.post_roll;
  if (mode_ == Mode::DeepDive) {
    // same episode: extend retention, no new collection action
    if (!retained_.empty())
      retained_.back().end = alert.cycle + policy_.post_roll;
    return std::nullopt;
  }
  mode_ = Mode::DeepDive;
  RetentionWindow window;
  window.begin = alert.cycle >= policy_.pre_roll ? alert.cycle - policy_.pre_roll : 0;
  window.end = alert.cycle + policy_.post_roll;
  retained_.push_back(window);
  return EscalationAction{window};
}

void Escalator::on_cycle(std::size_t cycle) {
  if (mode_ == Mode::DeepDive && cycle > deadline_) mode_ = Mode::Sentinel;
}

json StrategyMetrics::to_json() const {
  return json{{"strategy", to_string(strategy)},
              {"precision", precision},
              {"recall", recall},
              {"f1", f1},
              {"fpr", fpr},
              {"mean_lag", mean_lag},
              {"alerts", alerts},
              {"tp", true_positives},
              {"fp", false_positives},
              {"fn", false_negatives},
              {"tn", true_negatives}};
}

StrategyMetrics evaluate_strategy(const LabeledStream& stream,
                                  const ControlConfig& config,
                                  double dynamic_ucl) {
  if (stream.anomalous.size() != stream.residuals.size() ||
      stream.residuals.empty())
    throw NoLabels("labeled stream is empty or label count mismatches");

  StrategyMetrics metrics;
  metrics.strategy = config.strategy;

  Detector detector(config, dynamic_ucl);
  std::vector<bool> flagged(stream.residuals.size(), false);
  for (std::size_t t = 0; t < stream.residuals.size(); ++t) {
    ResidualSample sample;
    sample.cycle = t;
    sample.error = stream.residuals[t];
    const auto result = detector.step(sample);
    if (!result.armed) continue;
    flagged[t] = result.flagged;
    if (result.alert) ++metrics.alerts;
    const bool anomalous = stream.anomalous[t];
    if (result.flagged && anomalous) ++metrics.true_positives;
    else if (result.flagged) ++metrics.false_positives;
    else if (anomalous) ++metrics.false_negatives;
    else ++metrics.true_negatives;
  }

  const auto tp = static_cast<double>(metrics.true_positives);
  const auto fp = static_cast<double>(metrics.false_positives);
  const auto fn = static_cast<double>(metrics.false_negatives);
  const auto tn = static_cast<double>(metrics.true_negatives);
  metrics.precision = tp + fp > 0.0 ? tp / (tp + fp) : 0.0;
  metrics.recall = tp + fn > 0.0 ? tp / (tp + fn) : 0.0;
  metrics.f1 = metrics.precision + metrics.recall > 0.0
                   ? 2.0 * metrics.precision * metrics.recall /
                         (metrics.precision + metrics.recall)
                   : 0.0;
  metrics.fpr = fp + tn > 0.0 ? fp / (fp + tn) : 0.0;

  // per anomaly interval: cycles until the first flag, capped at the length
  double lag_sum = 0.0;
  std::size_t intervals = 0;
  std::size_t t = config.warmup;
  const std::size_t n = stream.residuals.size();
  while (t < n) {
    if (!stream.anomalous[t]) { ++t; continue; }
    std::size_t end = t;
    while (end < n && stream.anomalous[end]) ++end;
    std::size_t first_flag = end;
    for (std::size_t u = t; u < end; ++u) {
      if (flagged[u]) { first_flag = u; break; }
    }
    lag_sum += static_cast<double>(first_flag - t);
    ++intervals;
    t = end;
  }
  metrics.mean_lag = intervals > 0 ? lag_sum / static_cast<double>(intervals) : 0.0;
  return metrics;
}

std::vector<StrategyMetrics> evaluate_strategies(
    const LabeledStream& stream, const ControlConfig& base_config,
    std::span<const double> calibration_residuals) {
  const double ucl =
      compute_ucl(calibration_residuals, base_config.sigma_k,
                  base_config.theta_max, base_config.min_ucl);
  std::vector<StrategyMetrics> table;
  for (auto strategy : {Strategy::FixedPoint, Strategy::FixedWindow,
                        Strategy::DynamicWindow}) {
    ControlConfig config = base_config;
    config.strategy = strategy;
    table.push_back(evaluate_strategy(stream, config, ucl));
  }
  return table;
}

}  // namespace cyclescope
