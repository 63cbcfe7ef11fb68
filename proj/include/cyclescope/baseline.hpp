#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cyclescope/cycles.hpp"
#include "cyclescope/gbdt.hpp"
#include "cyclescope/polyfit.hpp"

namespace cyclescope {

enum class FeatureSet { Physical, Extended, Full };

const char* to_string(FeatureSet set);
FeatureSet feature_set_from_string(const std::string& s);

// Physical: [batch, w_kv] — the hardware-principled pair.
// Extended: adds input_len, output_len and a stage indicator.
// Full: extended plus every harvested extra column (post_* args); exists only
// for the ablation harness.
std::vector<std::string> feature_names_for(
    FeatureSet set, const std::vector<std::string>& extra_columns = {});

struct SampleSet {
  std::vector<std::string> feature_names;
  FeatureMatrix x;
  std::vector<double> y;  // latency seconds

  std::size_t size() const { return x.rows; }
  SampleSet select(const std::vector<std::string>& names) const;
  SampleSet head(std::size_t n) const;
};

// Builds the modeling table from cycle records; Full includes the union of
// extra columns observed anywhere in the stream (absent values read 0).
SampleSet to_sample_set(std::span<const CycleRecord> records, FeatureSet set);

struct FitOptions {
  double calibration_fraction = 0.2;  // stratified by w_kv quintile
  double ppe_epsilon = 1e-9;
  std::string stratify_feature = "w_kv";
  std::size_t min_samples = 20;  // lower bound also max(2*min_leaf, this)
};

// The persisted unit: GBDT + feature schema + calibration residual stats.
struct LatencyModel {
  static constexpr int kFormatVersion = 1;

  std::vector<std::string> feature_names;
  GbdtModel gbdt;
  double mu_train = 0.0;     // mean PPE on the calibration holdout
  double sigma_train = 0.0;  // stddev of same
  std::size_t calibration_size = 0;

  double predict(std::span<const double> features) const {
    return gbdt.predict(features);
  }

  nlohmann::json to_json() const;
  static LatencyModel from_json(const nlohmann::json& j);  // refuses version mismatch
  void save(const std::filesystem::path& path) const;
  static LatencyModel load(const std::filesystem::path& path);
};

// Deterministic fit: a 20% calibration slice (round-robin within w_kv
// quintiles) is held out, the GBDT trains on the rest, and the one-sided
// prediction-error distribution on the holdout becomes (mu, sigma) for the
// dynamic control limit. Throws InsufficientData / flags degenerate targets.
LatencyModel fit_latency_model(const SampleSet& samples, const GbdtParams& params,
                               const FitOptions& options = {});

struct ModelMetrics {
  double r2 = 0.0;
  double mape_percent = 0.0;
  double within_10_percent = 0.0;  // fraction of |rel err| < 0.1
  std::vector<double> relative_errors;
  // (samples seen, MAPE%) and (samples seen, within-10% fraction)
  std::vector<std::pair<std::size_t, double>> convergence_mape;
  std::vector<std::pair<std::size_t, double>> convergence_within10;

  nlohmann::json to_json() const;
};

ModelMetrics evaluate_model(const LatencyModel& model, const SampleSet& test);

// Retrains on growing prefixes of `stream` (every `step` samples) and scores
// each prefix model on the fixed held-out set.
void append_convergence_curve(ModelMetrics& metrics, const SampleSet& stream,
                              const SampleSet& held_out, const GbdtParams& params,
                              const FitOptions& options, std::size_t step);

struct AblationRow {
  std::string strategy;  // "physical" | "full"
  std::string model;     // "gbdt" | "poly2"
  double r2 = 0.0;
  double mape_percent = 0.0;
  std::vector<std::string> top_features;  // top-2 by importance / |coefficient|
};

// {physical, full} x {GBDT, degree-2 polynomial} on an 80/20 split of the
// dataset; reports fit quality and the dominant features of each cell.
std::vector<AblationRow> ablation_compare(const SampleSet& full_set,
                                          const GbdtParams& params,
                                          const FitOptions& options = {});

}  // namespace cyclescope
