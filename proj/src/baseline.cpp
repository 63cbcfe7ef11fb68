#include "cyclescope/baseline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "cyclescope/errors.hpp"
#include "cyclescope/trace_io.hpp"

namespace cyclescope {

using nlohmann::json;

const char* to_string(FeatureSet set) {
  switch (set) {
    case FeatureSet::Physical: return "physical";
    case FeatureSet::Extended: return "extended";
    case FeatureSet::Full: return "full";
  }
  return "?";
}

FeatureSet feature_set_from_string(const std::string& s) {
  if (s == "physical") return FeatureSet::Physical;
  if (s == "extended") return FeatureSet::Extended;
  if (s == "full") return FeatureSet::Full;
  throw ConfigError("unknown feature set '" + s + "'");
}

std::vector<std::string> feature_names_for(
    FeatureSet set, const std::vector<std::string>& extra_columns) {
  std::vector<std::string> names = {"batch", "w_kv"};
  if (set == FeatureSet::Physical) return names;
  names.insert(names.end(), {"input_len", "output_len", "stage"});
  if (set == FeatureSet::Extended) return names;
  names.insert(names.end(), extra_columns.begin(), extra_columns.end());
  return names;
}

SampleSet to_sample_set(std::span<const CycleRecord> records, FeatureSet set) {
  std::vector<std::string> extra;
  if (set == FeatureSet::Full) {
    std::set<std::string> keys;
    for (const auto& rec : records)
      for (const auto& [key, value] : rec.extra) keys.insert(key);
    extra.assign(keys.begin(), keys.end());
  }

  SampleSet samples;
  samples.feature_names = feature_names_for(set, extra);
  samples.x.cols = samples.feature_names.size();
  samples.x.values.reserve(records.size() * samples.x.cols);
  samples.y.reserve(records.size());

  std::vector<double> row;
  for (const auto& rec : records) {
    row.clear();
    row.push_back(static_cast<double>(rec.workload.batch));
    row.push_back(static_cast<double>(rec.workload.kv_token_slots()));
    if (set != FeatureSet::Physical) {
      row.push_back(static_cast<double>(rec.workload.input_len));
      row.push_back(static_cast<double>(rec.workload.output_len));
      row.push_back(rec.stage == Stage::Prefill ? 1.0 : 0.0);
    }
    if (set == FeatureSet::Full) {
      for (const auto& key : extra) {
        auto it = rec.extra.find(key);
        row.push_back(it == rec.extra.end() ? 0.0 : it->second);
      }
    }
    samples.x.push_row(row);
    samples.y.push_back(rec.latency_s);
  }
  return samples;
}

SampleSet SampleSet::select(const std::vector<std::string>& names) const {
  std::vector<std::size_t> indices;
  for (const auto& name : names) {
    auto it = std::find(feature_names.begin(), feature_names.end(), name);
    if (it == feature_names.end())
      throw FeatureMismatch("sample set lacks feature '" + name + "'");
    indices.push_back(static_cast<std::size_t>(it - feature_names.begin()));
  }
  SampleSet out;
  out.feature_names = names;
  out.y = y;
  out.x.cols = names.size();
  out.x.rows = x.rows;
  out.x.values.reserve(x.rows * names.size());
  for (std::size_t r = 0; r < x.rows; ++r)
    for (auto c : indices) out.x.values.push_back(x.at(r, c));
  return out;
}

SampleSet SampleSet::head(std::size_t n) const {
  n = std::min(n, size());
  SampleSet out;
  out.feature_names = feature_names;
  out.x.cols = x.cols;
  out.x.rows = n;
  out.x.values.assign(x.values.begin(),
                      x.values.begin() + static_cast<std::ptrdiff_t>(n * x.cols));
  out.y.assign(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

namespace {

double positive_error(double actual, double predicted, double epsilon) {
  return std::max(0.0, (actual - predicted) / (actual + epsilon));
}

// round-robin within quintile buckets of the stratification feature
void split_calibration(const SampleSet& samples, const FitOptions& options,
                       std::vector<std::uint32_t>& train,
                       std::vector<std::uint32_t>& calibration) {
  const std::size_t n = samples.size();
  std::size_t strat_col = 0;
  auto it = std::find(samples.feature_names.begin(), samples.feature_names.end(),
                      options.stratify_feature);
  if (it != samples.feature_names.end())
    strat_col = static_cast<std::size_t>(it - samples.feature_names.begin());

  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::uint32_t a, std::uint32_t b) {
                     return samples.x.at(a, strat_col) < samples.x.at(b, strat_col);
                   });

  const std::size_t stride =
      options.calibration_fraction > 0.0
          ? std::max<std::size_t>(
                2, static_cast<std::size_t>(std::llround(1.0 / options.calibration_fraction)))
          : n + 1;
  for (std::size_t pos = 0; pos < n; ++pos) {
    if (pos % stride == stride - 1)
      calibration.push_back(order[pos]);
    else
      train.push_back(order[pos]);
  }
  // keep chronological order within each side
  std::sort(train.begin(), train.end());
  std::sort(calibration.begin(), calibration.end());
}

SampleSet take_rows(const SampleSet& samples, std::span<const std::uint32_t> rows) {
  SampleSet out;
  out.feature_names = samples.feature_names;
  out.x.cols = samples.x.cols;
  out.x.rows = rows.size();
  out.x.values.reserve(rows.size() * samples.x.cols);
  out.y.reserve(rows.size());
  for (auto r : rows) {
    auto row = samples.x.row(r);
    out.x.values.insert(out.x.values.end(), row.begin(), row.end());
    out.y.push_back(samples.y[r]);
  }
  return out;
}

}  // namespace

LatencyModel fit_latency_model(const SampleSet& samples, const GbdtParams& params,
                               const FitOptions& options) {
  const std::size_t min_required =
      std::max(options.min_samples, 2 * params.min_samples_leaf);
  if (samples.size() < min_required)
    throw InsufficientData("need at least " + std::to_string(min_required) +
                           " samples, got " + std::to_string(samples.size()));
  for (double v : samples.y)
    if (!(v > 0.0) || !std::isfinite(v))
      throw InsufficientData("targets must be positive and finite");

  std::vector<std::uint32_t> train_rows, calib_rows;
  split_calibration(samples, options, train_rows, calib_rows);
  const SampleSet train = take_rows(samples, train_rows);
  const SampleSet calib = take_rows(samples, calib_rows);

  LatencyModel model;
  model.feature_names = samples.feature_names;
  model.gbdt = fit_gbdt(train.x, train.y, params);

  // residual statistics reflect generalization, so they come from the holdout
  std::vector<double> residuals;
  residuals.reserve(calib.size());
  for (std::size_t i = 0; i < calib.size(); ++i) {
    const double predicted = model.gbdt.predict(calib.x.row(i));
    residuals.push_back(positive_error(calib.y[i], predicted, options.ppe_epsilon));
  }
  model.calibration_size = residuals.size();
  if (!residuals.empty()) {
    double mean = 0.0;
    for (double r : residuals) mean += r;
    mean /= static_cast<double>(residuals.size());
    double var = 0.0;
    for (double r : residuals) var += (r - mean) * (r - mean);
    var = residuals.size() > 1 ? var / static_cast<double>(residuals.size() - 1)
                               : 0.0;
    model.mu_train = mean;
    model.sigma_train = std::sqrt(var);
  }
  return model;
}

ModelMetrics evaluate_model(const LatencyModel& model, const SampleSet& test) {
  if (test.size() == 0) throw EmptyTestSet("evaluation requires a nonempty test set");
  if (test.feature_names != model.feature_names)
    throw FeatureMismatch("test set schema differs from the model's");

  ModelMetrics metrics;
  metrics.relative_errors.reserve(test.size());
  double ss_res = 0.0, ss_tot = 0.0, mean_y = 0.0;
  for (double v : test.y) mean_y += v;
  mean_y /= static_cast<double>(test.size());

  double mape = 0.0;
  std::size_t within = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const double predicted = model.predict(test.x.row(i));
    const double err = test.y[i] - predicted;
    ss_res += err * err;
    ss_tot += (test.y[i] - mean_y) * (test.y[i] - mean_y);
    const double rel = std::abs(err) / std::abs(test.y[i]);
    metrics.relative_errors.push_back(rel);
    mape += rel;
    if (rel < 0.1) ++within;
  }
  metrics.mape_percent = 100.0 * mape / static_cast<double>(test.size());
  metrics.within_10_percent =
      static_cast<double>(within) / static_cast<double>(test.size());
  // constant test targets: R^2 degenerates, so score on relative error alone
  const double tot_floor =
      static_cast<double>(test.size()) * 1e-18 * mean_y * mean_y;
  metrics.r2 = ss_tot > tot_floor
                   ? 1.0 - ss_res / ss_tot
                   : (metrics.mape_percent < 1e-6 ? 1.0 : 0.0);
  return metrics;
}

void append_convergence_curve(ModelMetrics& metrics, const SampleSet& stream,
                              const SampleSet& held_out, const GbdtParams& params,
                              const FitOptions& options, std::size_t step) {
  if (step == 0) throw ConfigError("convergence step must be positive");
  const std::size_t min_required =
      std::max(options.min_samples, 2 * params.min_samples_leaf);
  for (std::size_t n = step; n <= stream.size(); n += step) {
    if (n < min_required) continue;
    const auto prefix = stream.head(n);
    const auto model = fit_latency_model(prefix, params, options);
    const auto m = evaluate_model(model, held_out);
    metrics.convergence_mape.emplace_back(n, m.mape_percent);
    metrics.convergence_within10.emplace_back(n, m.within_10_percent);
  }
}

json ModelMetrics::to_json() const {
  json j{{"r2", r2},
         {"mape_percent", mape_percent},
         {"within_10_percent", within_10_percent}};
  if (!convergence_mape.empty()) {
    json curve = json::array();
    for (std::size_t i = 0; i < convergence_mape.size(); ++i) {
      curve.push_back({{"samples", convergence_mape[i].first},
                       {"mape_percent", convergence_mape[i].second},
                       {"within_10_percent", convergence_within10[i].second}});
    }
    j["convergence"] = std::move(curve);
  }
  return j;
}

json LatencyModel::to_json() const {
  return json{{"format_version", kFormatVersion},
              {"kind", "latency_gbdt"},
              {"features", feature_names},
              {"residual_stats",
               {{"mu", mu_train},
                {"sigma", sigma_train},
                {"calibration_size", calibration_size}}},
              {"gbdt", gbdt.to_json()}};
}

LatencyModel LatencyModel::from_json(const json& j) {
  const int version = j.value("format_version", -1);
  if (version != kFormatVersion)
    throw ModelFormatError("unsupported model format version " +
                           std::to_string(version) + ", expected " +
                           std::to_string(kFormatVersion));
  LatencyModel model;
  model.feature_names = j.at("features").get<std::vector<std::string>>();
  const auto& stats = j.at("residual_stats");
  model.mu_train = stats.at("mu").get<double>();
  model.sigma_train = stats.at("sigma").get<double>();
  model.calibration_size = stats.at("calibration_size").get<std::size_t>();
  model.gbdt = GbdtModel::from_json(j.at("gbdt"));
  return model;
}

void LatencyModel::save(const std::filesystem::path& path) const {
  write_file(path, to_json().dump(2) + "\n");
}

LatencyModel LatencyModel::load(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& err) {
    throw ModelFormatError("cannot parse model file " + path.string() + ": " +
                           err.what());
  }
  return from_json(j);
}

namespace {

AblationRow gbdt_cell(const std::string& strategy, const SampleSet& train,
                      const SampleSet& test, const GbdtParams& params,
                      const FitOptions& options) {
  AblationRow row;
  row.strategy = strategy;
  row.model = "gbdt";
  const auto model = fit_latency_model(train, params, options);
  const auto metrics = evaluate_model(model, test);
  row.r2 = metrics.r2;
  row.mape_percent = metrics.mape_percent;

  std::vector<std::pair<std::string, double>> ranked;
  const auto& importance = model.gbdt.feature_importance();
  for (std::size_t i = 0; i < importance.size(); ++i)
    ranked.emplace_back(model.feature_names[i], importance[i]);
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  for (std::size_t i = 0; i < std::min<std::size_t>(2, ranked.size()); ++i)
    row.top_features.push_back(ranked[i].first);
  return row;
}

AblationRow poly_cell(const std::string& strategy, const SampleSet& train,
                      const SampleSet& test) {
  AblationRow row;
  row.strategy = strategy;
  row.model = "poly2";
  const auto model = fit_poly2(train.x, train.y, train.feature_names);

  double ss_res = 0.0, ss_tot = 0.0, mean_y = 0.0, mape = 0.0;
  for (double v : test.y) mean_y += v;
  mean_y /= static_cast<double>(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    const double predicted = model.predict(test.x.row(i));
    ss_res += (test.y[i] - predicted) * (test.y[i] - predicted);
    ss_tot += (test.y[i] - mean_y) * (test.y[i] - mean_y);
    mape += std::abs(test.y[i] - predicted) / std::abs(test.y[i]);
  }
  row.r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 0.0;
  row.mape_percent = 100.0 * mape / static_cast<double>(test.size());

  const auto ranked = model.ranked_terms();
  for (std::size_t i = 0; i < std::min<std::size_t>(2, ranked.size()); ++i)
    row.top_features.push_back(ranked[i].first);
  return row;
}

}  // namespace

std::vector<AblationRow> ablation_compare(const SampleSet& full_set,
                                          const GbdtParams& params,
                                          const FitOptions& options) {
  if (full_set.size() < 2 * std::max(options.min_samples, 2 * params.min_samples_leaf))
    throw InsufficientData("ablation requires a larger dataset");

  // deterministic 80/20 split on sample order
  const std::size_t n_train = full_set.size() * 4 / 5;
  std::vector<std::uint32_t> train_rows(n_train), test_rows;
  std::iota(train_rows.begin(), train_rows.end(), 0u);
  for (std::size_t i = n_train; i < full_set.size(); ++i)
    test_rows.push_back(static_cast<std::uint32_t>(i));

  const SampleSet train_full = take_rows(full_set, train_rows);
  const SampleSet test_full = take_rows(full_set, test_rows);
  const auto physical_names = feature_names_for(FeatureSet::Physical);
  const SampleSet train_phys = train_full.select(physical_names);
  const SampleSet test_phys = test_full.select(physical_names);

  std::vector<AblationRow> table;
  table.push_back(gbdt_cell("full", train_full, test_full, params, options));
  table.push_back(poly_cell("full", train_full, test_full));
  table.push_back(gbdt_cell("physical", train_phys, test_phys, params, options));
  table.push_back(poly_cell("physical", train_phys, test_phys));
  return table;
}

}  // namespace cyclescope
