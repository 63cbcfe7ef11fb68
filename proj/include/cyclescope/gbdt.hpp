#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace cyclescope {

// Dense row-major feature matrix.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  std::span<const double> row(std::size_t r) const {
    return {values.data() + r * cols, cols};
  }
  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  void push_row(std::span<const double> v);
};

struct GbdtParams {
  std::size_t n_trees = 200;
  std::size_t max_depth = 5;
  double learning_rate = 0.1;
  std::size_t min_samples_leaf = 5;
  double prediction_floor = 1e-6;  // seconds; latency never predicted below this
};

struct TreeNode {
  int feature = -1;         // -1 marks a leaf
  double threshold = 0.0;   // goes left when x[feature] <= threshold
  int left = -1;
  int right = -1;
  double value = 0.0;       // leaf output

  bool is_leaf() const { return feature < 0; }
};

struct RegressionTree {
  std::vector<TreeNode> nodes;

  double predict(std::span<const double> x) const;
};

// Least-squares gradient boosting over axis-aligned regression trees.
// Training is deterministic: no subsampling, exact greedy splits, ties broken
// by lowest feature index then lowest threshold. Identical data therefore
// yields bit-identical models.
class GbdtModel {
public:
  double predict(std::span<const double> x) const;
  double predict_unclamped(std::span<const double> x) const;

  std::size_t n_features() const { return n_features_; }
  double base_prediction() const { return base_; }
  bool degenerate() const { return degenerate_; }
  const GbdtParams& params() const { return params_; }
  const std::vector<RegressionTree>& trees() const { return trees_; }

  // total split gain per feature; sums to total ensemble gain
  const std::vector<double>& feature_importance() const { return importance_; }

  // training MSE after each boosting round (non-increasing)
  const std::vector<double>& train_mse_curve() const { return mse_curve_; }

  nlohmann::json to_json() const;
  static GbdtModel from_json(const nlohmann::json& j);

  friend GbdtModel fit_gbdt(const FeatureMatrix& x, std::span<const double> y,
                            const GbdtParams& params);

private:
  GbdtParams params_;
  std::size_t n_features_ = 0;
  double base_ = 0.0;
  bool degenerate_ = false;
  std::vector<RegressionTree> trees_;
  std::vector<double> importance_;
  std::vector<double> mse_curve_;
};

// Fits y from x; zero-variance targets yield a flagged constant model.
GbdtModel fit_gbdt(const FeatureMatrix& x, std::span<const double> y,
                   const GbdtParams& params);

}  // namespace cyclescope
