#include "cyclescope/gbdt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "cyclescope/errors.hpp"

namespace cyclescope {

using nlohmann::json;

void FeatureMatrix::push_row(std::span<const double> v) {
  if (cols == 0) cols = v.size();
  values.insert(values.end(), v.begin(), v.end());
  ++rows;
}

double RegressionTree::predict(std::span<const double> x) const {
  int node = 0;
  while (!nodes[node].is_leaf()) {
    const auto& n = nodes[node];
    node = x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left
                                                                 : n.right;
  }
  return nodes[node].value;
}

namespace {

struct SplitChoice {
  double gain = 0.0;
  int feature = -1;
  double threshold = 0.0;
};

struct TreeBuilder {
  const FeatureMatrix& x;
  const std::vector<double>& residuals;
  const GbdtParams& params;
  std::vector<double>& importance;
  RegressionTree tree;

  // scratch reused across nodes
  std::vector<std::pair<double, double>> sorted;  // (feature value, residual)

  int build(std::vector<std::uint32_t>& index, std::size_t depth) {
    double sum = 0.0;
    for (auto i : index) sum += residuals[i];
    const double n = static_cast<double>(index.size());
    const double node_mean = sum / n;

    const int node_id = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back({});
    if (depth >= params.max_depth || index.size() < 2 * params.min_samples_leaf) {
      tree.nodes[node_id].value = node_mean;
      return node_id;
    }

    // exact greedy split; gain = parent SSE - children SSE, from prefix sums
    SplitChoice best;
    for (std::size_t f = 0; f < x.cols; ++f) {
      sorted.clear();
      sorted.reserve(index.size());
      for (auto i : index) sorted.emplace_back(x.at(i, f), residuals[i]);
      std::sort(sorted.begin(), sorted.end(),
                [](const auto& a, const auto& b) { return a.first < b.first; });

      double left_sum = 0.0;
      for (std::size_t k = 0; k + 1 < sorted.size(); ++k) {
        left_sum += sorted[k].second;
        if (sorted[k].first == sorted[k + 1].first) continue;
        const std::size_t left_n = k + 1;
        const std::size_t right_n = sorted.size() - left_n;
        if (left_n < params.min_samples_leaf || right_n < params.min_samples_leaf)
          continue;
        const double right_sum = sum - left_sum;
        const double children_sse_drop =
            left_sum * left_sum / static_cast<double>(left_n) +
            right_sum * right_sum / static_cast<double>(right_n) - sum * sum / n;
        // strictly-greater keeps the first (lowest feature, lowest threshold)
        if (children_sse_drop > best.gain + 1e-12) {
          best.gain = children_sse_drop;
          best.feature = static_cast<int>(f);
          best.threshold = 0.5 * (sorted[k].first + sorted[k + 1].first);
        }
      }
    }

    if (best.feature < 0 || best.gain <= 1e-12) {
      tree.nodes[node_id].value = node_mean;
      return node_id;
    }

    std::vector<std::uint32_t> left_index, right_index;
    left_index.reserve(index.size());
    right_index.reserve(index.size());
    for (auto i : index) {
      if (x.at(i, static_cast<std::size_t>(best.feature)) <= best.threshold)
        left_index.push_back(i);
      else
        right_index.push_back(i);
    }
    index.clear();
    index.shrink_to_fit();

    importance[static_cast<std::size_t>(best.feature)] += best.gain;
    tree.nodes[node_id].feature = best.feature;
    tree.nodes[node_id].threshold = best.threshold;
    const int left = build(left_index, depth + 1);
    const int right = build(right_index, depth + 1);
    tree.nodes[node_id].left = left;
    tree.nodes[node_id].right = right;
    return node_id;
  }
};

}  // namespace

GbdtModel fit_gbdt(const FeatureMatrix& x, std::span<const double> y,
                   const GbdtParams& params) {
  if (x.rows != y.size() || x.rows == 0)
    throw InsufficientData("feature matrix and target size mismatch or empty");

  GbdtModel model;
  model.params_ = params;
  model.n_features_ = x.cols;
  model.importance_.assign(x.cols, 0.0);

  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= static_cast<double>(y.size());
  model.base_ = mean;

  const auto [lo, hi] = std::minmax_element(y.begin(), y.end());
  if (*lo == *hi) {
    model.base_ = *lo;
    model.degenerate_ = true;  // constant predictor
    return model;
  }

  std::vector<double> prediction(y.size(), mean);
  std::vector<double> residuals(y.size());
  model.trees_.reserve(params.n_trees);
  model.mse_curve_.reserve(params.n_trees);

  for (std::size_t round = 0; round < params.n_trees; ++round) {
    for (std::size_t i = 0; i < y.size(); ++i)
      residuals[i] = y[i] - prediction[i];

    TreeBuilder builder{x, residuals, params, model.importance_, {}, {}};
    std::vector<std::uint32_t> index(y.size());
    std::iota(index.begin(), index.end(), 0u);
    builder.build(index, 0);

    for (std::size_t i = 0; i < y.size(); ++i)
      prediction[i] += params.learning_rate * builder.tree.predict(x.row(i));

    double mse = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double e = y[i] - prediction[i];
      mse += e * e;
    }
    model.mse_curve_.push_back(mse / static_cast<double>(y.size()));
    model.trees_.push_back(std::move(builder.tree));
  }
  return model;
}

double GbdtModel::predict_unclamped(std::span<const double> x) const {
  if (x.size() != n_features_)
    throw FeatureMismatch("model expects " + std::to_string(n_features_) +
                          " features, got " + std::to_string(x.size()));
  double value = base_;
  for (const auto& tree : trees_) value += params_.learning_rate * tree.predict(x);
  return value;
}

double GbdtModel::predict(std::span<const double> x) const {
  return std::max(params_.prediction_floor, predict_unclamped(x));
}

json GbdtModel::to_json() const {
  json trees = json::array();
  for (const auto& tree : trees_) {
    json nodes = json::array();
    for (const auto& n : tree.nodes) {
      nodes.push_back({{"f", n.feature},
                       {"t", n.threshold},
                       {"l", n.left},
                       {"r", n.right},
                       {"v", n.value}});
    }
    trees.push_back(std::move(nodes));
  }
  return json{{"params",
               {{"n_trees", params_.n_trees},
                {"max_depth", params_.max_depth},
                {"learning_rate", params_.learning_rate},
                {"min_samples_leaf", params_.min_samples_leaf},
                {"prediction_floor", params_.prediction_floor}}},
              {"n_features", n_features_},
              {"base", base_},
              {"degenerate", degenerate_},
              {"importance", importance_},
              {"trees", std::move(trees)}};
}

GbdtModel GbdtModel::from_json(const json& j) {
  GbdtModel model;
  const auto& p = j.at("params");
  model.params_.n_trees = p.at("n_trees").get<std::size_t>();
  model.params_.max_depth = p.at("max_depth").get<std::size_t>();
  model.params_.learning_rate = p.at("learning_rate").get<double>();
  model.params_.min_samples_leaf = p.at("min_samples_leaf").get<std::size_t>();
  model.params_.prediction_floor = p.at("prediction_floor").get<double>();
  model.n_features_ = j.at("n_features").get<std::size_t>();
  model.base_ = j.at("base").get<double>();
  model.degenerate_ = j.at("degenerate").get<bool>();
  model.importance_ = j.at("importance").get<std::vector<double>>();
  for (const auto& tree_json : j.at("trees")) {
    RegressionTree tree;
    for (const auto& n : tree_json) {
      tree.nodes.push_back({n.at("f").get<int>(), n.at("t").get<double>(),
                            n.at("l").get<int>(), n.at("r").get<int>(),
                            n.at("v").get<double>()});
    }
    model.trees_.push_back(std::move(tree));
  }
  return model;
}

}  // namespace cyclescope
