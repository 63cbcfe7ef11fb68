#include "cyclescope/polyfit.hpp"

#include <algorithm>
#include <cmath>

#include "cyclescope/errors.hpp"

namespace cyclescope {

namespace {

// basis: [1, x_0..x_{d-1}, x_i*x_j for i<=j] over the raw features
std::size_t term_count(std::size_t d) { return 1 + d + d * (d + 1) / 2; }

void expand(std::span<const double> x, std::vector<double>& out) {
  out.clear();
  out.push_back(1.0);
  for (double v : x) out.push_back(v);
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = i; j < x.size(); ++j) out.push_back(x[i] * x[j]);
}

// dense solve, Gaussian elimination with partial pivoting
std::vector<double> solve(std::vector<std::vector<double>> a,
                          std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
    std::swap(a[col], a[pivot]);
    std::swap(b[col], b[pivot]);
    const double diag = a[col][col];
    if (diag == 0.0) continue;  // ridge keeps this from mattering
    for (std::size_t r = col + 1; r < n; ++r) {
      const double factor = a[r][col] / diag;
      if (factor == 0.0) continue;
      for (std::size_t c = col; c < n; ++c) a[r][c] -= factor * a[col][c];
      b[r] -= factor * b[col];
    }
  }
  std::vector<double> x(n, 0.0);
  for (std::size_t ri = n; ri-- > 0;) {
    double acc = b[ri];
    for (std::size_t c = ri + 1; c < n; ++c) acc -= a[ri][c] * x[c];
    x[ri] = a[ri][ri] != 0.0 ? acc / a[ri][ri] : 0.0;
  }
  return x;
}

}  // namespace

PolyModel fit_poly2(const FeatureMatrix& x, std::span<const double> y,
                    const std::vector<std::string>& feature_names,
                    double ridge) {
  if (x.rows != y.size() || x.rows == 0)
    throw InsufficientData("feature matrix and target size mismatch or empty");
  if (feature_names.size() != x.cols)
    throw FeatureMismatch("feature name count does not match matrix width");

  PolyModel model;
  model.n_features_ = x.cols;

  model.term_names_.push_back("1");
  for (const auto& name : feature_names) model.term_names_.push_back(name);
  for (std::size_t i = 0; i < x.cols; ++i)
    for (std::size_t j = i; j < x.cols; ++j)
      model.term_names_.push_back(i == j ? feature_names[i] + "^2"
                                         : feature_names[i] + "*" +
                                               feature_names[j]);

  const std::size_t m = term_count(x.cols);
  std::vector<std::vector<double>> ata(m, std::vector<double>(m, 0.0));
  std::vector<double> aty(m, 0.0);
  std::vector<double> basis;
  for (std::size_t r = 0; r < x.rows; ++r) {
    expand(x.row(r), basis);
    for (std::size_t i = 0; i < m; ++i) {
      aty[i] += basis[i] * y[r];
      for (std::size_t j = i; j < m; ++j) ata[i][j] += basis[i] * basis[j];
    }
  }
  for (std::size_t i = 0; i < m; ++i) {
    ata[i][i] += ridge;
    for (std::size_t j = 0; j < i; ++j) ata[i][j] = ata[j][i];
  }

  model.coefficients_ = solve(std::move(ata), std::move(aty));
  return model;
}

double PolyModel::predict(std::span<const double> x) const {
  if (x.size() != n_features_)
    throw FeatureMismatch("poly model expects " + std::to_string(n_features_) +
                          " features, got " + std::to_string(x.size()));
  std::vector<double> basis;
  expand(x, basis);
  double acc = 0.0;
  for (std::size_t i = 0; i < basis.size(); ++i)
    acc += coefficients_[i] * basis[i];
  return acc;
}

std::vector<std::pair<std::string, double>> PolyModel::ranked_terms() const {
  std::vector<std::pair<std::string, double>> terms;
  for (std::size_t i = 1; i < coefficients_.size(); ++i)
    terms.emplace_back(term_names_[i], coefficients_[i]);
  std::sort(terms.begin(), terms.end(), [](const auto& a, const auto& b) {
    if (std::abs(a.second) != std::abs(b.second))
      return std::abs(a.second) > std::abs(b.second);
    return a.first < b.first;
  });
  return terms;
}

}  // namespace cyclescope
