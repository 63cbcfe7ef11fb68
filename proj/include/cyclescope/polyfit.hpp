#pragma once

#include <span>
#include <string>
#include <vector>

#include "cyclescope/gbdt.hpp"

namespace cyclescope {

// Degree-2 polynomial least squares: intercept, linear terms, squares and
// all pairwise interactions over the raw features, solved by ordinary normal
// equations with a small ridge damping. This is the conventional naive
// baseline; on wide-dynamic-range features the normal-equation conditioning
// is part of what the comparison measures.
class PolyModel {
public:
  double predict(std::span<const double> x) const;

  const std::vector<std::string>& term_names() const { return term_names_; }
  const std::vector<double>& coefficients() const { return coefficients_; }

  // terms ranked by |coefficient|, intercept excluded
  std::vector<std::pair<std::string, double>> ranked_terms() const;

  friend PolyModel fit_poly2(const FeatureMatrix& x, std::span<const double> y,
                             const std::vector<std::string>& feature_names,
                             double ridge);

private:
  std::size_t n_features_ = 0;
  std::vector<std::string> term_names_;
  std::vector<double> coefficients_;
};

PolyModel fit_poly2(const FeatureMatrix& x, std::span<const double> y,
                    const std::vector<std::string>& feature_names,
                    double ridge = 1e-8);

}  // namespace cyclescope
