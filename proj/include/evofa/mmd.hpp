#pragma once

// Multi-bandwidth RBF maximum mean discrepancy.

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <vector>

#include "evofa/error.hpp"
#include "evofa/ops.hpp"

namespace evofa {

/// Mixture of RBF kernels k(x, y) = sum_j w_j exp(-||x - y||^2 / (2 sigma_j^2)).
struct KernelSpec {
  std::vector<double> bandwidths;
  std::vector<double> weights;

  static KernelSpec single(double sigma) { return {{sigma}, {1.0}}; }

  /// {sigma/2, sigma, 2 sigma} with equal weights.
  static KernelSpec around(double sigma) { return {{sigma / 2, sigma, 2 * sigma}, {1.0 / 3, 1.0 / 3, 1.0 / 3}}; }

  void validate() const {
    if (bandwidths.empty()) throw ConfigError("kernel spec: at least one bandwidth required");
    if (weights.size() != bandwidths.size()) throw ConfigError("kernel spec: one weight per bandwidth");
    for (double s : bandwidths)
      if (!(s > 0)) throw ConfigError("kernel spec: bandwidths must be > 0");
    double total = 0.0;
    for (double w : weights) {
      if (w < 0) throw ConfigError("kernel spec: weights must be nonnegative");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("kernel spec: weights must sum to 1");
  }
};

inline Tensor kernel_matrix(const Tensor& x, const Tensor& y, const KernelSpec& spec) {
  spec.validate();
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(1)) {
    throw DimensionError("kernel_matrix: expected [m x e] and [k x e], got " + shape_str(x.shape()) + " and " +
                         shape_str(y.shape()));
  }
  Tensor d2 = sq_euclidean_pairwise(x, y);
  Tensor k;
  for (std::size_t j = 0; j < spec.bandwidths.size(); ++j) {
    const double s = spec.bandwidths[j];
    Tensor term = scale(exp(scale(d2, -1.0 / (2.0 * s * s))), spec.weights[j]);
    k = k.defined() ? add(k, term) : term;
  }
  return k;
}

/// Biased (V-statistic) MMD^2 = mean K(X,X) + mean K(Y,Y) - 2 mean K(X,Y),
/// clamped at zero against round-off.
inline Tensor mmd2(const Tensor& x, const Tensor& y, const KernelSpec& spec) {
  if (x.rank() != 2 || y.rank() != 2 || x.dim(0) == 0 || y.dim(0) == 0) {
    throw DimensionError("mmd2: both samples must be nonempty [m x e] matrices");
  }
  Tensor value = sub(add(mean(kernel_matrix(x, x, spec)), mean(kernel_matrix(y, y, spec))),
                     scale(mean(kernel_matrix(x, y, spec)), 2.0));
  return relu(value);
}

/// Median nonzero pairwise Euclidean distance over X and Y pooled.
/// Falls back to 1 (with a warning) when all points coincide.
inline double median_heuristic(const Tensor& x, const Tensor& y) {
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(1)) throw DimensionError("median_heuristic: shape mismatch");
  const std::size_t e = x.dim(1);
  std::vector<const double*> rows;
  for (std::size_t i = 0; i < x.dim(0); ++i) rows.push_back(x.data().data() + i * e);
  for (std::size_t i = 0; i < y.dim(0); ++i) rows.push_back(y.data().data() + i * e);
  if (rows.size() < 2) throw ArgumentError("median_heuristic: need at least two points");
  std::vector<double> dists;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < e; ++t) s += (rows[i][t] - rows[j][t]) * (rows[i][t] - rows[j][t]);
      if (s > 0.0) dists.push_back(std::sqrt(s));
    }
  if (dists.empty()) {
    std::cerr << "warning: median_heuristic on identical points, using bandwidth 1\n";
    return 1.0;
  }
  const std::size_t mid = dists.size() / 2;
  std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid), dists.end());
  const double upper = dists[mid];
  if (dists.size() % 2 == 1) return upper;
  const double lower = *std::max_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

}  // namespace evofa
