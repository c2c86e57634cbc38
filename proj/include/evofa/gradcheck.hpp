#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "evofa/error.hpp"
#include "evofa/tensor.hpp"

namespace evofa {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  std::size_t kink_refinements = 0;  // coordinates re-checked with a narrower stencil
  std::size_t one_sided = 0;         // coordinates settled by a kink-free one-sided quotient
};

struct GradCheckOptions {
  double eps = 1e-5;
  double floor = 1e-5;  // denominator floor for the relative error
  // A coordinate whose one-sided difference quotients disagree by at least
  // the observed mismatch has a non-differentiable point (a relu kink) inside
  // its stencil; it is re-checked with eps / 10, up to this many times. If the
  // kink is still inside the narrowest stencil, the coordinate is compared
  // with the one-sided quotient of the side that is stable under halving the
  // step, extrapolated to zero step.
  std::size_t max_refinements = 2;
  // Coordinates whose relative error is already below this are not re-checked.
  double settle_below = 1e-6;
};

/// Compares reverse-mode gradients of `f` with central differences, perturbing
/// each element of `params` in place. `f` must be pure with respect to the
/// parameter values. Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheckReport finite_diff_report(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                          const GradCheckOptions& opt) {
  if (!(opt.eps > 0.0)) throw ArgumentError("finite_diff_check: eps must be positive");
  for (auto& p : params) {
    if (!p.requires_grad()) throw ArgumentError("finite_diff_check: parameter does not require grad");
    p.zero_grad();
  }
  f().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    analytic.emplace_back(p.size(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.back().begin());
    p.zero_grad();
  }

  GradCheckReport report;
  NoGradGuard no_grad;
  const double base = f().item();
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      const double a = analytic[k][i];
      double eps = opt.eps, abs_err = 0.0, rel_err = 0.0;
      for (std::size_t attempt = 0;; ++attempt) {
        values[i] = original + eps;
        const double up = f().item();
        values[i] = original - eps;
        const double down = f().item();
        values[i] = original;
        const double numeric = (up - down) / (2.0 * eps);
        const double abs_now = std::abs(a - numeric);
        const double rel_now = abs_now / std::max({std::abs(a), std::abs(numeric), opt.floor});
        if (attempt == 0 || rel_now < rel_err) {
          abs_err = abs_now;
          rel_err = rel_now;
        }
        const double one_sided_gap = std::abs((up - base) - (base - down)) / eps;
        if (rel_now < opt.settle_below || one_sided_gap < abs_now) break;
        if (attempt == opt.max_refinements) {
          values[i] = original + eps / 2.0;
          const double up_half = f().item();
          values[i] = original - eps / 2.0;
          const double down_half = f().item();
          values[i] = original;
          const double right = (up - base) / eps, right_half = (up_half - base) / (eps / 2.0);
          const double left = (base - down) / eps, left_half = (base - down_half) / (eps / 2.0);
          const bool use_right = std::abs(right - right_half) < std::abs(left - left_half);
          const double extrapolated = use_right ? 2.0 * right_half - right : 2.0 * left_half - left;
          const double abs_side = std::abs(a - extrapolated);
          const double rel_side = abs_side / std::max({std::abs(a), std::abs(extrapolated), opt.floor});
          ++report.one_sided;
          if (rel_side < rel_err) {
            abs_err = abs_side;
            rel_err = rel_side;
          }
          break;
        }
        ++report.kink_refinements;
        eps /= 10.0;
      }
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      report.max_rel_error = std::max(report.max_rel_error, rel_err);
      ++report.checked;
    }
  }
  return report;
}

inline GradCheckReport finite_diff_report(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                          double eps = 1e-5) {
  GradCheckOptions opt;
  opt.eps = eps;
  return finite_diff_report(f, std::move(params), opt);
}

inline double finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                double eps = 1e-5) {
  return finite_diff_report(f, std::move(params), eps).max_rel_error;
}

}  // namespace evofa
