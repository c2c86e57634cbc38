#pragma once

// Differentiable tensor operations. Each op computes its forward value eagerly
// and, when recording, registers a closure that pushes the output gradient
// back into its parents.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "evofa/error.hpp"
#include "evofa/tensor.hpp"

namespace evofa {

using detail::make_result;
using detail::parent_grad;
using detail::TensorNode;

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline const std::vector<double>& pdata(TensorNode& node, std::size_t i) {
  return node.parents[i]->data;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// Matrix product of a [m x k] and b [k x p].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * p, 0.0);
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t t = 0; t < k; ++t) {
      const double av = A[i * k + t];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < p; ++j) out[i * p + j] += av * B[t * p + j];
    }
  return make_result({m, p}, std::move(out), {a, b}, [m, k, p](TensorNode& n) {
    const auto& A = detail::pdata(n, 0);
    const auto& B = detail::pdata(n, 1);
    const auto& G = n.grad;
    if (double* ga = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t t = 0; t < k; ++t) {
          double acc = 0.0;
          for (std::size_t j = 0; j < p; ++j) acc += G[i * p + j] * B[t * p + j];
          ga[i * k + t] += acc;
        }
    }
    if (double* gb = parent_grad(n, 1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t t = 0; t < k; ++t) {
          const double av = A[i * k + t];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < p; ++j) gb[t * p + j] += av * G[i * p + j];
        }
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), p = a.dim(1);
  std::vector<double> out(m * p);
  const auto A = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < p; ++j) out[j * m + i] = A[i * p + j];
  return make_result({p, m}, std::move(out), {a}, [m, p](TensorNode& n) {
    double* ga = parent_grad(n, 0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p; ++j) ga[i * p + j] += n.grad[j * m + i];
  });
}

/// Same data viewed under a new shape (copy).
inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {a}, [](TensorNode& n) {
    double* ga = parent_grad(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorNode& n) {
    for (std::size_t p = 0; p < 2; ++p)
      if (double* g = parent_grad(n, p))
        for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorNode& n) {
    if (double* g = parent_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    if (double* g = parent_grad(n, 1))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] -= n.grad[i];
  });
}

/// Hadamard product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorNode& n) {
    const auto& A = detail::pdata(n, 0);
    const auto& B = detail::pdata(n, 1);
    if (double* g = parent_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * B[i];
    if (double* g = parent_grad(n, 1))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * A[i];
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return make_result(a.shape(), std::move(out), {a}, [s](TensorNode& n) {
    double* g = parent_grad(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * s;
  });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + s;
  return make_result(a.shape(), std::move(out), {a}, [](TensorNode& n) {
    double* g = parent_grad(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
  });
}

/// a [m x p] + v [p] broadcast over rows.
inline Tensor add_row_vector(const Tensor& a, const Tensor& v) {
  detail::require_rank(a, 2, "add_row_vector");
  detail::require_rank(v, 1, "add_row_vector");
  const std::size_t m = a.dim(0), p = a.dim(1);
  if (v.dim(0) != p) throw DimensionError("add_row_vector: bias length mismatch");
  std::vector<double> out(m * p);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < p; ++j) out[i * p + j] = a[i * p + j] + v[j];
  return make_result({m, p}, std::move(out), {a, v}, [m, p](TensorNode& n) {
    if (double* g = parent_grad(n, 0))
      for (std::size_t i = 0; i < m * p; ++i) g[i] += n.grad[i];
    if (double* g = parent_grad(n, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < p; ++j) g[j] += n.grad[i * p + j];
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  return make_result(a.shape(), std::move(out), {a}, [](TensorNode& n) {
    const auto& A = detail::pdata(n, 0);
    double* g = parent_grad(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      if (A[i] > 0.0) g[i] += n.grad[i];
  });
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a[i];
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return make_result(a.shape(), std::move(out), {a}, [](TensorNode& n) {
    double* g = parent_grad(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * n.data[i] * (1.0 - n.data[i]);
  });
}

inline Tensor exp(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a[i]);
  return make_result(a.shape(), std::move(out), {a}, [](TensorNode& n) {
    double* g = parent_grad(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * n.data[i];
  });
}

inline Tensor log(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a[i]);
  return make_result(a.shape(), std::move(out), {a}, [](TensorNode& n) {
    const auto& A = detail::pdata(n, 0);
    double* g = parent_grad(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] / A[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result({}, {s}, {a}, [](TensorNode& n) {
    double* g = parent_grad(n, 0);
    const std::size_t len = n.parents[0]->data.size();
    for (std::size_t i = 0; i < len; ++i) g[i] += n.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

// ---------------------------------------------------------------------------
// Row-wise normalizations for [m x p] matrices

inline Tensor log_softmax_rows(const Tensor& a) {
  detail::require_rank(a, 2, "log_softmax_rows");
  const std::size_t m = a.dim(0), p = a.dim(1);
  std::vector<double> out(m * p);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < p; ++j) mx = std::max(mx, a[i * p + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < p; ++j) s += std::exp(a[i * p + j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < p; ++j) out[i * p + j] = a[i * p + j] - lse;
  }
  return make_result({m, p}, std::move(out), {a}, [m, p](TensorNode& n) {
    double* g = parent_grad(n, 0);
    for (std::size_t i = 0; i < m; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < p; ++j) gs += n.grad[i * p + j];
      for (std::size_t j = 0; j < p; ++j)
        g[i * p + j] += n.grad[i * p + j] - std::exp(n.data[i * p + j]) * gs;
    }
  });
}

inline Tensor softmax_rows(const Tensor& a) {
  detail::require_rank(a, 2, "softmax_rows");
  const std::size_t m = a.dim(0), p = a.dim(1);
  std::vector<double> out(m * p);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < p; ++j) mx = std::max(mx, a[i * p + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < p; ++j) s += (out[i * p + j] = std::exp(a[i * p + j] - mx));
    for (std::size_t j = 0; j < p; ++j) out[i * p + j] /= s;
  }
  return make_result({m, p}, std::move(out), {a}, [m, p](TensorNode& n) {
    double* g = parent_grad(n, 0);
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < p; ++j) dot += n.grad[i * p + j] * n.data[i * p + j];
      for (std::size_t j = 0; j < p; ++j)
        g[i * p + j] += n.data[i * p + j] * (n.grad[i * p + j] - dot);
    }
  });
}

/// Per row, log-sum-exp over the columns belonging to each group:
/// out[i, c] = log sum_{j : group[j] == c} exp(a[i, j]). Empty groups give -inf.
inline Tensor segment_logsumexp_cols(const Tensor& a, const std::vector<std::size_t>& group,
                                     std::size_t num_groups) {
  detail::require_rank(a, 2, "segment_logsumexp_cols");
  const std::size_t m = a.dim(0), p = a.dim(1);
  if (group.size() != p) throw DimensionError("segment_logsumexp_cols: group map length mismatch");
  for (auto c : group)
    if (c >= num_groups) throw DimensionError("segment_logsumexp_cols: group id out of range");
  const double neg_inf = -std::numeric_limits<double>::infinity();
  std::vector<double> out(m * num_groups, neg_inf);
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<double> mx(num_groups, neg_inf);
    for (std::size_t j = 0; j < p; ++j) mx[group[j]] = std::max(mx[group[j]], a[i * p + j]);
    std::vector<double> s(num_groups, 0.0);
    for (std::size_t j = 0; j < p; ++j) s[group[j]] += std::exp(a[i * p + j] - mx[group[j]]);
    for (std::size_t c = 0; c < num_groups; ++c)
      if (s[c] > 0.0) out[i * num_groups + c] = mx[c] + std::log(s[c]);
  }
  return make_result({m, num_groups}, std::move(out), {a}, [m, p, num_groups, group](TensorNode& n) {
    const auto& A = detail::pdata(n, 0);
    double* g = parent_grad(n, 0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p; ++j) {
        const std::size_t c = group[j];
        g[i * p + j] += n.grad[i * num_groups + c] * std::exp(A[i * p + j] - n.data[i * num_groups + c]);
      }
  });
}

/// Picks a[i, index[i]] for every row; result has shape [m].
inline Tensor select_per_row(const Tensor& a, const std::vector<std::size_t>& index) {
  detail::require_rank(a, 2, "select_per_row");
  const std::size_t m = a.dim(0), p = a.dim(1);
  if (index.size() != m) throw DimensionError("select_per_row: index length mismatch");
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (index[i] >= p) throw DimensionError("select_per_row: column out of range");
    out[i] = a[i * p + index[i]];
  }
  return make_result({m}, std::move(out), {a}, [p, index](TensorNode& n) {
    double* g = parent_grad(n, 0);
    for (std::size_t i = 0; i < index.size(); ++i) g[i * p + index[i]] += n.grad[i];
  });
}

/// Divides each row by max(||row||, eps).
inline Tensor l2_normalize_rows(const Tensor& a, double eps = 1e-12) {
  detail::require_rank(a, 2, "l2_normalize_rows");
  const std::size_t m = a.dim(0), p = a.dim(1);
  std::vector<double> out(m * p);
  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < p; ++j) s += a[i * p + j] * a[i * p + j];
    norms[i] = std::max(std::sqrt(s), eps);
    for (std::size_t j = 0; j < p; ++j) out[i * p + j] = a[i * p + j] / norms[i];
  }
  return make_result({m, p}, std::move(out), {a}, [m, p, norms, eps](TensorNode& n) {
    double* g = parent_grad(n, 0);
    for (std::size_t i = 0; i < m; ++i) {
      if (norms[i] <= eps) {
        for (std::size_t j = 0; j < p; ++j) g[i * p + j] += n.grad[i * p + j] / eps;
        continue;
      }
      double dot = 0.0;
      for (std::size_t j = 0; j < p; ++j) dot += n.grad[i * p + j] * n.data[i * p + j];
      for (std::size_t j = 0; j < p; ++j)
        g[i * p + j] += (n.grad[i * p + j] - n.data[i * p + j] * dot) / norms[i];
    }
  });
}

/// D[i, j] = ||x_i - y_j||^2 for X [m x d], Y [k x d].
inline Tensor sq_euclidean_pairwise(const Tensor& x, const Tensor& y) {
  detail::require_rank(x, 2, "sq_euclidean_pairwise");
  detail::require_rank(y, 2, "sq_euclidean_pairwise");
  const std::size_t m = x.dim(0), k = y.dim(0), d = x.dim(1);
  if (y.dim(1) != d) throw DimensionError("sq_euclidean_pairwise: feature dimension mismatch");
  std::vector<double> out(m * k);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < d; ++t) {
        const double diff = x[i * d + t] - y[j * d + t];
        s += diff * diff;
      }
      out[i * k + j] = s;
    }
  return make_result({m, k}, std::move(out), {x, y}, [m, k, d](TensorNode& n) {
    const auto& X = detail::pdata(n, 0);
    const auto& Y = detail::pdata(n, 1);
    double* gx = parent_grad(n, 0);
    double* gy = parent_grad(n, 1);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        const double gij = 2.0 * n.grad[i * k + j];
        if (gij == 0.0) continue;
        for (std::size_t t = 0; t < d; ++t) {
          const double diff = gij * (X[i * d + t] - Y[j * d + t]);
          if (gx) gx[i * d + t] += diff;
          if (gy) gy[j * d + t] -= diff;
        }
      }
  });
}

/// Horizontal concatenation of [m x p] and [m x q].
inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "concat_cols");
  detail::require_rank(b, 2, "concat_cols");
  const std::size_t m = a.dim(0), p = a.dim(1), q = b.dim(1);
  if (b.dim(0) != m) throw DimensionError("concat_cols: row count mismatch");
  std::vector<double> out(m * (p + q));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < p; ++j) out[i * (p + q) + j] = a[i * p + j];
    for (std::size_t j = 0; j < q; ++j) out[i * (p + q) + p + j] = b[i * q + j];
  }
  return make_result({m, p + q}, std::move(out), {a, b}, [m, p, q](TensorNode& n) {
    if (double* g = parent_grad(n, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < p; ++j) g[i * p + j] += n.grad[i * (p + q) + j];
    if (double* g = parent_grad(n, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < q; ++j) g[i * q + j] += n.grad[i * (p + q) + p + j];
  });
}

/// Rows [begin, end) of a matrix.
inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_rank(a, 2, "slice_rows");
  const std::size_t p = a.dim(1);
  if (begin > end || end > a.dim(0)) throw DimensionError("slice_rows: range out of bounds");
  std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(begin * p),
                          a.data().begin() + static_cast<std::ptrdiff_t>(end * p));
  return make_result({end - begin, p}, std::move(out), {a}, [begin, p](TensorNode& n) {
    double* g = parent_grad(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[begin * p + i] += n.grad[i];
  });
}

/// Vertical concatenation of same-width matrices.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t p = parts.front().dim(1);
  std::size_t m = 0;
  for (const auto& t : parts) {
    detail::require_rank(t, 2, "concat_rows");
    if (t.dim(1) != p) throw DimensionError("concat_rows: column count mismatch");
    m += t.dim(0);
  }
  std::vector<double> out;
  out.reserve(m * p);
  std::vector<std::size_t> offsets;
  for (const auto& t : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), t.data().begin(), t.data().end());
  }
  return make_result({m, p}, std::move(out), parts, [offsets](TensorNode& n) {
    for (std::size_t k = 0; k < n.parents.size(); ++k)
      if (double* g = parent_grad(n, k))
        for (std::size_t i = 0; i < n.parents[k]->data.size(); ++i) g[i] += n.grad[offsets[k] + i];
  });
}

// ---------------------------------------------------------------------------
// Convolution stack

/// Cross-correlation. x is [B x Cin x H x W] (or [Cin x H x W] for one sample),
/// k is [Cout x Cin x kh x kw], bias (optional) is [Cout].
inline Tensor conv2d(const Tensor& x, const Tensor& k, const std::optional<Tensor>& bias,
                     std::size_t stride, std::size_t pad) {
  const bool single = x.rank() == 3;
  if (!single) detail::require_rank(x, 4, "conv2d");
  detail::require_rank(k, 4, "conv2d");
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  const std::size_t B = single ? 1 : x.dim(0);
  const std::size_t off = single ? 0 : 1;
  const std::size_t Ci = x.dim(off), H = x.dim(off + 1), W = x.dim(off + 2);
  const std::size_t Co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  if (k.dim(1) != Ci) throw DimensionError("conv2d: kernel input channels do not match input");
  if (bias && (bias->rank() != 1 || bias->dim(0) != Co)) throw DimensionError("conv2d: bias length");
  const std::size_t Hp = H + 2 * pad, Wp = W + 2 * pad;
  if (kh > Hp || kw > Wp) throw ConfigError("conv2d: kernel larger than padded input");
  if ((Hp - kh) % stride != 0 || (Wp - kw) % stride != 0) {
    throw ConfigError("conv2d: non-integral output size for stride " + std::to_string(stride));
  }
  const std::size_t Ho = (Hp - kh) / stride + 1, Wo = (Wp - kw) / stride + 1;

  const auto X = x.data();
  const auto K = k.data();
  std::vector<double> out(B * Co * Ho * Wo, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Co; ++co) {
      double* o = &out[((b * Co) + co) * Ho * Wo];
      if (bias) std::fill(o, o + Ho * Wo, (*bias)[co]);
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const double* xin = &X[((b * Ci) + ci) * H * W];
        for (std::size_t u = 0; u < kh; ++u)
          for (std::size_t v = 0; v < kw; ++v) {
            const double wv = K[((co * Ci + ci) * kh + u) * kw + v];
            for (std::size_t oh = 0; oh < Ho; ++oh) {
              const long ih = static_cast<long>(oh * stride + u) - static_cast<long>(pad);
              if (ih < 0 || ih >= static_cast<long>(H)) continue;
              for (std::size_t ow = 0; ow < Wo; ++ow) {
                const long iw = static_cast<long>(ow * stride + v) - static_cast<long>(pad);
                if (iw < 0 || iw >= static_cast<long>(W)) continue;
                o[oh * Wo + ow] += wv * xin[ih * W + iw];
              }
            }
          }
      }
    }

  Shape shape = single ? Shape{Co, Ho, Wo} : Shape{B, Co, Ho, Wo};
  std::vector<Tensor> parents{x, k};
  if (bias) parents.push_back(*bias);
  return make_result(std::move(shape), std::move(out), std::move(parents),
                     [=](TensorNode& n) {
    const auto& Xd = detail::pdata(n, 0);
    const auto& Kd = detail::pdata(n, 1);
    double* gx = parent_grad(n, 0);
    double* gk = parent_grad(n, 1);
    double* gb = n.parents.size() > 2 ? parent_grad(n, 2) : nullptr;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t co = 0; co < Co; ++co) {
        const double* go = &n.grad[((b * Co) + co) * Ho * Wo];
        if (gb)
          for (std::size_t i = 0; i < Ho * Wo; ++i) gb[co] += go[i];
        for (std::size_t ci = 0; ci < Ci; ++ci) {
          const double* xin = &Xd[((b * Ci) + ci) * H * W];
          double* gxin = gx ? &gx[((b * Ci) + ci) * H * W] : nullptr;
          for (std::size_t u = 0; u < kh; ++u)
            for (std::size_t v = 0; v < kw; ++v) {
              const std::size_t kidx = ((co * Ci + ci) * kh + u) * kw + v;
              const double wv = Kd[kidx];
              double acc = 0.0;
              for (std::size_t oh = 0; oh < Ho; ++oh) {
                const long ih = static_cast<long>(oh * stride + u) - static_cast<long>(pad);
                if (ih < 0 || ih >= static_cast<long>(H)) continue;
                for (std::size_t ow = 0; ow < Wo; ++ow) {
                  const long iw = static_cast<long>(ow * stride + v) - static_cast<long>(pad);
                  if (iw < 0 || iw >= static_cast<long>(W)) continue;
                  const double gval = go[oh * Wo + ow];
                  acc += gval * xin[ih * W + iw];
                  if (gxin) gxin[ih * W + iw] += gval * wv;
                }
              }
              if (gk) gk[kidx] += acc;
            }
        }
      }
  });
}

enum class NormMode { train, eval };

/// Running statistics owned by one batch-norm layer. Not differentiable.
struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Per-channel normalization of x [B x C x H x W] or [B x C].
/// Train mode normalizes with batch statistics and updates `stats`;
/// eval mode uses the running statistics and leaves them untouched.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         BatchNormStats& stats, NormMode mode,
                         double momentum = kBatchNormMomentum, double eps = kBatchNormEps) {
  if (x.rank() != 4 && x.rank() != 2) throw DimensionError("batch_norm: expected [B,C,H,W] or [B,C]");
  const std::size_t B = x.dim(0), C = x.dim(1);
  const std::size_t S = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (gamma.size() != C || beta.size() != C || stats.running_mean.size() != C ||
      stats.running_var.size() != C) {
    throw DimensionError("batch_norm: per-channel parameter length mismatch");
  }
  const std::size_t M = B * S;
  std::vector<double> mu(C, 0.0), inv_std(C, 0.0);
  if (mode == NormMode::train) {
    std::vector<double> var(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < S; ++i) s += x[(b * C + c) * S + i];
      mu[c] = s / static_cast<double>(M);
      double v = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < S; ++i) {
          const double d = x[(b * C + c) * S + i] - mu[c];
          v += d * d;
        }
      var[c] = v / static_cast<double>(M);
      inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
    }
    auto rm = stats.running_mean.mutable_data();
    auto rv = stats.running_var.mutable_data();
    const double unbias = M > 1 ? static_cast<double>(M) / static_cast<double>(M - 1) : 1.0;
    for (std::size_t c = 0; c < C; ++c) {
      rm[c] = (1.0 - momentum) * rm[c] + momentum * mu[c];
      rv[c] = (1.0 - momentum) * rv[c] + momentum * var[c] * unbias;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = stats.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(stats.running_var[c] + eps);
    }
  }

  std::vector<double> xhat(x.size()), out(x.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < S; ++i) {
        const std::size_t idx = (b * C + c) * S + i;
        xhat[idx] = (x[idx] - mu[c]) * inv_std[c];
        out[idx] = gamma[c] * xhat[idx] + beta[c];
      }

  const bool batch_stats = mode == NormMode::train;
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [=, xhat = std::move(xhat)](TensorNode& n) {
    const auto& G = detail::pdata(n, 1);
    double* gx = parent_grad(n, 0);
    double* gg = parent_grad(n, 1);
    double* gbeta = parent_grad(n, 2);
    for (std::size_t c = 0; c < C; ++c) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < S; ++i) {
          const std::size_t idx = (b * C + c) * S + i;
          sum_dy += n.grad[idx];
          sum_dy_xhat += n.grad[idx] * xhat[idx];
        }
      if (gg) gg[c] += sum_dy_xhat;
      if (gbeta) gbeta[c] += sum_dy;
      if (!gx) continue;
      const double scale_c = G[c] * inv_std[c];
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < S; ++i) {
          const std::size_t idx = (b * C + c) * S + i;
          if (batch_stats) {
            gx[idx] += scale_c * (n.grad[idx] - sum_dy / static_cast<double>(M) -
                                  xhat[idx] * sum_dy_xhat / static_cast<double>(M));
          } else {
            gx[idx] += scale_c * n.grad[idx];
          }
        }
    }
  });
}

/// [B x C x H x W] -> [B x C] spatial mean.
inline Tensor global_avg_pool(const Tensor& x) {
  detail::require_rank(x, 4, "global_avg_pool");
  const std::size_t B = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
  std::vector<double> out(B * C, 0.0);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    double s = 0.0;
    for (std::size_t i = 0; i < S; ++i) s += x[bc * S + i];
    out[bc] = s / static_cast<double>(S);
  }
  return make_result({B, C}, std::move(out), {x}, [B, C, S](TensorNode& n) {
    double* g = parent_grad(n, 0);
    for (std::size_t bc = 0; bc < B * C; ++bc)
      for (std::size_t i = 0; i < S; ++i) g[bc * S + i] += n.grad[bc] / static_cast<double>(S);
  });
}

/// Grouped projected Gram matrices. f is [B x n x d] (or [n x d]); proj is
/// [c x g x g] with g = d / c. Channel k of sample b is
/// Z Z^T / g where Z = f[b][:, k*g:(k+1)*g] * proj[k].
inline Tensor grouped_gram(const Tensor& f, const Tensor& proj) {
  const bool single = f.rank() == 2;
  if (!single) detail::require_rank(f, 3, "grouped_gram");
  detail::require_rank(proj, 3, "grouped_gram");
  const std::size_t B = single ? 1 : f.dim(0);
  const std::size_t n = f.dim(single ? 0 : 1), d = f.dim(single ? 1 : 2);
  const std::size_t c = proj.dim(0), g = proj.dim(1);
  if (c == 0 || d % c != 0) {
    throw ConfigError("grouped_gram: feature width " + std::to_string(d) +
                      " is not divisible by channel count " + std::to_string(c));
  }
  if (g != d / c || proj.dim(2) != g) throw DimensionError("grouped_gram: projection shape mismatch");

  const auto F = f.data();
  const auto P = proj.data();
  // Z[b][k] is n x g
  std::vector<double> Z(B * c * n * g, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < g; ++t) {
          const double fv = F[(b * n + i) * d + k * g + t];
          for (std::size_t s = 0; s < g; ++s)
            Z[((b * c + k) * n + i) * g + s] += fv * P[(k * g + t) * g + s];
        }
  const double inv_g = 1.0 / static_cast<double>(g);
  std::vector<double> out(B * c * n * n, 0.0);
  for (std::size_t bk = 0; bk < B * c; ++bk)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i; j < n; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < g; ++t) s += Z[(bk * n + i) * g + t] * Z[(bk * n + j) * g + t];
        out[(bk * n + i) * n + j] = out[(bk * n + j) * n + i] = s * inv_g;
      }

  Shape shape = single ? Shape{c, n, n} : Shape{B, c, n, n};
  return make_result(std::move(shape), std::move(out), {f, proj},
                     [=, Z = std::move(Z)](TensorNode& node) {
    const auto& Fd = detail::pdata(node, 0);
    const auto& Pd = detail::pdata(node, 1);
    double* gf = parent_grad(node, 0);
    double* gp = parent_grad(node, 1);
    std::vector<double> dZ(n * g);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < c; ++k) {
        const std::size_t bk = b * c + k;
        const double* G = &node.grad[bk * n * n];
        const double* Zk = &Z[bk * n * g];
        // dZ = (G + G^T) Z / g
        std::fill(dZ.begin(), dZ.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double sym = (G[i * n + j] + G[j * n + i]) * inv_g;
            if (sym == 0.0) continue;
            for (std::size_t t = 0; t < g; ++t) dZ[i * g + t] += sym * Zk[j * g + t];
          }
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t t = 0; t < g; ++t) {
            const double fv = Fd[(b * n + i) * d + k * g + t];
            double acc = 0.0;
            for (std::size_t s = 0; s < g; ++s) {
              const double dz = dZ[i * g + s];
              if (gp) gp[(k * g + t) * g + s] += fv * dz;
              acc += dz * Pd[(k * g + t) * g + s];
            }
            if (gf) gf[(b * n + i) * d + k * g + t] += acc;
          }
      }
  });
}

}  // namespace evofa
