#pragma once

// Representation g_theta (grouped Gram "G2G" transform + four Conv-BN-ReLU
// blocks + global average pooling), the two-layer adapter h_phi, and the
// episode heads c_W.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "evofa/data.hpp"
#include "evofa/error.hpp"
#include "evofa/ops.hpp"
#include "evofa/param_group.hpp"
#include "evofa/rng.hpp"

namespace evofa {

enum class HeadKind { matching, relation, proto, linear };

inline const char* to_string(HeadKind kind) {
  switch (kind) {
    case HeadKind::matching: return "matching";
    case HeadKind::relation: return "relation";
    case HeadKind::proto: return "proto";
    case HeadKind::linear: return "linear";
  }
  return "?";
}

inline HeadKind head_kind_from_string(const std::string& s) {
  if (s == "matching") return HeadKind::matching;
  if (s == "relation") return HeadKind::relation;
  if (s == "proto") return HeadKind::proto;
  if (s == "linear") return HeadKind::linear;
  throw ConfigError("unknown head kind '" + s + "'");
}

struct BackboneConfig {
  std::size_t n_electrodes = 62;
  std::size_t d_bands = 5;
  std::size_t g2g_channels = 1;
  std::vector<std::size_t> conv_channels{16, 32, 32, 64};
  std::size_t embedding_dim = 64;   // equals conv_channels.back()
  std::size_t adapter_hidden = 128; // even, >= 2 * embedding_dim
  HeadKind head_kind = HeadKind::proto;
  std::size_t num_classes = 3;
  double matching_temperature = 10.0;
  std::size_t relation_hidden = 32;
  std::uint64_t init_seed = 7;

  void validate() const {
    if (!n_electrodes || !d_bands || !g2g_channels || !embedding_dim || !adapter_hidden || !num_classes ||
        !relation_hidden) {
      throw ConfigError("backbone config: all dimensions must be >= 1");
    }
    if (d_bands % g2g_channels != 0) {
      throw ConfigError("backbone config: d_bands " + std::to_string(d_bands) +
                        " not divisible by g2g_channels " + std::to_string(g2g_channels));
    }
    if (conv_channels.size() != 4) throw ConfigError("backbone config: conv_channels must list 4 widths");
    for (auto c : conv_channels)
      if (!c) throw ConfigError("backbone config: conv widths must be >= 1");
    if (embedding_dim != conv_channels.back()) {
      throw ConfigError("backbone config: embedding_dim must equal the last conv width");
    }
    if (adapter_hidden % 2 != 0 || adapter_hidden < 2 * embedding_dim) {
      throw ConfigError("backbone config: adapter_hidden must be even and >= 2 * embedding_dim");
    }
    if (!(matching_temperature > 0)) throw ConfigError("backbone config: matching_temperature must be > 0");
  }
};

/// Parameters theta (representation), phi (adapter) and w (head), with deep
/// copy semantics.
struct Model {
  BackboneConfig config;
  ParamGroup theta{"theta"};
  ParamGroup phi{"phi"};
  ParamGroup w{"w"};

  Model() = default;
  Model(const Model& other)
      : config(other.config), theta(other.theta.clone()), phi(other.phi.clone()), w(other.w.clone()) {}
  Model& operator=(const Model& other) {
    if (this != &other) {
      config = other.config;
      theta = other.theta.clone();
      phi = other.phi.clone();
      w = other.w.clone();
    }
    return *this;
  }
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  std::vector<ParamGroup*> groups() { return {&theta, &phi, &w}; }
  std::vector<const ParamGroup*> groups() const { return {&theta, &phi, &w}; }

  void zero_grad() {
    for (auto* g : groups()) g->zero_grad();
  }
};

namespace detail {

inline Tensor normal_tensor(Shape shape, double sd, Rng& rng, bool requires_grad = true) {
  std::normal_distribution<double> normal(0.0, sd);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = normal(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// e x h adapter pair that composes to the identity map: W1 = [A, -A],
/// W2 = [A^T; -A^T] with A having orthonormal rows, so
/// relu(xA) A^T - relu(-xA) A^T = x A A^T = x.
inline std::pair<Tensor, Tensor> identity_adapter_weights(std::size_t e, std::size_t h, Rng& rng) {
  const std::size_t half = h / 2;
  std::normal_distribution<double> normal;
  Eigen::MatrixXd g(static_cast<Eigen::Index>(half), static_cast<Eigen::Index>(e));
  for (Eigen::Index i = 0; i < g.rows(); ++i)
    for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(g.rows(), g.cols());  // half x e
  std::vector<double> w1(e * h), w2(h * e);
  for (std::size_t i = 0; i < e; ++i)
    for (std::size_t j = 0; j < half; ++j) {
      const double a = q(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i));  // A = q^T
      w1[i * h + j] = a;
      w1[i * h + half + j] = -a;
      w2[j * e + i] = a;
      w2[(half + j) * e + i] = -a;
    }
  return {Tensor({e, h}, std::move(w1), true), Tensor({h, e}, std::move(w2), true)};
}

}  // namespace detail

inline void init_head(Model& model, Rng& rng) {
  const auto& cfg = model.config;
  const std::size_t e = cfg.embedding_dim;
  model.w = ParamGroup("w");
  if (cfg.head_kind == HeadKind::relation) {
    const std::size_t h = cfg.relation_hidden;
    model.w.add("rel.fc1.weight", detail::normal_tensor({2 * e, h}, std::sqrt(2.0 / (2.0 * e)), rng));
    model.w.add("rel.fc1.bias", Tensor::zeros({h}, true));
    model.w.add("rel.fc2.weight", detail::normal_tensor({h, 1}, std::sqrt(1.0 / h), rng));
    model.w.add("rel.fc2.bias", Tensor::zeros({1}, true));
  } else if (cfg.head_kind == HeadKind::linear) {
    model.w.add("cls.weight", detail::normal_tensor({e, cfg.num_classes}, std::sqrt(1.0 / e), rng));
    model.w.add("cls.bias", Tensor::zeros({cfg.num_classes}, true));
  }
}

/// Fresh model. Conv weights use He initialization, the G2G projections start
/// at identity, and the adapter starts as the exact identity map.
inline Model make_model(const BackboneConfig& cfg) {
  cfg.validate();
  Model model;
  model.config = cfg;
  Rng rng = make_rng(cfg.init_seed, 17);

  const std::size_t c = cfg.g2g_channels, g = cfg.d_bands / c;
  std::vector<double> proj(c * g * g, 0.0);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < g; ++i) proj[(k * g + i) * g + i] = 1.0;
  model.theta.add("g2g.proj", Tensor({c, g, g}, std::move(proj), true));

  std::size_t in = c;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t out = cfg.conv_channels[i];
    const std::string p = std::to_string(i);
    model.theta.add("conv" + p + ".weight",
                    detail::normal_tensor({out, in, 3, 3}, std::sqrt(2.0 / (in * 9.0)), rng));
    model.theta.add("conv" + p + ".bias", Tensor::zeros({out}, true));
    model.theta.add("bn" + p + ".gamma", Tensor::full({out}, 1.0, true));
    model.theta.add("bn" + p + ".beta", Tensor::zeros({out}, true));
    model.theta.add("bn" + p + ".running_mean", Tensor::zeros({out}));
    model.theta.add("bn" + p + ".running_var", Tensor::full({out}, 1.0));
    in = out;
  }

  auto [w1, w2] = detail::identity_adapter_weights(cfg.embedding_dim, cfg.adapter_hidden, rng);
  model.phi.add("fc1.weight", std::move(w1));
  model.phi.add("fc1.bias", Tensor::zeros({cfg.adapter_hidden}, true));
  model.phi.add("fc2.weight", std::move(w2));
  model.phi.add("fc2.bias", Tensor::zeros({cfg.embedding_dim}, true));

  init_head(model, rng);
  return model;
}

/// [n x d] (or [B x n x d]) -> [c x n x n] (or [B x c x n x n]).
inline Tensor g2g_transform(const Tensor& features, const ParamGroup& theta) {
  return grouped_gram(features, theta.at("g2g.proj"));
}

/// Stacks sample features into [B x n x d].
inline Tensor stack_features(const Pool& samples) {
  if (samples.empty()) throw DimensionError("stack_features: empty sample list");
  const Shape& s = samples.front()->features.shape();
  std::vector<double> data;
  data.reserve(samples.size() * shape_size(s));
  for (const auto* x : samples) {
    if (x->features.shape() != s) throw DimensionError("stack_features: inconsistent feature shapes");
    data.insert(data.end(), x->features.data().begin(), x->features.data().end());
  }
  return Tensor({samples.size(), s[0], s[1]}, std::move(data));
}

/// g_theta on a batch [B x n x d] -> [B x embedding_dim].
inline Tensor encode_batch(const Tensor& batch, Model& model, NormMode mode) {
  const auto& cfg = model.config;
  if (batch.rank() != 3 || batch.dim(1) != cfg.n_electrodes || batch.dim(2) != cfg.d_bands) {
    throw DimensionError("encode: expected [B x " + std::to_string(cfg.n_electrodes) + " x " +
                         std::to_string(cfg.d_bands) + "], got " + shape_str(batch.shape()));
  }
  Tensor x = g2g_transform(batch, model.theta);
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string p = std::to_string(i);
    x = conv2d(x, model.theta.at("conv" + p + ".weight"), model.theta.at("conv" + p + ".bias"), 1, 1);
    BatchNormStats stats{model.theta.at("bn" + p + ".running_mean"), model.theta.at("bn" + p + ".running_var")};
    x = batch_norm(x, model.theta.at("bn" + p + ".gamma"), model.theta.at("bn" + p + ".beta"), stats, mode);
    x = relu(x);
  }
  return global_avg_pool(x);
}

/// Single-sample eval-mode encoding: [n x d] -> [embedding_dim].
inline Tensor encode(const Tensor& features, Model& model) {
  if (features.rank() != 2) throw DimensionError("encode: expected [n x d] features");
  Tensor batch = reshape(features, {1, features.dim(0), features.dim(1)});
  Tensor e = encode_batch(batch, model, NormMode::eval);
  return reshape(e, {model.config.embedding_dim});
}

/// h_phi: FC -> ReLU -> FC on [B x e] (or [e]).
inline Tensor adapt(const Tensor& embedding, const ParamGroup& phi) {
  const bool single = embedding.rank() == 1;
  Tensor x = single ? reshape(embedding, {1, embedding.dim(0)}) : embedding;
  Tensor h = relu(add_row_vector(matmul(x, phi.at("fc1.weight")), phi.at("fc1.bias")));
  Tensor out = add_row_vector(matmul(h, phi.at("fc2.weight")), phi.at("fc2.bias"));
  return single ? reshape(out, {embedding.dim(0)}) : out;
}

/// adapt(encode(samples)) as [B x e].
inline Tensor embed(const Pool& samples, Model& model, NormMode mode) {
  return adapt(encode_batch(stack_features(samples), model, mode), model.phi);
}

/// Per-query class scores. `scores` is what classification takes the argmax
/// of; `log_probs` is populated for the matching and proto heads.
struct HeadOutput {
  Tensor scores;     // [Q x N]
  Tensor log_probs;  // [Q x N] or undefined
};

namespace detail {

/// [N x S] matrix averaging (or summing) support rows per class.
inline Tensor class_pooling_matrix(const std::vector<std::size_t>& labels, std::size_t n_way, bool average) {
  std::vector<std::size_t> counts(n_way, 0);
  for (auto y : labels) {
    if (y >= n_way) throw ProtocolError("support label " + std::to_string(y) + " outside episode way");
    ++counts[y];
  }
  for (std::size_t k = 0; k < n_way; ++k)
    if (!counts[k]) throw ProtocolError("class " + std::to_string(k) + " absent from support set");
  std::vector<double> m(n_way * labels.size(), 0.0);
  for (std::size_t j = 0; j < labels.size(); ++j)
    m[labels[j] * labels.size() + j] = average ? 1.0 / static_cast<double>(counts[labels[j]]) : 1.0;
  return Tensor({n_way, labels.size()}, std::move(m));
}

}  // namespace detail

/// Class prototypes: mean support embedding per class, [N x e].
inline Tensor prototypes(const Tensor& support, const std::vector<std::size_t>& labels, std::size_t n_way) {
  return matmul(detail::class_pooling_matrix(labels, n_way, true), support);
}

inline HeadOutput head_forward(const Tensor& support, const std::vector<std::size_t>& support_labels,
                               const Tensor& query, const ParamGroup& w, const BackboneConfig& cfg,
                               std::size_t n_way) {
  if (support.dim(0) != support_labels.size()) throw DimensionError("head_forward: label count mismatch");
  switch (cfg.head_kind) {
    case HeadKind::proto: {
      Tensor protos = prototypes(support, support_labels, n_way);
      Tensor logits = scale(sq_euclidean_pairwise(query, protos), -1.0);
      return {logits, log_softmax_rows(logits)};
    }
    case HeadKind::matching: {
      detail::class_pooling_matrix(support_labels, n_way, false);  // class coverage check
      Tensor cos = matmul(l2_normalize_rows(query), transpose(l2_normalize_rows(support)));
      Tensor log_attention = log_softmax_rows(scale(cos, cfg.matching_temperature));
      Tensor log_p = segment_logsumexp_cols(log_attention, support_labels, n_way);
      return {exp(log_p), log_p};
    }
    case HeadKind::relation: {
      Tensor class_sum = matmul(detail::class_pooling_matrix(support_labels, n_way, false), support);
      const std::size_t q = query.dim(0);
      // Pair every query with every class: rows ordered (query, class).
      std::vector<double> pick_q(q * n_way * q, 0.0), pick_c(q * n_way * n_way, 0.0);
      for (std::size_t i = 0; i < q; ++i)
        for (std::size_t k = 0; k < n_way; ++k) {
          pick_q[(i * n_way + k) * q + i] = 1.0;
          pick_c[(i * n_way + k) * n_way + k] = 1.0;
        }
      Tensor pairs = concat_cols(matmul(Tensor({q * n_way, q}, std::move(pick_q)), query),
                                 matmul(Tensor({q * n_way, n_way}, std::move(pick_c)), class_sum));
      Tensor h = relu(add_row_vector(matmul(pairs, w.at("rel.fc1.weight")), w.at("rel.fc1.bias")));
      Tensor r = sigmoid(add_row_vector(matmul(h, w.at("rel.fc2.weight")), w.at("rel.fc2.bias")));
      return {reshape(r, {q, n_way}), Tensor()};
    }
    case HeadKind::linear:
      break;
  }
  throw ConfigError("head_forward: linear head has no episodic form");
}

/// Supervised classifier logits [B x num_classes] on adapted embeddings.
inline Tensor linear_logits(const Tensor& embeddings, const ParamGroup& w) {
  return add_row_vector(matmul(embeddings, w.at("cls.weight")), w.at("cls.bias"));
}

/// Row-wise argmax; ties resolve to the lowest class id.
inline std::vector<std::size_t> argmax_rows(const Tensor& scores) {
  const std::size_t m = scores.dim(0), p = scores.dim(1);
  std::vector<std::size_t> out(m, 0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 1; j < p; ++j)
      if (scores[i * p + j] > scores[i * p + out[i]]) out[i] = j;
  return out;
}

}  // namespace evofa
