#pragma once

// Episodic few-shot learning: sampling, the three episode losses,
// classification, meta-training with validation-based model selection, and
// the supervised baseline.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "evofa/backbone.hpp"
#include "evofa/data.hpp"
#include "evofa/error.hpp"
#include "evofa/ops.hpp"
#include "evofa/param_group.hpp"
#include "evofa/rng.hpp"

namespace evofa {

struct Episode {
  Pool support;  // N*K samples, grouped by class in label order
  Pool query;    // N*Q samples, grouped by class in label order
  std::vector<std::size_t> support_labels;  // episode-relative, 0..N-1
  std::vector<std::size_t> query_labels;
  std::vector<std::size_t> classes;  // dataset class id of each relative label (ascending)
  std::size_t n_way = 0, k_shot = 0, q_query = 0;

  /// CRC-64 over the identities of every sample, support then query.
  std::uint64_t digest() const {
    Crc64 crc;
    auto feed = [&](const Pool& pool) {
      for (const auto* s : pool) {
        const std::int64_t key[4] = {s->subject_id, s->session_id, s->trial_id,
                                     static_cast<std::int64_t>(s->time_index)};
        crc.process_bytes(key, sizeof key);
      }
    };
    feed(support);
    feed(query);
    return crc.checksum();
  }
};

/// Draws N classes, then K support and Q query samples per class without
/// replacement. Class ids are mapped to episode labels in ascending order.
inline Episode sample_episode(const Pool& pool, std::size_t n_way, std::size_t k_shot, std::size_t q_query,
                              Rng& rng) {
  if (!n_way || !k_shot || !q_query) throw ArgumentError("sample_episode: N, K and Q must be positive");
  const auto groups = by_class(pool);
  if (groups.size() < n_way) {
    throw SamplingError("sample_episode: pool has " + std::to_string(groups.size()) + " classes, need " +
                        std::to_string(n_way));
  }
  std::vector<std::size_t> class_ids;
  for (const auto& [label, members] : groups) class_ids.push_back(label);
  auto picked = sample_without_replacement(class_ids.size(), n_way, rng);
  std::vector<std::size_t> chosen;
  for (auto i : picked) chosen.push_back(class_ids[i]);
  std::sort(chosen.begin(), chosen.end());

  Episode ep;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.q_query = q_query;
  ep.classes = chosen;
  std::vector<Pool> query_parts(n_way);
  for (std::size_t rel = 0; rel < n_way; ++rel) {
    const Pool& members = groups.at(chosen[rel]);
    if (members.size() < k_shot + q_query) {
      throw SamplingError("sample_episode: class " + std::to_string(chosen[rel]) + " has " +
                          std::to_string(members.size()) + " samples, need " + std::to_string(k_shot + q_query));
    }
    const auto idx = sample_without_replacement(members.size(), k_shot + q_query, rng);
    for (std::size_t j = 0; j < k_shot; ++j) {
      ep.support.push_back(members[idx[j]]);
      ep.support_labels.push_back(rel);
    }
    for (std::size_t j = k_shot; j < k_shot + q_query; ++j) {
      ep.query.push_back(members[idx[j]]);
      ep.query_labels.push_back(rel);
    }
  }
  return ep;
}

/// Support and query embeddings after the adapter, encoded as one batch.
struct EpisodeEmbeddings {
  Tensor support;
  Tensor query;
};

inline EpisodeEmbeddings embed_episode(const Episode& ep, Model& model, NormMode mode) {
  Pool all = ep.support;
  all.insert(all.end(), ep.query.begin(), ep.query.end());
  Tensor e = embed(all, model, mode);
  return {slice_rows(e, 0, ep.support.size()), slice_rows(e, ep.support.size(), all.size())};
}

/// Loss from head outputs:
///   matching, proto: -(1/Q') sum_i log p(y_i | x_i)
///   relation:         (1/Q') sum_i sum_n (r_in - [y_i == n])^2
inline Tensor head_loss(const HeadOutput& out, const std::vector<std::size_t>& query_labels, HeadKind kind) {
  const auto q = static_cast<double>(query_labels.size());
  if (kind == HeadKind::relation) {
    const std::size_t n_way = out.scores.dim(1);
    std::vector<double> onehot(query_labels.size() * n_way, 0.0);
    for (std::size_t i = 0; i < query_labels.size(); ++i) onehot[i * n_way + query_labels[i]] = 1.0;
    Tensor diff = sub(out.scores, Tensor(out.scores.shape(), std::move(onehot)));
    return scale(sum(mul(diff, diff)), 1.0 / q);
  }
  return scale(sum(select_per_row(out.log_probs, query_labels)), -1.0 / q);
}

inline Tensor episode_loss(const Episode& ep, Model& model, NormMode mode = NormMode::train) {
  auto emb = embed_episode(ep, model, mode);
  auto out = head_forward(emb.support, ep.support_labels, emb.query, model.w, model.config, ep.n_way);
  return head_loss(out, ep.query_labels, model.config.head_kind);
}

struct Classification {
  std::vector<std::size_t> predictions;  // episode-relative labels
  double accuracy = 0.0;
};

/// Eval-mode classification of the query set; ties go to the lowest label.
inline Classification classify_query(const Episode& ep, Model& model) {
  NoGradGuard no_grad;
  auto emb = embed_episode(ep, model, NormMode::eval);
  auto out = head_forward(emb.support, ep.support_labels, emb.query, model.w, model.config, ep.n_way);
  Classification result;
  result.predictions = argmax_rows(out.scores);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ep.query_labels.size(); ++i) correct += result.predictions[i] == ep.query_labels[i];
  result.accuracy = static_cast<double>(correct) / static_cast<double>(ep.query_labels.size());
  return result;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t episodes_per_epoch = 50;
  std::size_t max_epochs = 30;
  double learning_rate = 0.01;
  std::size_t n_way = 3, k_shot = 1, q_query = 10;
  std::size_t validation_episodes = 50;
  std::uint64_t rng_seed = 1;
  // supervised baseline
  std::size_t batch_size = 32;
  double supervised_learning_rate = 0.003;

  void validate() const {
    if (!episodes_per_epoch || !n_way || !k_shot || !q_query || !validation_episodes || !batch_size) {
      throw ConfigError("train config: counts must be positive");
    }
    if (!(learning_rate > 0) || !(supervised_learning_rate > 0)) {
      throw ConfigError("train config: learning rates must be > 0");
    }
  }
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainResult {
  Model model;  // best-validation snapshot
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  double best_val_accuracy = -1.0;
};

/// Mean query accuracy over `count` episodes with seeds (seed, stream, i).
inline double mean_episode_accuracy(Model& model, const Pool& pool, std::size_t n_way, std::size_t k_shot,
                                    std::size_t q_query, std::size_t count, std::uint64_t seed) {
  double acc = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = make_rng(seed, i);
    acc += classify_query(sample_episode(pool, n_way, k_shot, q_query, rng), model).accuracy;
  }
  return acc / static_cast<double>(count);
}

namespace detail {

inline void all_sgd_step(Model& model, double lr) {
  for (auto* g : model.groups()) sgd_step(*g, lr);
}

inline void check_finite_loss(const Tensor& loss, std::size_t epoch, std::size_t step) {
  if (!std::isfinite(loss.item())) {
    std::ostringstream os;
    os << "non-finite training loss " << loss.item() << " at epoch " << epoch << ", step " << step;
    throw Error(os.str());
  }
}

}  // namespace detail

/// Episodic training: one SGD step on (theta, phi, w) per episode; after each
/// epoch, validation accuracy over a fixed episode set picks the snapshot.
inline TrainResult meta_train(Model init, const Pool& train_pool, const Pool& val_pool, const TrainConfig& cfg,
                              const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (init.config.head_kind == HeadKind::linear) throw ConfigError("meta_train: linear head is not episodic");
  TrainResult result{init, {}, 0, -1.0};
  Model& model = init;
  const std::uint64_t val_seed = derive_seed(cfg.rng_seed, 0x7A11D);
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    double loss_sum = 0.0;
    for (std::size_t step = 0; step < cfg.episodes_per_epoch; ++step) {
      Rng rng = make_rng(cfg.rng_seed, (epoch - 1) * cfg.episodes_per_epoch + step);
      Episode ep = sample_episode(train_pool, cfg.n_way, cfg.k_shot, cfg.q_query, rng);
      model.zero_grad();
      Tensor loss = episode_loss(ep, model, NormMode::train);
      detail::check_finite_loss(loss, epoch, step);
      loss.backward();
      detail::all_sgd_step(model, cfg.learning_rate);
      loss_sum += loss.item();
    }
    EpochLog entry{epoch, loss_sum / static_cast<double>(cfg.episodes_per_epoch),
                   mean_episode_accuracy(model, val_pool, cfg.n_way, cfg.k_shot, cfg.q_query,
                                         cfg.validation_episodes, val_seed)};
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
    if (entry.val_accuracy > result.best_val_accuracy) {
      result.best_val_accuracy = entry.val_accuracy;
      result.best_epoch = epoch;
      result.model = model;
    }
  }
  return result;
}

/// Accuracy of the linear classifier over every sample in `pool`.
inline double supervised_accuracy(Model& model, const Pool& pool, std::size_t chunk = 256) {
  NoGradGuard no_grad;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < pool.size(); begin += chunk) {
    Pool part(pool.begin() + static_cast<std::ptrdiff_t>(begin),
              pool.begin() + static_cast<std::ptrdiff_t>(std::min(pool.size(), begin + chunk)));
    const auto pred = argmax_rows(linear_logits(embed(part, model, NormMode::eval), model.w));
    for (std::size_t i = 0; i < part.size(); ++i) correct += pred[i] == part[i]->label;
  }
  return pool.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(pool.size());
}

/// Same backbone with a linear softmax classifier, minibatch cross-entropy.
inline TrainResult train_supervised_baseline(Model init, const Pool& train_pool, const Pool& val_pool,
                                             const TrainConfig& cfg,
                                             const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (init.config.head_kind != HeadKind::linear) throw ConfigError("supervised baseline needs a linear head");
  if (train_pool.empty()) throw SamplingError("supervised baseline: empty training pool");
  TrainResult result{init, {}, 0, -1.0};
  Model& model = init;
  Rng rng = make_rng(cfg.rng_seed, 0x5B);
  std::vector<std::size_t> order(train_pool.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size, ++batches) {
      Pool batch;
      std::vector<std::size_t> labels;
      for (std::size_t i = begin; i < std::min(order.size(), begin + cfg.batch_size); ++i) {
        batch.push_back(train_pool[order[i]]);
        labels.push_back(train_pool[order[i]]->label);
      }
      model.zero_grad();
      Tensor logits = linear_logits(embed(batch, model, NormMode::train), model.w);
      Tensor loss = scale(sum(select_per_row(log_softmax_rows(logits), labels)),
                          -1.0 / static_cast<double>(batch.size()));
      detail::check_finite_loss(loss, epoch, batches);
      loss.backward();
      detail::all_sgd_step(model, cfg.supervised_learning_rate);
      loss_sum += loss.item();
    }
    EpochLog entry{epoch, loss_sum / static_cast<double>(batches), supervised_accuracy(model, val_pool)};
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
    if (entry.val_accuracy > result.best_val_accuracy) {
      result.best_val_accuracy = entry.val_accuracy;
      result.best_epoch = epoch;
      result.model = model;
    }
  }
  return result;
}

}  // namespace evofa
