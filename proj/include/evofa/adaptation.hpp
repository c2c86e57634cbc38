#pragma once

// Evolvable fast adaptation at test time.
//
// Before an episode is classified, the adapter phi is aligned to an ordered
// set of source snapshots:
//   inner loop  phi_{i+1} = phi_i - eta_in * grad_phi MMD(f_phi_i(S_i.spt), f_phi_i(T))
//   outer step  phi      <- phi   - eta_out * grad L(phi_n),
//               L(phi_n) = (1/n) sum_i MMD(f_phi_n(S_i.qry), f_phi_n(T))
// where f = adapter(encoder(.)) and T holds unlabeled target samples. The
// outer gradient is first-order: it is taken at phi_n and applied to phi.
// The encoder and head stay frozen throughout.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "evofa/backbone.hpp"
#include "evofa/data.hpp"
#include "evofa/error.hpp"
#include "evofa/fsl.hpp"
#include "evofa/mmd.hpp"
#include "evofa/parallel.hpp"
#include "evofa/param_group.hpp"
#include "evofa/rng.hpp"

namespace evofa {

struct Snapshot {
  Pool spt;
  Pool qry;
  int tag = 0;  // time bucket (intra) or subject id (inter)
};

struct SnapshotSet {
  std::vector<Snapshot> snapshots;
  SplitKind ordering = SplitKind::intra;

  std::size_t size() const { return snapshots.size(); }
};

struct AdaptConfig {
  std::size_t n_snapshots = 5;
  std::size_t snapshot_size = 32;  // per half
  std::size_t subject_cap = 0;     // inter: max subjects per snapshot set, 0 = all
  double eta_in = 1e-2;
  double eta_out = 1e-2;
  std::size_t max_iter = 1;
  bool resample_each_iter = true;
  std::optional<KernelSpec> kernel;  // nullopt: median heuristic on the current embeddings

  void validate() const {
    if (!n_snapshots || !snapshot_size) throw ConfigError("adapt config: n_snapshots and snapshot_size must be >= 1");
    if (eta_in < 0 || eta_out < 0) throw ConfigError("adapt config: learning rates must be >= 0");
    if (kernel) kernel->validate();
  }
};

namespace detail {

/// Draws 2 * size samples from `members` and splits them into halves.
inline std::pair<Pool, Pool> split_halves(const Pool& members, std::size_t size, Rng& rng) {
  const auto idx = sample_without_replacement(members.size(), 2 * size, rng);
  Pool spt, qry;
  for (std::size_t i = 0; i < size; ++i) spt.push_back(members[idx[i]]);
  for (std::size_t i = size; i < 2 * size; ++i) qry.push_back(members[idx[i]]);
  return {spt, qry};
}

}  // namespace detail

/// Cuts the chronologically ordered pool into n contiguous equal buckets and
/// samples one snapshot from each, earliest first.
inline SnapshotSet sample_snapshots_intra(const Pool& train_pool, const AdaptConfig& cfg, Rng& rng) {
  cfg.validate();
  Pool ordered = train_pool;
  std::stable_sort(ordered.begin(), ordered.end(), [](const LabeledSample* a, const LabeledSample* b) {
    return std::make_tuple(a->session_id, a->time_index) < std::make_tuple(b->session_id, b->time_index);
  });
  const std::size_t n = cfg.n_snapshots, total = ordered.size();
  SnapshotSet set;
  set.ordering = SplitKind::intra;
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t begin = b * total / n, end = (b + 1) * total / n;
    if (end - begin < 2 * cfg.snapshot_size) {
      throw SamplingError("snapshot bucket " + std::to_string(b) + " holds " + std::to_string(end - begin) +
                          " samples, need " + std::to_string(2 * cfg.snapshot_size));
    }
    Pool bucket(ordered.begin() + static_cast<std::ptrdiff_t>(begin),
                ordered.begin() + static_cast<std::ptrdiff_t>(end));
    auto [spt, qry] = detail::split_halves(bucket, cfg.snapshot_size, rng);
    set.snapshots.push_back({std::move(spt), std::move(qry), static_cast<int>(b)});
  }
  return set;
}

/// One snapshot per training subject (optionally a random subset), in
/// ascending subject order.
inline SnapshotSet sample_snapshots_inter(const Pool& train_pool, const AdaptConfig& cfg, Rng& rng) {
  cfg.validate();
  std::map<int, Pool> per_subject;
  for (const auto* s : train_pool) per_subject[s->subject_id].push_back(s);
  if (per_subject.empty()) throw SamplingError("inter snapshots: no training subjects");
  std::vector<int> subjects;
  for (const auto& [id, members] : per_subject) subjects.push_back(id);
  if (cfg.subject_cap && cfg.subject_cap < subjects.size()) {
    auto picked = sample_without_replacement(subjects.size(), cfg.subject_cap, rng);
    std::sort(picked.begin(), picked.end());
    std::vector<int> kept;
    for (auto i : picked) kept.push_back(subjects[i]);
    subjects = std::move(kept);
  }
  SnapshotSet set;
  set.ordering = SplitKind::inter;
  for (int id : subjects) {
    const Pool& members = per_subject.at(id);
    if (members.size() < 2 * cfg.snapshot_size) {
      throw SamplingError("inter snapshots: subject " + std::to_string(id) + " has " +
                          std::to_string(members.size()) + " samples, need " + std::to_string(2 * cfg.snapshot_size));
    }
    auto [spt, qry] = detail::split_halves(members, cfg.snapshot_size, rng);
    set.snapshots.push_back({std::move(spt), std::move(qry), id});
  }
  return set;
}

inline SnapshotSet sample_snapshots(const Pool& train_pool, SplitKind kind, const AdaptConfig& cfg, Rng& rng) {
  return kind == SplitKind::intra ? sample_snapshots_intra(train_pool, cfg, rng)
                                  : sample_snapshots_inter(train_pool, cfg, rng);
}

// ---------------------------------------------------------------------------
// Encoder outputs are fixed during adaptation, so they are computed once.

struct EncodedSnapshots {
  std::vector<Tensor> spt;
  std::vector<Tensor> qry;
};

inline Tensor encode_frozen(const Pool& samples, Model& model) {
  NoGradGuard no_grad;
  return encode_batch(stack_features(samples), model, NormMode::eval);
}

inline EncodedSnapshots encode_snapshots(const SnapshotSet& set, Model& model) {
  EncodedSnapshots out;
  for (const auto& s : set.snapshots) {
    out.spt.push_back(encode_frozen(s.spt, model));
    out.qry.push_back(encode_frozen(s.qry, model));
  }
  return out;
}

/// Kernel for one MMD evaluation: the configured one, or the median heuristic
/// on the current (detached) embeddings.
inline KernelSpec resolve_kernel(const AdaptConfig& cfg, const Tensor& a, const Tensor& b) {
  if (cfg.kernel) return *cfg.kernel;
  return KernelSpec::around(median_heuristic(a, b));
}

/// MMD^2 between adapted source and target encodings under `phi`.
inline Tensor alignment_mmd(const Tensor& source_enc, const Tensor& target_enc, const ParamGroup& phi,
                            const std::optional<KernelSpec>& kernel, const AdaptConfig& cfg) {
  Tensor s = adapt(source_enc, phi);
  Tensor t = adapt(target_enc, phi);
  return mmd2(s, t, kernel ? *kernel : resolve_kernel(cfg, s, t));
}

namespace detail {

inline void check_finite_grads(const ParamGroup& group, const char* stage, std::size_t step) {
  for (const auto& e : group.entries()) {
    if (!e.value.has_grad()) continue;
    for (double g : e.value.grad())
      if (!std::isfinite(g)) {
        throw Error(std::string(stage) + ": non-finite gradient in '" + e.name + "' at step " + std::to_string(step));
      }
  }
}

inline ParamGroup trainable_clone(const ParamGroup& phi) {
  ParamGroup out = phi.clone();
  for (auto& e : out.entries()) e.value.set_requires_grad(true);
  return out;
}

inline ParamGroup inner_adapt_encoded(const ParamGroup& phi, const EncodedSnapshots& enc, const Tensor& target_enc,
                                      const AdaptConfig& cfg) {
  ParamGroup current = trainable_clone(phi);
  for (std::size_t i = 0; i < enc.spt.size(); ++i) {
    Tensor loss = alignment_mmd(enc.spt[i], target_enc, current, std::nullopt, cfg);
    if (!std::isfinite(loss.item())) throw Error("inner_adapt: non-finite MMD at snapshot " + std::to_string(i));
    current.zero_grad();
    loss.backward();
    check_finite_grads(current, "inner_adapt", i);
    sgd_step(current, cfg.eta_in);
  }
  return current;
}

/// Mean qry-vs-target MMD^2 under `phi`.
inline Tensor outer_loss_encoded(const ParamGroup& phi, const EncodedSnapshots& enc, const Tensor& target_enc,
                                 const AdaptConfig& cfg, const std::optional<KernelSpec>& kernel = std::nullopt) {
  Tensor total;
  for (const auto& q : enc.qry) {
    Tensor term = alignment_mmd(q, target_enc, phi, kernel, cfg);
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, 1.0 / static_cast<double>(enc.qry.size()));
}

/// Applies model.phi -= eta_out * grad L(phi_n). Returns L(phi_n).
inline double outer_update_encoded(Model& model, const ParamGroup& phi_n, const EncodedSnapshots& enc,
                                   const Tensor& target_enc, const AdaptConfig& cfg) {
  ParamGroup at_n = trainable_clone(phi_n);
  Tensor loss = outer_loss_encoded(at_n, enc, target_enc, cfg);
  if (!std::isfinite(loss.item())) throw Error("outer_update: non-finite alignment loss");
  if (!loss.requires_grad()) return loss.item();
  loss.backward();
  check_finite_grads(at_n, "outer_update", 0);
  auto& dst = model.phi.entries();
  const auto& src = at_n.entries();
  for (std::size_t k = 0; k < dst.size(); ++k) {
    if (!src[k].value.has_grad()) continue;
    auto p = dst[k].value.mutable_data();
    const auto g = src[k].value.grad();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= cfg.eta_out * g[i];
  }
  return loss.item();
}

}  // namespace detail

/// n sequential adapter steps, one per snapshot's spt half. Returns phi_n and
/// leaves model.phi untouched.
inline ParamGroup inner_adapt(Model& model, const SnapshotSet& snapshots, const Pool& target_spt,
                              const AdaptConfig& cfg) {
  cfg.validate();
  if (target_spt.empty()) throw ArgumentError("inner_adapt: empty target set");
  return detail::inner_adapt_encoded(model.phi, encode_snapshots(snapshots, model), encode_frozen(target_spt, model),
                                     cfg);
}

/// First-order outer step on model.phi. Returns L(phi_n) before the step.
inline double outer_update(Model& model, const ParamGroup& phi_n, const SnapshotSet& snapshots,
                           const Pool& target_spt, const AdaptConfig& cfg) {
  cfg.validate();
  if (target_spt.empty()) throw ArgumentError("outer_update: empty target set");
  return detail::outer_update_encoded(model, phi_n, encode_snapshots(snapshots, model),
                                      encode_frozen(target_spt, model), cfg);
}

/// Source of snapshot sets per iteration.
using SnapshotSource = std::function<SnapshotSet(std::size_t iteration)>;

struct AdaptRunReport {
  std::vector<double> outer_losses;
};

/// max_iter rounds of {snapshots, inner_adapt, outer_update}, in place on
/// model.phi. `source` is queried once, or every round if resample_each_iter.
inline AdaptRunReport evofa_run(Model& model, const SnapshotSource& source, const Pool& target_spt,
                                const AdaptConfig& cfg) {
  cfg.validate();
  AdaptRunReport report;
  if (cfg.max_iter == 0) return report;
  if (target_spt.empty()) throw ArgumentError("evofa_run: empty target set");
  const Tensor target_enc = encode_frozen(target_spt, model);
  std::optional<EncodedSnapshots> enc;
  for (std::size_t t = 0; t < cfg.max_iter; ++t) {
    if (!enc || cfg.resample_each_iter) enc = encode_snapshots(source(t), model);
    ParamGroup phi_n = detail::inner_adapt_encoded(model.phi, *enc, target_enc, cfg);
    report.outer_losses.push_back(detail::outer_update_encoded(model, phi_n, *enc, target_enc, cfg));
  }
  return report;
}

inline AdaptRunReport evofa_run(Model& model, const SnapshotSet& snapshots, const Pool& target_spt,
                                const AdaptConfig& cfg) {
  return evofa_run(model, [&](std::size_t) { return snapshots; }, target_spt, cfg);
}

// ---------------------------------------------------------------------------
// Episode evaluation

struct EvalConfig {
  std::size_t n_way = 3, k_shot = 5, q_query = 10;
  std::size_t episodes = 200;
  std::uint64_t seed = 1;
  bool adapt = true;
  std::size_t extra_unlabeled = 0;  // unlabeled target samples added to the support embeddings
  bool persist_adaptation = false;
  std::size_t threads = 0;  // 0: thread_budget()
};

struct EvalReport {
  std::vector<double> accuracies;       // per episode
  std::vector<std::uint64_t> digests;   // per episode
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation across episodes
};

inline void summarize(EvalReport& r) {
  const auto n = static_cast<double>(r.accuracies.size());
  double s = 0.0;
  for (double a : r.accuracies) s += a;
  r.mean = n > 0 ? s / n : 0.0;
  double v = 0.0;
  for (double a : r.accuracies) v += (a - r.mean) * (a - r.mean);
  r.std = n > 1 ? std::sqrt(v / (n - 1)) : 0.0;
}

/// Model sharing theta and w with `model` but owning a private copy of phi.
inline Model with_private_phi(const Model& model) {
  Model view;
  view.config = model.config;
  view.theta = model.theta;  // ParamGroup copies share tensors
  view.w = model.w;
  view.phi = model.phi.clone();
  return view;
}

/// Stream for snapshot and extra-target sampling, disjoint from the episode stream.
inline std::uint64_t adaptation_seed(std::uint64_t seed) { return derive_seed(seed, 0xADA97); }

/// Unlabeled target set for one episode: its support samples plus
/// `extra` samples from the rest of the pool (never the episode's queries).
inline Pool target_set(const Episode& ep, const Pool& test_pool, std::size_t extra, Rng& rng) {
  Pool target = ep.support;
  if (!extra) return target;
  std::set<const LabeledSample*> used(ep.support.begin(), ep.support.end());
  used.insert(ep.query.begin(), ep.query.end());
  Pool rest;
  for (const auto* s : test_pool)
    if (!used.count(s)) rest.push_back(s);
  for (auto i : sample_without_replacement(rest.size(), extra, rng)) target.push_back(rest[i]);
  return target;
}

/// Per test episode: sample, adapt a private phi to snapshots of the training
/// pool, classify the query. With adaptation disabled this is plain FSL
/// evaluation over the identical episode stream.
inline EvalReport evofa_test(const Model& model, const Pool& test_pool, const Pool& train_pool, SplitKind split_kind,
                             const EvalConfig& eval, const AdaptConfig& adapt_cfg) {
  adapt_cfg.validate();
  EvalReport report;
  report.accuracies.assign(eval.episodes, 0.0);
  report.digests.assign(eval.episodes, 0);
  const std::uint64_t adapt_master = adaptation_seed(eval.seed);

  Model persistent = with_private_phi(model);
  auto run_episode = [&](std::size_t i, Model& local) {
    Rng ep_rng = make_rng(eval.seed, i);
    Episode ep = sample_episode(test_pool, eval.n_way, eval.k_shot, eval.q_query, ep_rng);
    report.digests[i] = ep.digest();
    if (eval.adapt) {
      Rng adapt_rng = make_rng(adapt_master, i);
      Pool target = target_set(ep, test_pool, eval.extra_unlabeled, adapt_rng);
      evofa_run(local, [&](std::size_t) { return sample_snapshots(train_pool, split_kind, adapt_cfg, adapt_rng); },
                target, adapt_cfg);
    }
    report.accuracies[i] = classify_query(ep, local).accuracy;
  };

  if (eval.persist_adaptation) {
    for (std::size_t i = 0; i < eval.episodes; ++i) run_episode(i, persistent);
  } else {
    parallel_for(
        eval.episodes,
        [&](std::size_t i) {
          Model local = with_private_phi(model);
          run_episode(i, local);
        },
        eval.threads ? eval.threads : thread_budget());
  }
  summarize(report);
  return report;
}

}  // namespace evofa
