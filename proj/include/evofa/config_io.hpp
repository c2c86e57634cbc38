#pragma once

// JSON (de)serialization for every configuration struct. Readers reject
// unknown keys and wrong types with ConfigError; absent keys keep defaults.

#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "evofa/adaptation.hpp"
#include "evofa/backbone.hpp"
#include "evofa/error.hpp"
#include "evofa/fsl.hpp"
#include "evofa/synthetic.hpp"

namespace evofa {

using Json = nlohmann::json;

namespace detail {

/// Reads fields of one JSON object, tracking which keys were consumed.
class FieldReader {
 public:
  FieldReader(const Json& j, std::string context) : j_(j), context_(std::move(context)) {
    if (!j_.is_object()) throw ConfigError(context_ + ": expected a JSON object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return;
    try {
      if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
        if (!it->is_number_unsigned()) throw ConfigError(context_ + "." + key + ": expected a nonnegative integer");
      }
      out = it->template get<T>();
    } catch (const Json::exception& e) {
      throw ConfigError(context_ + "." + key + ": " + e.what());
    }
  }

  const Json* sub(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() || it->is_null() ? nullptr : &*it;
  }

  const std::string& context() const { return context_; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(context_ + ": unknown key '" + it.key() + "'");
  }

 private:
  const Json& j_;
  std::string context_;
  std::set<std::string> seen_;
};

}  // namespace detail

// --- DriftConfig -----------------------------------------------------------

inline Json to_json(const DriftConfig& c) {
  return {{"num_subjects", c.num_subjects},
          {"num_sessions", c.num_sessions},
          {"trials_per_session", c.trials_per_session},
          {"samples_per_trial", c.samples_per_trial},
          {"num_classes", c.num_classes},
          {"n_electrodes", c.n_electrodes},
          {"d_bands", c.d_bands},
          {"class_separation", c.class_separation},
          {"intra_drift_rate", c.intra_drift_rate},
          {"inter_subject_offset_scale", c.inter_subject_offset_scale},
          {"noise_std", c.noise_std},
          {"rng_seed", c.rng_seed}};
}

inline DriftConfig drift_config_from_json(const Json& j, const std::string& ctx = "drift") {
  DriftConfig c;
  detail::FieldReader r(j, ctx);
  r.get("num_subjects", c.num_subjects);
  r.get("num_sessions", c.num_sessions);
  r.get("trials_per_session", c.trials_per_session);
  r.get("samples_per_trial", c.samples_per_trial);
  r.get("num_classes", c.num_classes);
  r.get("n_electrodes", c.n_electrodes);
  r.get("d_bands", c.d_bands);
  r.get("class_separation", c.class_separation);
  r.get("intra_drift_rate", c.intra_drift_rate);
  r.get("inter_subject_offset_scale", c.inter_subject_offset_scale);
  r.get("noise_std", c.noise_std);
  r.get("rng_seed", c.rng_seed);
  r.finish();
  c.validate();
  return c;
}

// --- BackboneConfig --------------------------------------------------------

inline Json to_json(const BackboneConfig& c) {
  return {{"n_electrodes", c.n_electrodes},
          {"d_bands", c.d_bands},
          {"g2g_channels", c.g2g_channels},
          {"conv_channels", c.conv_channels},
          {"embedding_dim", c.embedding_dim},
          {"adapter_hidden", c.adapter_hidden},
          {"head_kind", to_string(c.head_kind)},
          {"num_classes", c.num_classes},
          {"matching_temperature", c.matching_temperature},
          {"relation_hidden", c.relation_hidden},
          {"init_seed", c.init_seed}};
}

inline BackboneConfig backbone_config_from_json(const Json& j, const std::string& ctx = "backbone",
                                                bool validate = true) {
  BackboneConfig c;
  detail::FieldReader r(j, ctx);
  r.get("n_electrodes", c.n_electrodes);
  r.get("d_bands", c.d_bands);
  r.get("g2g_channels", c.g2g_channels);
  r.get("conv_channels", c.conv_channels);
  r.get("embedding_dim", c.embedding_dim);
  r.get("adapter_hidden", c.adapter_hidden);
  std::string head = to_string(c.head_kind);
  r.get("head_kind", head);
  c.head_kind = head_kind_from_string(head);
  r.get("num_classes", c.num_classes);
  r.get("matching_temperature", c.matching_temperature);
  r.get("relation_hidden", c.relation_hidden);
  r.get("init_seed", c.init_seed);
  r.finish();
  if (validate) c.validate();
  return c;
}

// --- TrainConfig -----------------------------------------------------------

inline Json to_json(const TrainConfig& c) {
  return {{"episodes_per_epoch", c.episodes_per_epoch},
          {"max_epochs", c.max_epochs},
          {"learning_rate", c.learning_rate},
          {"n_way", c.n_way},
          {"k_shot", c.k_shot},
          {"q_query", c.q_query},
          {"validation_episodes", c.validation_episodes},
          {"rng_seed", c.rng_seed},
          {"batch_size", c.batch_size},
          {"supervised_learning_rate", c.supervised_learning_rate}};
}

inline TrainConfig train_config_from_json(const Json& j, const std::string& ctx = "train") {
  TrainConfig c;
  detail::FieldReader r(j, ctx);
  r.get("episodes_per_epoch", c.episodes_per_epoch);
  r.get("max_epochs", c.max_epochs);
  r.get("learning_rate", c.learning_rate);
  r.get("n_way", c.n_way);
  r.get("k_shot", c.k_shot);
  r.get("q_query", c.q_query);
  r.get("validation_episodes", c.validation_episodes);
  r.get("rng_seed", c.rng_seed);
  r.get("batch_size", c.batch_size);
  r.get("supervised_learning_rate", c.supervised_learning_rate);
  r.finish();
  c.validate();
  return c;
}

// --- AdaptConfig -----------------------------------------------------------

inline Json to_json(const AdaptConfig& c) {
  Json j = {{"n_snapshots", c.n_snapshots},   {"snapshot_size", c.snapshot_size},
            {"subject_cap", c.subject_cap},   {"eta_in", c.eta_in},
            {"eta_out", c.eta_out},           {"max_iter", c.max_iter},
            {"resample_each_iter", c.resample_each_iter}};
  if (c.kernel) {
    j["kernel"] = {{"bandwidths", c.kernel->bandwidths}, {"weights", c.kernel->weights}};
  } else {
    j["kernel"] = "median";
  }
  return j;
}

inline AdaptConfig adapt_config_from_json(const Json& j, const std::string& ctx = "adapt") {
  AdaptConfig c;
  detail::FieldReader r(j, ctx);
  r.get("n_snapshots", c.n_snapshots);
  r.get("snapshot_size", c.snapshot_size);
  r.get("subject_cap", c.subject_cap);
  r.get("eta_in", c.eta_in);
  r.get("eta_out", c.eta_out);
  r.get("max_iter", c.max_iter);
  r.get("resample_each_iter", c.resample_each_iter);
  if (const Json* k = r.sub("kernel")) {
    if (k->is_string()) {
      if (k->get<std::string>() != "median") throw ConfigError(ctx + ".kernel: expected \"median\" or an object");
    } else {
      KernelSpec spec;
      detail::FieldReader kr(*k, ctx + ".kernel");
      kr.get("bandwidths", spec.bandwidths);
      kr.get("weights", spec.weights);
      kr.finish();
      c.kernel = spec;
    }
  }
  r.finish();
  c.validate();
  return c;
}

// --- EvalConfig ------------------------------------------------------------

inline Json to_json(const EvalConfig& c) {
  return {{"n_way", c.n_way},
          {"k_shot", c.k_shot},
          {"q_query", c.q_query},
          {"episodes", c.episodes},
          {"extra_unlabeled", c.extra_unlabeled},
          {"persist_adaptation", c.persist_adaptation}};
}

inline EvalConfig eval_config_from_json(const Json& j, const std::string& ctx = "eval") {
  EvalConfig c;
  detail::FieldReader r(j, ctx);
  r.get("n_way", c.n_way);
  r.get("k_shot", c.k_shot);
  r.get("q_query", c.q_query);
  r.get("episodes", c.episodes);
  r.get("extra_unlabeled", c.extra_unlabeled);
  r.get("persist_adaptation", c.persist_adaptation);
  r.finish();
  if (!c.n_way || !c.k_shot || !c.q_query || !c.episodes) throw ConfigError(ctx + ": N, K, Q and episodes must be >= 1");
  return c;
}

}  // namespace evofa
