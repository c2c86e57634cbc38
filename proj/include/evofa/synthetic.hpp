#pragma once

// Synthetic drifting feature generator.
//
// Each class k has a base mean class_separation * q_k, with q_k orthonormal in
// the flattened (electrodes * bands) space, so class means sit sqrt(2) *
// class_separation apart. Each subject gets an offset o_s ~ N(0, scale^2 / D)
// and a unit drift direction v_s. A sample at session time tau has mean
//   base_k + o_s + intra_drift_rate * tau * v_s
// with tau = (session - 1) + position_in_session / samples_in_session, so one
// session spans one unit of time. Samples add i.i.d. N(0, noise_std^2) noise.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "evofa/data.hpp"
#include "evofa/error.hpp"
#include "evofa/rng.hpp"

namespace evofa {

struct DriftConfig {
  std::size_t num_subjects = 15;
  std::size_t num_sessions = 3;
  std::size_t trials_per_session = 15;
  std::size_t samples_per_trial = 20;
  std::size_t num_classes = 3;
  std::size_t n_electrodes = 8;
  std::size_t d_bands = 4;
  double class_separation = 5.0;
  double intra_drift_rate = 0.0;
  double inter_subject_offset_scale = 0.0;
  double noise_std = 1.0;
  std::uint64_t rng_seed = 1;

  void validate() const {
    if (!num_subjects || !num_sessions || !trials_per_session || !samples_per_trial || !num_classes ||
        !n_electrodes || !d_bands) {
      throw ConfigError("drift config: all counts must be >= 1");
    }
    if (class_separation < 0 || intra_drift_rate < 0 || inter_subject_offset_scale < 0 || noise_std < 0) {
      throw ConfigError("drift config: separation, rates, scales and noise must be >= 0");
    }
    if (num_classes > n_electrodes * d_bands) {
      throw ConfigError("drift config: more classes than feature dimensions");
    }
  }
};

namespace detail {

inline Eigen::MatrixXd random_orthonormal_columns(std::size_t rows, std::size_t cols, Rng& rng) {
  std::normal_distribution<double> normal;
  Eigen::MatrixXd g(rows, cols);
  for (Eigen::Index j = 0; j < g.cols(); ++j)
    for (Eigen::Index i = 0; i < g.rows(); ++i) g(i, j) = normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  return qr.householderQ() * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(rows),
                                                       static_cast<Eigen::Index>(cols));
}

}  // namespace detail

inline DatasetIndex generate_synthetic_drift(const DriftConfig& cfg) {
  cfg.validate();
  const std::size_t D = cfg.n_electrodes * cfg.d_bands;
  Rng structure_rng = make_rng(cfg.rng_seed, 0);
  std::normal_distribution<double> normal;

  const Eigen::MatrixXd class_dirs = detail::random_orthonormal_columns(D, cfg.num_classes, structure_rng);

  DatasetIndex ds;
  ds.num_classes = cfg.num_classes;
  ds.schema = {cfg.n_electrodes, cfg.d_bands};
  for (std::size_t k = 0; k < cfg.num_classes; ++k) ds.class_names.push_back("class" + std::to_string(k));

  const std::size_t per_session = cfg.trials_per_session * cfg.samples_per_trial;
  for (std::size_t subj = 0; subj < cfg.num_subjects; ++subj) {
    Rng subject_rng = make_rng(cfg.rng_seed, 1 + subj);
    std::vector<double> offset(D), drift_dir(D);
    const double offset_sd = cfg.inter_subject_offset_scale / std::sqrt(static_cast<double>(D));
    for (auto& v : offset) v = offset_sd * normal(subject_rng);
    double norm = 0.0;
    for (auto& v : drift_dir) {
      v = normal(subject_rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : drift_dir) v /= norm;

    // Noise stream is separate so changing drift parameters keeps the noise fixed.
    Rng noise_rng = make_rng(cfg.rng_seed, 1'000'000 + subj);
    for (std::size_t sess = 0; sess < cfg.num_sessions; ++sess) {
      std::size_t time_index = 0;
      for (std::size_t trial = 0; trial < cfg.trials_per_session; ++trial) {
        const std::size_t label = trial % cfg.num_classes;
        for (std::size_t t = 0; t < cfg.samples_per_trial; ++t, ++time_index) {
          const double tau = static_cast<double>(sess) +
                             static_cast<double>(time_index) / static_cast<double>(per_session);
          std::vector<double> values(D);
          for (std::size_t j = 0; j < D; ++j) {
            values[j] = cfg.class_separation * class_dirs(static_cast<Eigen::Index>(j),
                                                          static_cast<Eigen::Index>(label)) +
                        offset[j] + cfg.intra_drift_rate * tau * drift_dir[j] +
                        cfg.noise_std * normal(noise_rng);
          }
          LabeledSample s;
          s.subject_id = static_cast<int>(subj + 1);
          s.session_id = static_cast<int>(sess + 1);
          s.trial_id = static_cast<int>(trial + 1);
          s.time_index = time_index;
          s.features = Tensor({cfg.n_electrodes, cfg.d_bands}, std::move(values));
          s.label = label;
          ds.samples.push_back(std::move(s));
        }
      }
    }
  }
  return ds;
}

}  // namespace evofa
