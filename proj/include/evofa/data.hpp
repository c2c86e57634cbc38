#pragma once

// Samples, datasets, pools, and the intra/inter-subject split protocols.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "evofa/error.hpp"
#include "evofa/rng.hpp"
#include "evofa/tensor.hpp"

namespace evofa {

struct FeatureSchema {
  std::size_t electrodes = 0;
  std::size_t bands = 0;

  bool operator==(const FeatureSchema&) const = default;
};

struct LabeledSample {
  int subject_id = 0;
  int session_id = 0;
  int trial_id = 0;
  std::size_t time_index = 0;  // chronological within (subject, session)
  Tensor features;             // [electrodes x bands]
  std::size_t label = 0;
};

inline auto ordering_key(const LabeledSample& s) {
  return std::make_tuple(s.subject_id, s.session_id, s.trial_id, s.time_index);
}

/// Immutable collection sorted by (subject, session, trial, time_index).
struct DatasetIndex {
  std::vector<LabeledSample> samples;
  std::size_t num_classes = 0;
  FeatureSchema schema;
  std::vector<std::string> class_names;

  std::vector<int> subjects() const {
    std::set<int> ids;
    for (const auto& s : samples) ids.insert(s.subject_id);
    return {ids.begin(), ids.end()};
  }

  std::vector<int> sessions_of(int subject) const {
    std::set<int> ids;
    for (const auto& s : samples)
      if (s.subject_id == subject) ids.insert(s.session_id);
    return {ids.begin(), ids.end()};
  }

  /// Checks ordering, schema, label range, finiteness and chronology.
  void validate() const {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& s = samples[i];
      if (s.features.shape() != Shape{schema.electrodes, schema.bands}) {
        throw SchemaError("sample " + std::to_string(i) + " has feature shape " +
                          shape_str(s.features.shape()));
      }
      if (s.label >= num_classes) {
        throw DataError("sample " + std::to_string(i) + " label " + std::to_string(s.label) +
                        " exceeds class count " + std::to_string(num_classes));
      }
      if (!s.features.is_finite()) {
        throw DataError("non-finite features at subject " + std::to_string(s.subject_id) +
                        " session " + std::to_string(s.session_id) + " trial " +
                        std::to_string(s.trial_id) + " time " + std::to_string(s.time_index));
      }
      if (i > 0) {
        const auto& prev = samples[i - 1];
        if (!(ordering_key(prev) < ordering_key(s))) {
          throw DataError("samples out of order at index " + std::to_string(i));
        }
        if (prev.subject_id == s.subject_id && prev.session_id == s.session_id &&
            prev.time_index >= s.time_index) {
          throw DataError("time_index not strictly increasing at index " + std::to_string(i));
        }
      }
    }
  }
};

/// Non-owning view of dataset samples; the dataset must outlive it.
using Pool = std::vector<const LabeledSample*>;

inline Pool select(const DatasetIndex& ds, const std::function<bool(const LabeledSample&)>& keep) {
  Pool out;
  for (const auto& s : ds.samples)
    if (keep(s)) out.push_back(&s);
  return out;
}

/// Samples of each class, in pool order.
inline std::map<std::size_t, Pool> by_class(const Pool& pool) {
  std::map<std::size_t, Pool> out;
  for (const auto* s : pool) out[s->label].push_back(s);
  return out;
}

// ---------------------------------------------------------------------------
// Splits

enum class SplitKind { intra, inter };

inline const char* to_string(SplitKind kind) { return kind == SplitKind::intra ? "intra" : "inter"; }

/// A predicate over (subject, session) represented by its explicit cell set.
struct CellSet {
  std::set<std::pair<int, int>> cells;

  bool contains(int subject, int session) const { return cells.count({subject, session}) > 0; }
  bool operator()(const LabeledSample& s) const { return contains(s.subject_id, s.session_id); }

  std::set<int> subjects() const {
    std::set<int> out;
    for (const auto& [subj, sess] : cells) out.insert(subj);
    return out;
  }
};

struct SplitSpec {
  SplitKind kind = SplitKind::intra;
  CellSet train, val, test;
  int test_subject = 0;
  int session = 0;  // inter protocol: the session all parts are restricted to

  bool disjoint() const {
    auto overlaps = [](const CellSet& a, const CellSet& b) {
      for (const auto& c : a.cells)
        if (b.cells.count(c)) return true;
      return false;
    };
    return !overlaps(train, val) && !overlaps(train, test) && !overlaps(val, test);
  }

  Pool train_pool(const DatasetIndex& ds) const { return select(ds, train); }
  Pool val_pool(const DatasetIndex& ds) const { return select(ds, val); }
  Pool test_pool(const DatasetIndex& ds) const { return select(ds, test); }
};

/// Session 1 trains, session 2 validates, session 3 tests.
inline SplitSpec make_intra_split(const DatasetIndex& ds, int subject_id) {
  const auto sessions = ds.sessions_of(subject_id);
  for (int needed : {1, 2, 3}) {
    if (!std::binary_search(sessions.begin(), sessions.end(), needed)) {
      throw ProtocolError("intra split: subject " + std::to_string(subject_id) + " lacks session " +
                          std::to_string(needed));
    }
  }
  SplitSpec split;
  split.kind = SplitKind::intra;
  split.test_subject = subject_id;
  split.session = 3;
  split.train.cells = {{subject_id, 1}};
  split.val.cells = {{subject_id, 2}};
  split.test.cells = {{subject_id, 3}};
  return split;
}

inline constexpr std::size_t kInterTrainSubjects = 12;

/// Test subject vs 12 randomly drawn training subjects; the rest validate.
/// Everything is restricted to `session_id`.
inline SplitSpec make_inter_split(const DatasetIndex& ds, int session_id, int test_subject, Rng& rng) {
  std::vector<int> candidates;
  bool have_test = false;
  for (int subj : ds.subjects()) {
    const auto sessions = ds.sessions_of(subj);
    if (!std::binary_search(sessions.begin(), sessions.end(), session_id)) continue;
    if (subj == test_subject) {
      have_test = true;
    } else {
      candidates.push_back(subj);
    }
  }
  if (!have_test) {
    throw ProtocolError("inter split: test subject " + std::to_string(test_subject) +
                        " has no session " + std::to_string(session_id));
  }
  if (candidates.size() + 1 < kInterTrainSubjects + 2) {
    throw ProtocolError("inter split: need at least " + std::to_string(kInterTrainSubjects + 2) +
                        " subjects, found " + std::to_string(candidates.size() + 1));
  }
  const auto picked = sample_without_replacement(candidates.size(), kInterTrainSubjects, rng);
  std::set<std::size_t> picked_set(picked.begin(), picked.end());

  SplitSpec split;
  split.kind = SplitKind::inter;
  split.test_subject = test_subject;
  split.session = session_id;
  split.test.cells = {{test_subject, session_id}};
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    (picked_set.count(i) ? split.train : split.val).cells.insert({candidates[i], session_id});
  }
  return split;
}

}  // namespace evofa
