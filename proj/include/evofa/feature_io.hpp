#pragma once

// Portable feature container: a JSON manifest plus one binary per trial.
//
// Manifest:
//   {"schema": {"electrodes": n, "bands": d},
//    "classes": ["negative", "neutral", "positive"],
//    "subjects": [{"id": 1, "sessions": [{"id": 1, "trials": [
//        {"id": 1, "label": 0, "file": "s1/sess1/t1.bin", "count": 235}]}]}]}
//
// Trial binary: "EVFA", u32 version, then count x n x d little-endian float32,
// row-major. Each stored row is one sample; no windowing is applied.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "evofa/binary_io.hpp"
#include "evofa/data.hpp"
#include "evofa/error.hpp"

namespace evofa {

inline constexpr char kFeatureMagic[4] = {'E', 'V', 'F', 'A'};
inline constexpr std::uint32_t kFeatureVersion = 1;
inline constexpr std::size_t kFeatureHeaderBytes = 8;

namespace detail {

inline std::size_t label_of(const nlohmann::json& trial, const std::vector<std::string>& classes) {
  const auto& label = trial.at("label");
  if (label.is_string()) {
    auto it = std::find(classes.begin(), classes.end(), label.get<std::string>());
    if (it == classes.end()) throw SchemaError("unknown class name '" + label.get<std::string>() + "'");
    return static_cast<std::size_t>(it - classes.begin());
  }
  const auto id = label.get<long long>();
  if (id < 0 || static_cast<std::size_t>(id) >= classes.size()) {
    throw SchemaError("label " + std::to_string(id) + " outside class map");
  }
  return static_cast<std::size_t>(id);
}

template <typename T>
std::vector<nlohmann::json> sorted_by_id(const nlohmann::json& array) {
  std::vector<nlohmann::json> items(array.begin(), array.end());
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    return a.at("id").template get<T>() < b.at("id").template get<T>();
  });
  return items;
}

}  // namespace detail

inline DatasetIndex import_features(const std::filesystem::path& manifest_path) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(io::read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw IngestError("manifest '" + manifest_path.string() + "': " + e.what());
  }
  const auto base = manifest_path.parent_path();

  DatasetIndex ds;
  try {
    ds.schema.electrodes = manifest.at("schema").at("electrodes").get<std::size_t>();
    ds.schema.bands = manifest.at("schema").at("bands").get<std::size_t>();
    ds.class_names = manifest.at("classes").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("manifest '" + manifest_path.string() + "': " + e.what());
  }
  ds.num_classes = ds.class_names.size();
  if (ds.schema.electrodes == 0 || ds.schema.bands == 0 || ds.num_classes == 0) {
    throw SchemaError("manifest declares an empty schema or class map");
  }
  const std::size_t row = ds.schema.electrodes * ds.schema.bands;

  for (const auto& subject : detail::sorted_by_id<int>(manifest.at("subjects"))) {
    const int subject_id = subject.at("id").get<int>();
    for (const auto& session : detail::sorted_by_id<int>(subject.at("sessions"))) {
      const int session_id = session.at("id").get<int>();
      std::size_t time_index = 0;
      for (const auto& trial : detail::sorted_by_id<int>(session.at("trials"))) {
        const int trial_id = trial.at("id").get<int>();
        const std::size_t label = detail::label_of(trial, ds.class_names);
        const std::size_t count = trial.at("count").get<std::size_t>();
        const auto path = base / trial.at("file").get<std::string>();
        if (!std::filesystem::exists(path)) throw IngestError("missing feature file '" + path.string() + "'");
        const std::string bytes = io::read_file(path);

        if (bytes.size() < kFeatureHeaderBytes || !std::equal(kFeatureMagic, kFeatureMagic + 4, bytes.data())) {
          throw IngestError("'" + path.string() + "' is not an EVFA feature file");
        }
        const auto version = io::get_le<std::uint32_t>(bytes.data() + 4);
        if (version != kFeatureVersion) {
          throw IngestError("'" + path.string() + "' has unsupported version " + std::to_string(version));
        }
        const std::size_t expected = kFeatureHeaderBytes + count * row * sizeof(float);
        if (bytes.size() < expected) {
          throw IngestError("'" + path.string() + "' is truncated: " + std::to_string(bytes.size()) +
                            " bytes, expected " + std::to_string(expected));
        }
        if (bytes.size() != expected) {
          throw SchemaError("'" + path.string() + "' holds " + std::to_string(bytes.size()) +
                            " bytes, manifest implies " + std::to_string(expected));
        }

        const char* p = bytes.data() + kFeatureHeaderBytes;
        for (std::size_t t = 0; t < count; ++t) {
          std::vector<double> values(row);
          for (std::size_t j = 0; j < row; ++j, p += sizeof(float)) {
            values[j] = static_cast<double>(io::get_le<float>(p));
            if (!std::isfinite(values[j])) {
              throw DataError("non-finite value at subject " + std::to_string(subject_id) + " session " +
                              std::to_string(session_id) + " trial " + std::to_string(trial_id) +
                              " row " + std::to_string(t) + " element " + std::to_string(j));
            }
          }
          LabeledSample s;
          s.subject_id = subject_id;
          s.session_id = session_id;
          s.trial_id = trial_id;
          s.time_index = time_index++;
          s.features = Tensor({ds.schema.electrodes, ds.schema.bands}, std::move(values));
          s.label = label;
          ds.samples.push_back(std::move(s));
        }
      }
    }
  }
  ds.validate();
  return ds;
}

/// Writes `ds` as manifest.json plus per-trial binaries under `dir`.
/// Values are stored as float32.
inline std::filesystem::path export_features(const DatasetIndex& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["schema"] = {{"electrodes", ds.schema.electrodes}, {"bands", ds.schema.bands}};
  manifest["classes"] = ds.class_names;
  manifest["subjects"] = nlohmann::json::array();

  std::size_t i = 0;
  while (i < ds.samples.size()) {
    const int subject_id = ds.samples[i].subject_id;
    nlohmann::json subject{{"id", subject_id}, {"sessions", nlohmann::json::array()}};
    while (i < ds.samples.size() && ds.samples[i].subject_id == subject_id) {
      const int session_id = ds.samples[i].session_id;
      nlohmann::json session{{"id", session_id}, {"trials", nlohmann::json::array()}};
      while (i < ds.samples.size() && ds.samples[i].subject_id == subject_id &&
             ds.samples[i].session_id == session_id) {
        const int trial_id = ds.samples[i].trial_id;
        const std::size_t label = ds.samples[i].label;
        std::string bytes(kFeatureMagic, 4);
        io::put_le<std::uint32_t>(bytes, kFeatureVersion);
        std::size_t count = 0;
        for (; i < ds.samples.size() && ds.samples[i].subject_id == subject_id &&
               ds.samples[i].session_id == session_id && ds.samples[i].trial_id == trial_id;
             ++i, ++count) {
          for (double v : ds.samples[i].features.data()) io::put_le<float>(bytes, static_cast<float>(v));
        }
        const std::string rel = "s" + std::to_string(subject_id) + "/sess" + std::to_string(session_id) +
                                "/t" + std::to_string(trial_id) + ".bin";
        io::write_file_atomic(dir / rel, bytes);
        session["trials"].push_back({{"id", trial_id}, {"label", label}, {"file", rel}, {"count", count}});
      }
      subject["sessions"].push_back(std::move(session));
    }
    manifest["subjects"].push_back(std::move(subject));
  }
  const auto path = dir / "manifest.json";
  io::write_file_atomic(path, manifest.dump(2) + "\n");
  return path;
}

}  // namespace evofa
