#pragma once

// Binary model checkpoints.
//
// Layout (all integers little-endian):
//   "EVCK" | u32 version | u64 header length | JSON header | f32 payload | u64 CRC-64
// The CRC covers every preceding byte. The header holds the backbone config,
// a parameter table {group, name, shape, offset, trainable} with offsets in
// float elements, and free-form metadata.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "evofa/backbone.hpp"
#include "evofa/binary_io.hpp"
#include "evofa/config_io.hpp"
#include "evofa/error.hpp"
#include "evofa/param_group.hpp"

namespace evofa {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'E', 'V', 'C', 'K'};

struct Checkpoint {
  Model model;
  Json meta = Json::object();
};

inline std::string serialize_checkpoint(const Model& model, const Json& meta = Json::object()) {
  Json table = Json::array();
  std::vector<float> payload;
  for (const auto* group : model.groups()) {
    for (const auto& e : group->entries()) {
      table.push_back({{"group", group->tag()},
                       {"name", e.name},
                       {"shape", e.value.shape()},
                       {"offset", payload.size()},
                       {"trainable", e.value.requires_grad()}});
      for (double v : e.value.data()) {
        if (!std::isfinite(v)) throw ContractError("save_checkpoint: non-finite value in " + group->tag() + "." + e.name);
        payload.push_back(static_cast<float>(v));
      }
    }
  }
  const Json header = {{"version", kCheckpointVersion},
                       {"config", to_json(model.config)},
                       {"params", table},
                       {"payload_floats", payload.size()},
                       {"meta", meta}};
  const std::string text = header.dump();

  std::string out(kCheckpointMagic, 4);
  io::put_le<std::uint32_t>(out, kCheckpointVersion);
  io::put_le<std::uint64_t>(out, text.size());
  out += text;
  for (float f : payload) io::put_le<float>(out, f);
  Crc64 crc;
  crc.process_bytes(out.data(), out.size());
  io::put_le<std::uint64_t>(out, crc.checksum());
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& origin = "<memory>") {
  constexpr std::size_t kFixed = 4 + 4 + 8;
  if (bytes.size() < kFixed + 8) throw CorruptCheckpointError(origin + ": truncated checkpoint");
  if (!std::equal(kCheckpointMagic, kCheckpointMagic + 4, bytes.begin())) {
    throw CorruptCheckpointError(origin + ": bad magic, not a checkpoint");
  }
  const std::size_t body = bytes.size() - 8;
  Crc64 crc;
  crc.process_bytes(bytes.data(), body);
  if (crc.checksum() != io::get_le<std::uint64_t>(bytes.data() + body)) {
    throw CorruptCheckpointError(origin + ": checksum mismatch");
  }
  const auto version = io::get_le<std::uint32_t>(bytes.data() + 4);
  if (version != kCheckpointVersion) {
    throw VersionError(origin + ": checkpoint version " + std::to_string(version) + ", this build reads version " +
                       std::to_string(kCheckpointVersion));
  }
  const auto header_len = io::get_le<std::uint64_t>(bytes.data() + 8);
  if (header_len > body - kFixed) throw CorruptCheckpointError(origin + ": header length exceeds file size");

  Json header;
  try {
    header = Json::parse(bytes.begin() + kFixed, bytes.begin() + static_cast<std::ptrdiff_t>(kFixed + header_len));
  } catch (const Json::exception& e) {
    throw CorruptCheckpointError(origin + ": unreadable header: " + e.what());
  }

  const std::size_t payload_begin = kFixed + header_len;
  const std::size_t floats = (body - payload_begin) / sizeof(float);
  if ((body - payload_begin) % sizeof(float) != 0 || floats != header.value("payload_floats", std::size_t{0})) {
    throw CorruptCheckpointError(origin + ": payload size does not match header");
  }

  Checkpoint ck;
  try {
    ck.model = make_model(backbone_config_from_json(header.at("config"), "checkpoint.config"));
    ck.meta = header.value("meta", Json::object());
    const Json& table = header.at("params");
    std::size_t expected = 0;
    for (const auto* g : ck.model.groups()) expected += g->size();
    if (table.size() != expected) throw CorruptCheckpointError(origin + ": parameter table does not match config");
    std::size_t row = 0;
    for (auto* group : ck.model.groups()) {
      for (auto& e : group->entries()) {
        const Json& p = table.at(row++);
        const Shape shape = p.at("shape").get<Shape>();
        if (p.at("group").get<std::string>() != group->tag() || p.at("name").get<std::string>() != e.name ||
            shape != e.value.shape()) {
          throw CorruptCheckpointError(origin + ": parameter table mismatch at " + group->tag() + "." + e.name);
        }
        const auto offset = p.at("offset").get<std::size_t>();
        if (offset + e.value.size() > floats) throw CorruptCheckpointError(origin + ": offset out of range");
        auto dst = e.value.mutable_data();
        for (std::size_t i = 0; i < dst.size(); ++i) {
          dst[i] = static_cast<double>(io::get_le<float>(bytes.data() + payload_begin + (offset + i) * sizeof(float)));
        }
        e.value.set_requires_grad(p.at("trainable").get<bool>());
      }
    }
  } catch (const Json::exception& e) {
    throw CorruptCheckpointError(origin + ": malformed header: " + e.what());
  } catch (const ConfigError& e) {
    throw CorruptCheckpointError(origin + ": invalid config in header: " + e.what());
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Model& model, const Json& meta = Json::object()) {
  io::write_file_atomic(path, serialize_checkpoint(model, meta));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(io::read_file(path), path.string());
}

}  // namespace evofa
