#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include <boost/crc.hpp>

#include "evofa/error.hpp"
#include "evofa/tensor.hpp"

namespace evofa {

/// CRC-64/XZ (ECMA-182 polynomial, reflected, all-ones init and xor-out).
using Crc64 = boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, ~0ULL, ~0ULL, true, true>;

/// A named, ordered set of tensors. Entries that do not require gradients
/// (batch-norm running statistics) ride along for persistence but are skipped
/// by optimizer steps.
class ParamGroup {
 public:
  struct Entry {
    std::string name;
    Tensor value;
  };

  ParamGroup() = default;
  explicit ParamGroup(std::string tag) : tag_(std::move(tag)) {}

  const std::string& tag() const { return tag_; }

  Tensor& add(std::string name, Tensor value) {
    if (find(name)) throw ContractError("duplicate parameter '" + name + "' in group " + tag_);
    entries_.push_back({std::move(name), std::move(value)});
    return entries_.back().value;
  }

  const Tensor* find(const std::string& name) const {
    auto it = std::find_if(entries_.begin(), entries_.end(),
                           [&](const Entry& e) { return e.name == name; });
    return it == entries_.end() ? nullptr : &it->value;
  }
  Tensor* find(const std::string& name) {
    return const_cast<Tensor*>(std::as_const(*this).find(name));
  }
  const Tensor& at(const std::string& name) const {
    if (const auto* t = find(name)) return *t;
    throw ContractError("no parameter '" + name + "' in group " + tag_);
  }
  Tensor& at(const std::string& name) { return const_cast<Tensor&>(std::as_const(*this).at(name)); }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  /// Deep copy with fresh tensors; gradients are not copied.
  ParamGroup clone() const {
    ParamGroup out(tag_);
    for (const auto& e : entries_) out.add(e.name, e.value.clone(e.value.requires_grad()));
    return out;
  }

  void zero_grad() {
    for (auto& e : entries_) e.value.zero_grad();
  }

  /// Trainable tensors, in entry order.
  std::vector<Tensor> trainable() const {
    std::vector<Tensor> out;
    for (const auto& e : entries_)
      if (e.value.requires_grad()) out.push_back(e.value);
    return out;
  }

  std::size_t num_values() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  /// CRC-64 over names, shapes and the raw bytes of every value.
  std::uint64_t checksum() const {
    Crc64 crc;
    crc.process_bytes(tag_.data(), tag_.size());
    for (const auto& e : entries_) {
      crc.process_bytes(e.name.data(), e.name.size());
      for (auto d : e.value.shape()) {
        const auto v = static_cast<std::uint64_t>(d);
        crc.process_bytes(&v, sizeof v);
      }
      const auto data = e.value.data();
      crc.process_bytes(data.data(), data.size_bytes());
    }
    return crc.checksum();
  }

  /// Copies values from a group of identical layout.
  void assign_from(const ParamGroup& other) {
    if (other.entries_.size() != entries_.size()) throw ContractError("assign_from: layout mismatch");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      auto& dst = entries_[i];
      const auto& src = other.entries_[i];
      if (dst.name != src.name || dst.value.shape() != src.value.shape()) {
        throw ContractError("assign_from: layout mismatch at '" + dst.name + "'");
      }
      auto out = dst.value.mutable_data();
      std::copy(src.value.data().begin(), src.value.data().end(), out.begin());
    }
  }

 private:
  std::string tag_;
  std::vector<Entry> entries_;
};

/// p <- p - lr * grad for every trainable entry, then clears the grads.
inline void sgd_step(ParamGroup& group, double lr) {
  for (auto& e : group.entries()) {
    if (!e.value.requires_grad()) continue;
    if (!e.value.has_grad()) {
      throw ContractError("sgd_step: parameter '" + e.name + "' in group " + group.tag() +
                          " has no gradient");
    }
  }
  for (auto& e : group.entries()) {
    if (!e.value.requires_grad()) continue;
    auto p = e.value.mutable_data();
    const auto g = e.value.grad();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
    e.value.zero_grad();
  }
}

}  // namespace evofa
