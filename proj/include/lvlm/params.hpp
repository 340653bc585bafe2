#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "lvlm/tensor.hpp"

namespace lvlm {

enum class ParamKind : std::uint8_t {
  parameter,  // learnable
  buffer,     // running statistics; mutated by train-mode forward passes only
  constant,   // never mutated (frozen text embedding rows)
};

template <typename T>
struct ParamEntry {
  std::string name;
  BasicTensor<T> value;
  ParamKind kind = ParamKind::parameter;
  bool frozen = false;  // set by the freeze policy

  bool trainable() const { return kind == ParamKind::parameter && !frozen; }
};

/// Ordered, name-indexed tensor collection. Insertion order is the serialization order.
template <typename T>
class ParamStore {
 public:
  BasicTensor<T>& add(std::string name, BasicTensor<T> value, ParamKind kind = ParamKind::parameter);

  bool contains(std::string_view name) const;
  BasicTensor<T>& get(std::string_view name);
  const BasicTensor<T>& get(std::string_view name) const;
  ParamEntry<T>& entry(std::string_view name);
  const ParamEntry<T>& entry(std::string_view name) const;
  BasicTensor<T>* find(std::string_view name);
  const BasicTensor<T>* find(std::string_view name) const;

  std::vector<ParamEntry<T>>& entries() { return entries_; }
  const std::vector<ParamEntry<T>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  /// Zero tensors for every trainable entry, same names and order.
  ParamStore zeros_like_trainable() const;

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) {
      auto& added = out.add(e.name, e.value.template cast<U>(), e.kind);
      (void)added;
      out.entry(e.name).frozen = e.frozen;
    }
    return out;
  }

 private:
  std::size_t index_of(std::string_view name) const;

  std::vector<ParamEntry<T>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Sum of element counts over learnable tensors (buffers and constants excluded).
template <typename T>
std::size_t count_parameters(const ParamStore<T>& params);

/// FNV-1a over names, shapes and raw bytes of every entry, in order.
template <typename T>
std::uint64_t hash_params(const ParamStore<T>& params);

/// Same, restricted to entries whose name starts with `prefix`.
template <typename T>
std::uint64_t hash_params(const ParamStore<T>& params, std::string_view prefix);

extern template class ParamStore<float>;
extern template class ParamStore<double>;

}  // namespace lvlm
