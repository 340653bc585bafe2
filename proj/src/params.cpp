#include "lvlm/params.hpp"

#include <cstring>

#include "lvlm/error.hpp"

namespace lvlm {

template <typename T>
BasicTensor<T>& ParamStore<T>::add(std::string name, BasicTensor<T> value, ParamKind kind) {
  if (index_.count(name)) fail(Errc::duplicate_name, "parameter '" + name + "' already exists");
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), std::move(value), kind, false});
  return entries_.back().value;
}

template <typename T>
std::size_t ParamStore<T>::index_of(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) fail(Errc::missing_entry, "no parameter named '" + std::string(name) + "'");
  return it->second;
}

template <typename T>
bool ParamStore<T>::contains(std::string_view name) const {
  return index_.count(std::string(name)) != 0;
}

template <typename T>
BasicTensor<T>& ParamStore<T>::get(std::string_view name) {
  return entries_[index_of(name)].value;
}

template <typename T>
const BasicTensor<T>& ParamStore<T>::get(std::string_view name) const {
  return entries_[index_of(name)].value;
}

template <typename T>
ParamEntry<T>& ParamStore<T>::entry(std::string_view name) {
  return entries_[index_of(name)];
}

template <typename T>
const ParamEntry<T>& ParamStore<T>::entry(std::string_view name) const {
  return entries_[index_of(name)];
}

template <typename T>
BasicTensor<T>* ParamStore<T>::find(std::string_view name) {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? nullptr : &entries_[it->second].value;
}

template <typename T>
const BasicTensor<T>* ParamStore<T>::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? nullptr : &entries_[it->second].value;
}

template <typename T>
ParamStore<T> ParamStore<T>::zeros_like_trainable() const {
  ParamStore out;
  for (const auto& e : entries_) {
    if (e.trainable()) out.add(e.name, BasicTensor<T>(e.value.shape()));
  }
  return out;
}

template <typename T>
std::size_t count_parameters(const ParamStore<T>& params) {
  std::size_t n = 0;
  for (const auto& e : params.entries()) {
    if (e.kind == ParamKind::parameter) n += e.value.size();
  }
  return n;
}

namespace {
void mix(std::uint64_t& h, const void* data, std::size_t bytes) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
}

template <typename T>
std::uint64_t hash_filtered(const ParamStore<T>& params, std::string_view prefix) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& e : params.entries()) {
    if (!std::string_view(e.name).starts_with(prefix)) continue;
    mix(h, e.name.data(), e.name.size());
    for (auto d : e.value.shape()) {
      const std::uint64_t d64 = d;
      mix(h, &d64, sizeof d64);
    }
    mix(h, e.value.data(), e.value.size() * sizeof(T));
  }
  return h;
}
}  // namespace

template <typename T>
std::uint64_t hash_params(const ParamStore<T>& params) {
  return hash_filtered(params, "");
}

template <typename T>
std::uint64_t hash_params(const ParamStore<T>& params, std::string_view prefix) {
  return hash_filtered(params, prefix);
}

template class ParamStore<float>;
template class ParamStore<double>;
template std::size_t count_parameters(const ParamStore<float>&);
template std::size_t count_parameters(const ParamStore<double>&);
template std::uint64_t hash_params(const ParamStore<float>&);
template std::uint64_t hash_params(const ParamStore<double>&);
template std::uint64_t hash_params(const ParamStore<float>&, std::string_view);
template std::uint64_t hash_params(const ParamStore<double>&, std::string_view);

}  // namespace lvlm
