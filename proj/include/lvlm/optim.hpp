#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "lvlm/params.hpp"

namespace lvlm {

struct AdamWConfig {
  double learning_rate = 0.01;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  bool decay_all = false;  // by default only weight matrices/kernels (names ending ".w") decay

  void validate() const;
};

template <typename T>
struct AdamWState {
  std::uint64_t step = 0;
  ParamStore<T> m;  // one entry per trainable parameter
  ParamStore<T> v;
};

template <typename T>
AdamWState<T> adamw_init(const ParamStore<T>& params);

bool applies_weight_decay(std::string_view name, bool decay_all);

/// m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;  bias-corrected m^, v^;
/// theta <- theta (1 - lr wd) - lr m^ / (sqrt(v^) + eps).
/// `grads` holds one entry per trainable parameter (as from zeros_like_trainable).
template <typename T>
void adamw_step(ParamStore<T>& params, const ParamStore<T>& grads, AdamWState<T>& state, const AdamWConfig& config);

struct FreezeReport {
  std::vector<std::string> trainable;
  std::vector<std::string> frozen;
  std::vector<std::string> dead_prefixes;  // matched nothing
};

/// Marks every entry whose name starts with one of `prefixes` as frozen and clears the flag
/// on the rest. Frozen buffers stop receiving running-statistic updates.
template <typename T>
FreezeReport apply_freeze(ParamStore<T>& params, const std::vector<std::string>& prefixes);

}  // namespace lvlm
