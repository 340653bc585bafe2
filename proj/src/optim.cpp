#include "lvlm/optim.hpp"

#include <cmath>

#include "lvlm/error.hpp"

namespace lvlm {

void AdamWConfig::validate() const {
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) {
    fail(Errc::invalid_argument, "learning rate must be positive");
  }
  if (!(weight_decay >= 0)) fail(Errc::invalid_argument, "weight decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
    fail(Errc::invalid_argument, "adam betas must lie in [0, 1)");
  }
  if (!(epsilon > 0)) fail(Errc::invalid_argument, "adam epsilon must be positive");
}

template <typename T>
AdamWState<T> adamw_init(const ParamStore<T>& params) {
  AdamWState<T> s;
  s.m = params.zeros_like_trainable();
  s.v = params.zeros_like_trainable();
  return s;
}

bool applies_weight_decay(std::string_view name, bool decay_all) {
  if (decay_all) return true;
  return name.size() >= 2 && name.substr(name.size() - 2) == ".w";
}

template <typename T>
void adamw_step(ParamStore<T>& params, const ParamStore<T>& grads, AdamWState<T>& state, const AdamWConfig& config) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double b1 = config.beta1, b2 = config.beta2;
  const double c1 = 1 - std::pow(b1, t);
  const double c2 = 1 - std::pow(b2, t);
  const double lr = config.learning_rate;

  for (const auto& g : grads.entries()) {
    auto& p = params.entry(g.name);
    if (!p.trainable()) fail(Errc::invalid_argument, "adamw_step: '" + g.name + "' is not trainable");
    require_shape(g.value.shape(), p.value.shape(), "adamw gradient");
    auto* m = state.m.find(g.name);
    auto* v = state.v.find(g.name);
    if (!m || !v) fail(Errc::missing_entry, "adamw_step: no optimizer state for '" + g.name + "'");
    const double decay = applies_weight_decay(g.name, config.decay_all) ? 1 - lr * config.weight_decay : 1.0;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double gi = static_cast<double>(g.value[i]);
      const double mi = b1 * static_cast<double>((*m)[i]) + (1 - b1) * gi;
      const double vi = b2 * static_cast<double>((*v)[i]) + (1 - b2) * gi * gi;
      (*m)[i] = static_cast<T>(mi);
      (*v)[i] = static_cast<T>(vi);
      const double mhat = mi / c1;
      const double vhat = vi / c2;
      p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) * decay - lr * mhat / (std::sqrt(vhat) + config.epsilon));
    }
  }
}

template <typename T>
FreezeReport apply_freeze(ParamStore<T>& params, const std::vector<std::string>& prefixes) {
  FreezeReport r;
  std::vector<bool> used(prefixes.size(), false);
  for (auto& e : params.entries()) {
    e.frozen = false;
    for (std::size_t k = 0; k < prefixes.size(); ++k) {
      if (e.name.compare(0, prefixes[k].size(), prefixes[k]) == 0) {
        e.frozen = true;
        used[k] = true;
      }
    }
    if (e.kind == ParamKind::parameter) (e.frozen ? r.frozen : r.trainable).push_back(e.name);
    else if (e.frozen || e.kind == ParamKind::constant) r.frozen.push_back(e.name);
  }
  for (std::size_t k = 0; k < prefixes.size(); ++k)
    if (!used[k]) r.dead_prefixes.push_back(prefixes[k]);
  return r;
}

template AdamWState<float> adamw_init<float>(const ParamStore<float>&);
template AdamWState<double> adamw_init<double>(const ParamStore<double>&);
template void adamw_step<float>(ParamStore<float>&, const ParamStore<float>&, AdamWState<float>&, const AdamWConfig&);
template void adamw_step<double>(ParamStore<double>&, const ParamStore<double>&, AdamWState<double>&,
                                 const AdamWConfig&);
template FreezeReport apply_freeze<float>(ParamStore<float>&, const std::vector<std::string>&);
template FreezeReport apply_freeze<double>(ParamStore<double>&, const std::vector<std::string>&);

}  // namespace lvlm
