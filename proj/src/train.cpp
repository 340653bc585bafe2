#include "lvlm/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "lvlm/error.hpp"
#include "lvlm/random.hpp"

namespace lvlm {

void TrainConfig::validate() const {
  if (batch_size < 2) fail(Errc::invalid_argument, "batch size must be >= 2 (batch norm needs two samples)");
  optimizer.validate();
  if (variant == Variant::finetune && finetune_weights.empty()) {
    fail(Errc::invalid_argument, "finetune variant needs a weights path");
  }
}

std::string TrainConfig::variant_string() const {
  return variant == Variant::scratch ? "scratch" : "finetune:" + finetune_weights.string();
}

void TrainConfig::set_variant(std::string_view text) {
  if (text == "scratch") {
    variant = Variant::scratch;
    finetune_weights.clear();
  } else if (text.substr(0, 9) == "finetune:" && text.size() > 9) {
    variant = Variant::finetune;
    finetune_weights = std::string(text.substr(9));
  } else {
    fail(Errc::invalid_argument, "variant must be 'scratch' or 'finetune:<weights>', got '" + std::string(text) + "'");
  }
}

std::string TrainHistory::to_csv() const {
  const bool val = !epochs.empty() && epochs.front().val_loss >= 0;
  std::string out = val ? "epoch,loss,train_acc,seconds,val_loss,val_acc\n" : "epoch,loss,train_acc,seconds\n";
  char line[256];
  for (const auto& e : epochs) {
    if (val) {
      std::snprintf(line, sizeof line, "%zu,%.9g,%.6f,%.3f,%.9g,%.6f\n", e.epoch, e.loss, e.train_acc, e.seconds,
                    e.val_loss, e.val_acc);
    } else {
      std::snprintf(line, sizeof line, "%zu,%.9g,%.6f,%.3f\n", e.epoch, e.loss, e.train_acc, e.seconds);
    }
    out += line;
  }
  return out;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t count, std::size_t batch_size, std::uint64_t seed,
                                                    std::size_t epoch) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "shuffle", epoch));
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < count; start += batch_size) {
    const std::size_t end = std::min(count, start + batch_size);
    if (end - start < 2) break;
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

ParamStore<float> initial_params(const VlmModel& model, const TextEmbeddingTable& table, const TrainConfig& config) {
  auto params = model.init<float>(table, config.seed);
  if (config.variant == Variant::scratch) return params;

  const auto loaded = load_tensors(config.finetune_weights);
  auto lookup = [&](const std::string& name) -> const Tensor* {
    for (const auto& t : loaded)
      if (t.name == name) return &t.value;
    return nullptr;
  };
  const std::string source = config.finetune_weights.string();
  for (auto& e : params.entries()) {
    if (e.kind == ParamKind::constant && e.name.rfind(kTextEmbeddingPrefix, 0) == 0) continue;
    const bool head = e.name.rfind("fc_i.", 0) == 0 || e.name.rfind("fc_t.", 0) == 0 ||
                      e.name.rfind("logit_scale", 0) == 0;
    const Tensor* t = lookup(e.name);
    if (!t) {
      if (head) continue;  // reinitialized
      fail(Errc::missing_entry, source + ": encoder tensor '" + e.name + "' missing from weights file");
    }
    if (t->shape() != e.value.shape()) {
      fail(Errc::shape, source + ": '" + e.name + "' has shape " + shape_to_string(t->shape()) + ", model expects " +
                            shape_to_string(e.value.shape()));
    }
    e.value = *t;
  }
  return params;
}

namespace {

struct BatchStats {
  double loss = 0;
  std::size_t correct = 0;
};

BatchStats evaluate(const VlmModel& model, const ParamStore<float>& params, const Dataset& dataset,
                    std::span<const SliceRef> refs) {
  BatchStats s;
  constexpr std::size_t chunk = 64;
  for (std::size_t start = 0; start < refs.size(); start += chunk) {
    const auto part = refs.subspan(start, std::min(chunk, refs.size() - start));
    const auto batch = make_batch<float>(dataset, part);
    std::vector<std::size_t> labels;
    for (const auto& r : part) labels.push_back(r.label);
    const auto res = model.loss<float>(params, batch, labels, Mode::eval);
    s.loss += static_cast<double>(res.loss) * static_cast<double>(part.size());
    const auto pred = argmax_rows(res.logits);
    for (std::size_t i = 0; i < pred.size(); ++i) s.correct += pred[i] == labels[i];
  }
  return s;
}

}  // namespace

TrainResult train_from(const VlmModel& model, const Dataset& dataset, std::span<const SliceRef> slices,
                       ParamStore<float> params, const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  model.check_params(params);
  const std::size_t first = std::min<std::size_t>(config.batch_size, slices.size());
  if (slices.size() < 2 || first < 2) {
    fail(Errc::invalid_argument, "training set has " + std::to_string(slices.size()) +
                                     " slices, fewer than one valid batch (2)");
  }

  TrainResult result;
  result.freeze = apply_freeze(params, config.freeze);
  if (hooks.warn) {
    for (const auto& p : result.freeze.dead_prefixes) hooks.warn("freeze prefix '" + p + "' matches no tensor");
  }
  auto state = adamw_init(params);

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double loss_sum = 0;
    std::size_t seen = 0, correct = 0;
    for (const auto& idx : epoch_batches(slices.size(), config.batch_size, config.seed, epoch)) {
      std::vector<SliceRef> refs;
      std::vector<std::size_t> labels;
      for (std::size_t i : idx) {
        refs.push_back(slices[i]);
        labels.push_back(slices[i].label);
      }
      const auto batch = make_batch<float>(dataset, refs);
      auto grads = params.zeros_like_trainable();
      LossResult<float> res;
      try {
        res = model.loss<float>(params, batch, labels, Mode::train, &params, &grads);
      } catch (const Error& e) {
        if (e.code() == Errc::numeric) fail(Errc::numeric, "epoch " + std::to_string(epoch) + ": " + e.what());
        throw;
      }
      if (!std::isfinite(res.loss)) {
        fail(Errc::numeric, "loss became non-finite at epoch " + std::to_string(epoch) + " (step " +
                                std::to_string(result.steps + 1) + ")");
      }
      adamw_step(params, grads, state, config.optimizer);
      ++result.steps;
      loss_sum += static_cast<double>(res.loss) * static_cast<double>(idx.size());
      seen += idx.size();
      const auto pred = argmax_rows(res.logits);
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(seen);
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    if (!hooks.validation.empty()) {
      const auto v = evaluate(model, params, dataset, hooks.validation);
      rec.val_loss = v.loss / static_cast<double>(hooks.validation.size());
      rec.val_acc = static_cast<double>(v.correct) / static_cast<double>(hooks.validation.size());
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.epochs.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }
  result.params = std::move(params);
  return result;
}

TrainResult train(const VlmModel& model, const Dataset& dataset, std::span<const SliceRef> slices,
                  const TextEmbeddingTable& table, const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  return train_from(model, dataset, slices, initial_params(model, table, config), config, hooks);
}

}  // namespace lvlm
