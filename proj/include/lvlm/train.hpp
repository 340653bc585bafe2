#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lvlm/dataset.hpp"
#include "lvlm/model.hpp"
#include "lvlm/optim.hpp"

namespace lvlm {

enum class Variant { scratch, finetune };

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  AdamWConfig optimizer{};
  std::uint64_t seed = 42;
  Variant variant = Variant::scratch;
  std::filesystem::path finetune_weights;  // finetune only
  std::vector<std::string> freeze{"text_emb/"};

  void validate() const;
  /// "scratch" or "finetune:<path>".
  std::string variant_string() const;
  void set_variant(std::string_view text);
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double loss = 0;        // mean over the epoch's batches, weighted by batch size
  double train_acc = 0;   // fraction of train-mode predictions that were correct
  double seconds = 0;
  double val_loss = -1;   // eval mode; negative when no validation slices were given
  double val_acc = -1;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;

  /// epoch,loss,train_acc,seconds (+ val_loss,val_acc when present).
  std::string to_csv() const;
};

struct TrainResult {
  ParamStore<float> params;
  TrainHistory history;
  FreezeReport freeze;
  std::size_t steps = 0;
};

struct TrainHooks {
  std::span<const SliceRef> validation;
  std::function<void(const EpochRecord&)> on_epoch;
  std::function<void(const std::string&)> warn;
};

/// Minibatch index ranges for one epoch: a Fisher-Yates permutation seeded from
/// (seed, epoch), cut into batches of `batch_size`; a trailing batch smaller than 2 is dropped.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t count, std::size_t batch_size, std::uint64_t seed,
                                                    std::size_t epoch);

/// Starting parameters for the configured variant: fresh from the seed, or the encoder (and
/// any heads present) read from the finetune weights file.
ParamStore<float> initial_params(const VlmModel& model, const TextEmbeddingTable& table, const TrainConfig& config);

TrainResult train(const VlmModel& model, const Dataset& dataset, std::span<const SliceRef> slices,
                  const TextEmbeddingTable& table, const TrainConfig& config, const TrainHooks& hooks = {});

/// Runs from given starting parameters (the freeze policy is applied to them).
TrainResult train_from(const VlmModel& model, const Dataset& dataset, std::span<const SliceRef> slices,
                       ParamStore<float> params, const TrainConfig& config, const TrainHooks& hooks = {});

}  // namespace lvlm
