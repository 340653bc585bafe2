#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "lvlm/dataset.hpp"
#include "lvlm/evaluation.hpp"
#include "lvlm/model.hpp"
#include "lvlm/train.hpp"

namespace lvlm {

struct SlicePrediction {
  std::string case_id;
  std::string slice_id;
  std::size_t label = 0;
  std::size_t predicted = 0;
  std::vector<double> probabilities;
};

struct FoldResult {
  FoldReport report;
  std::vector<SlicePrediction> predictions;
  TrainHistory history;
};

struct CrossvalOptions {
  std::size_t jobs = 1;  // folds trained concurrently; results do not depend on it
  std::function<void(const std::string&)> log;
};

struct CrossvalResult {
  std::vector<FoldResult> folds;
  AggregateReport aggregate;
};

std::vector<CaseKey> case_keys(const Dataset& dataset);

/// Fold f trains with seed derive_seed(config.seed, "fold", f).
CrossvalResult run_crossval(const Dataset& dataset, const FoldSplit& split, const ModelSpec& spec,
                            const TextEmbeddingTable& table, const TrainConfig& config,
                            const CrossvalOptions& options = {});

}  // namespace lvlm
