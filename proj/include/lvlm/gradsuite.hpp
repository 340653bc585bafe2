#pragma once

// Finite-difference suites in 64-bit for each primitive and for the whole model.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "lvlm/gradcheck.hpp"
#include "lvlm/model.hpp"

namespace lvlm {

/// "model" plus one scope per primitive (conv2d, batchnorm2d, ...).
std::vector<std::string> gradcheck_scopes();

/// Throws invalid_argument for an unknown scope.
GradCheckReport run_gradcheck_scope(std::string_view scope, std::uint64_t seed);

struct ModelGradCheckConfig {
  ModelSpec spec{};
  std::size_t batch = 4;
  std::size_t input_size = 16;     // reduced spatial size keeps the check fast
  std::size_t max_elements = 16;   // sampled elements per tensor; 0 checks all
  Mode mode = Mode::train;
};

/// Loss gradient of every trainable tensor (encoder, FC_I, FC_T, logit scale).
GradCheckReport model_gradcheck(const ModelGradCheckConfig& config, std::uint64_t seed);

}  // namespace lvlm
