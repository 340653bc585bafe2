#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lvlm/tensor.hpp"

namespace lvlm {

/// One evaluation of a scalar objective. `signature` fingerprints the nonsmooth
/// branch pattern (ReLU masks, max-pool winners); 0 when the objective is smooth.
struct FdEvaluation {
  double value = 0;
  std::uint64_t signature = 0;
};

/// Reads the current contents of the checked tensors (they are perturbed in place).
using FdObjective = std::function<FdEvaluation()>;

struct FdTarget {
  std::string name;
  Tensor64* value = nullptr;
  const Tensor64* analytic = nullptr;
};

struct GradCheckOptions {
  double step = 1e-5;
  std::size_t max_elements = 0;  // per tensor; 0 checks every element
  std::uint64_t seed = 0;        // element sampling when max_elements > 0
  int refinements = 3;           // step /10 retries when a branch flip is detected
  double floor = 1e-6;           // denominator floor of the relative error
};

struct TensorCheck {
  std::string name;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // elements sitting on a nonsmooth point at every tried step
  double max_rel_error = 0;
  double max_abs_error = 0;
  std::size_t worst_index = 0;
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;

  double max_rel_error() const;
  bool passed(double tolerance) const { return max_rel_error() <= tolerance; }
};

/// |a - n| / max(|a|, |n|, floor)
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// Central differences (f(x+h) - f(x-h)) / 2h against analytic gradients.
GradCheckReport finite_difference_check(const FdObjective& objective, const std::vector<FdTarget>& targets,
                                        const GradCheckOptions& options = {});

}  // namespace lvlm
