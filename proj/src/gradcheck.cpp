#include "lvlm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lvlm/error.hpp"
#include "lvlm/random.hpp"

namespace lvlm {

double GradCheckReport::max_rel_error() const {
  double m = 0;
  for (const auto& t : tensors) m = std::max(m, t.max_rel_error);
  return m;
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

std::vector<std::size_t> pick_elements(std::size_t n, const GradCheckOptions& opt, std::size_t tensor_index) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (opt.max_elements == 0 || opt.max_elements >= n) return idx;
  Rng rng(derive_seed(opt.seed, "gradcheck", tensor_index));
  rng.shuffle(std::span<std::size_t>(idx));
  idx.resize(opt.max_elements);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

GradCheckReport finite_difference_check(const FdObjective& objective, const std::vector<FdTarget>& targets,
                                        const GradCheckOptions& options) {
  GradCheckReport report;
  const std::uint64_t base_signature = objective().signature;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const auto& target = targets[t];
    if (!target.value || !target.analytic) fail(Errc::invalid_argument, "gradcheck: null target " + target.name);
    require_shape(target.analytic->shape(), target.value->shape(), "gradcheck analytic gradient");
    TensorCheck check{target.name};
    Tensor64& x = *target.value;
    for (std::size_t i : pick_elements(x.size(), options, t)) {
      const double original = x[i];
      double h = options.step;
      bool smooth = false;
      double numeric = 0;
      for (int attempt = 0; attempt <= options.refinements; ++attempt, h /= 10) {
        x[i] = original + h;
        const auto plus = objective();
        x[i] = original - h;
        const auto minus = objective();
        x[i] = original;
        if (plus.signature == base_signature && minus.signature == base_signature) {
          numeric = (plus.value - minus.value) / (2 * h);
          smooth = true;
          break;
        }
      }
      if (!smooth) {
        ++check.skipped;
        continue;
      }
      const double analytic = (*target.analytic)[i];
      const double rel = relative_error(analytic, numeric, options.floor);
      ++check.checked;
      check.max_abs_error = std::max(check.max_abs_error, std::abs(analytic - numeric));
      if (rel > check.max_rel_error) {
        check.max_rel_error = rel;
        check.worst_index = i;
      }
    }
    report.tensors.push_back(std::move(check));
  }
  return report;
}

}  // namespace lvlm
