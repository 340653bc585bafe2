#pragma once

// Multi-phase slice datasets.
//
// Directory layout:
//   manifest.json
//   <case_id>/<slice_id>.f32   3*128*128 float32 little-endian, channel order NC, ART, PV

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lvlm/tensor.hpp"
#include "lvlm/text.hpp"

namespace lvlm {

inline constexpr std::size_t kPhases = 3;
inline constexpr std::size_t kSliceSize = 128;
inline constexpr std::size_t kSliceValues = kPhases * kSliceSize * kSliceSize;
inline constexpr std::size_t kSliceBytes = kSliceValues * 4;
inline constexpr int kManifestVersion = 1;

struct MultiPhaseSlice {
  std::string slice_id;
  Tensor pixels;  // [3, 128, 128], values in [0, 1]
};

struct CaseRecord {
  std::string case_id;
  std::string label;  // class abbreviation
  std::vector<MultiPhaseSlice> slices;
};

struct Dataset {
  ClassRegistry classes;
  std::vector<CaseRecord> cases;
  std::string provenance = R"({"kind":"external"})";  // JSON object text

  std::size_t num_slices() const;
  /// Class index of a case, via the registry.
  std::size_t label_index(const CaseRecord& c) const { return classes.find(c.label).index; }
  void validate() const;
};

void save_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& dir);

/// Rejects values outside [0, 1] (and non-finite values) naming `what`.
void check_unit_range(std::span<const float> values, const std::string& what);

/// Bilinear resize of one [H, W] plane, half-pixel centers (align_corners = false),
/// source coordinates clamped to the border.
std::vector<float> resize_bilinear(std::span<const float> plane, std::size_t height, std::size_t width,
                                   std::size_t out_height, std::size_t out_width);

/// [3, H, W] -> [3, target, target], then one min-max rescale over all three phases.
/// A constant slice maps to 0.5 everywhere.
Tensor preprocess(const Tensor& raw, std::size_t target = kSliceSize);

/// Three [H, W] planes -> [3, H, W] in the order given (NC, ART, PV).
Tensor stack_phases(const Tensor& nc, const Tensor& art, const Tensor& pv);

/// One slice addressed inside a dataset.
struct SliceRef {
  std::size_t case_index = 0;
  std::size_t slice_index = 0;
  std::size_t label = 0;
};

/// All slices of the given cases, in case then slice order.
std::vector<SliceRef> collect_slices(const Dataset& dataset, std::span<const std::size_t> case_indices);
std::vector<SliceRef> collect_slices(const Dataset& dataset);

/// Stacks the referenced slices into [N, 3, S, S].
template <typename T>
BasicTensor<T> make_batch(const Dataset& dataset, std::span<const SliceRef> refs);

}  // namespace lvlm
