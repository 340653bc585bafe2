#pragma once

// Seeded stand-in data: one lesion disk per slice on a flat background, with
// phase-dependent enhancement patterns per class.

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "lvlm/dataset.hpp"

namespace lvlm {

enum class LesionStructure {
  uniform,
  central_scar,  // inner disk at `inner` intensity in ART
  rim_filling,   // ART: bright annulus around an unenhanced interior; PV: filled disk
};

std::string_view to_string(LesionStructure s);
LesionStructure parse_lesion_structure(std::string_view text);

struct PhaseProfile {
  std::string abbrev;
  double background = 0.5;               // all phases
  std::array<double, 3> lesion{};        // NC, ART, PV (ART is the rim for rim_filling)
  LesionStructure structure = LesionStructure::uniform;
  double inner = 0.0;                    // scar intensity / unenhanced interior in ART
  double inner_fraction = 0.3;           // scar radius, or interior radius for rim_filling, over lesion radius
  double noise_sigma = 0.05;
  double radius_min = 14.0;
  double radius_max = 30.0;
  double jitter = 12.0;                  // max centre offset from the image centre

  void validate(std::size_t image_size) const;
};

/// CYST, FNH, HCC, HEM.
std::vector<PhaseProfile> default_profiles();

struct SyntheticConfig {
  std::vector<PhaseProfile> profiles = default_profiles();
  std::size_t cases_per_class = 15;
  std::size_t slices_min = 4;
  std::size_t slices_max = 8;
  std::uint64_t seed = 42;
  std::size_t image_size = kSliceSize;
  double slice_radius_min_ratio = 0.8;  // per-slice radius r * U(ratio, 1)
  double slice_shift = 2.0;             // per-slice centre drift
};

/// Cases are named <ABBREV>_<nnn>, slices s0, s1, ...
Dataset generate_synthetic(const SyntheticConfig& config, const ClassRegistry& classes = ClassRegistry::defaults());

/// Noise-free rendering of one slice.
Tensor render_lesion(const PhaseProfile& profile, std::size_t image_size, double cy, double cx, double radius);

/// JSON list of profile objects; missing fields keep their defaults.
std::vector<PhaseProfile> parse_profiles(std::string_view json_text);
std::string profiles_to_json(const std::vector<PhaseProfile>& profiles);

}  // namespace lvlm
