#include "lvlm/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <json.hpp>

#include "lvlm/error.hpp"
#include "lvlm/random.hpp"

namespace lvlm {

using nlohmann::ordered_json;

std::string_view to_string(LesionStructure s) {
  switch (s) {
    case LesionStructure::uniform: return "uniform";
    case LesionStructure::central_scar: return "central-scar";
    case LesionStructure::rim_filling: return "rim-filling";
  }
  return "?";
}

LesionStructure parse_lesion_structure(std::string_view text) {
  if (text == "uniform") return LesionStructure::uniform;
  if (text == "central-scar") return LesionStructure::central_scar;
  if (text == "rim-filling") return LesionStructure::rim_filling;
  fail(Errc::invalid_argument, "unknown lesion structure '" + std::string(text) +
                                   "' (expected uniform, central-scar, rim-filling)");
}

void PhaseProfile::validate(std::size_t image_size) const {
  auto unit = [&](double v, const char* what) {
    if (!(v >= 0 && v <= 1)) fail(Errc::invalid_argument, "profile " + abbrev + ": " + what + " outside [0, 1]");
  };
  unit(background, "background");
  for (double v : lesion) unit(v, "lesion intensity");
  unit(inner, "inner intensity");
  if (!(inner_fraction > 0 && inner_fraction < 1)) {
    fail(Errc::invalid_argument, "profile " + abbrev + ": inner_fraction must be in (0, 1)");
  }
  if (!(noise_sigma >= 0)) fail(Errc::invalid_argument, "profile " + abbrev + ": noise_sigma must be >= 0");
  if (!(radius_min > 0 && radius_min <= radius_max && jitter >= 0)) {
    fail(Errc::invalid_argument, "profile " + abbrev + ": need 0 < radius_min <= radius_max and jitter >= 0");
  }
  if (radius_max + jitter > static_cast<double>(image_size) / 2) {
    fail(Errc::invalid_argument, "profile " + abbrev + ": radius_max + jitter exceeds half the image size (" +
                                     std::to_string(image_size / 2) + ")");
  }
}

std::vector<PhaseProfile> default_profiles() {
  std::vector<PhaseProfile> p(4);
  p[0].abbrev = "CYST";
  p[0].lesion = {0.20, 0.20, 0.20};

  p[1].abbrev = "FNH";
  p[1].lesion = {0.50, 0.85, 0.55};
  p[1].structure = LesionStructure::central_scar;
  p[1].inner = 0.45;
  p[1].inner_fraction = 0.3;

  p[2].abbrev = "HCC";
  p[2].lesion = {0.40, 0.80, 0.35};

  p[3].abbrev = "HEM";
  p[3].lesion = {0.35, 0.80, 0.70};
  p[3].structure = LesionStructure::rim_filling;
  p[3].inner = 0.35;
  p[3].inner_fraction = 0.7;
  return p;
}

Tensor render_lesion(const PhaseProfile& profile, std::size_t image_size, double cy, double cx, double radius) {
  Tensor out({kPhases, image_size, image_size}, static_cast<float>(profile.background));
  const double inner_r = profile.inner_fraction * radius;
  for (std::size_t y = 0; y < image_size; ++y) {
    for (std::size_t x = 0; x < image_size; ++x) {
      const double dy = static_cast<double>(y) + 0.5 - cy;
      const double dx = static_cast<double>(x) + 0.5 - cx;
      const double d = std::sqrt(dy * dy + dx * dx);
      if (d > radius) continue;
      for (std::size_t c = 0; c < kPhases; ++c) {
        double v = profile.lesion[c];
        if (c == 1 && d <= inner_r && profile.structure != LesionStructure::uniform) v = profile.inner;
        out[(c * image_size + y) * image_size + x] = static_cast<float>(v);
      }
    }
  }
  return out;
}

Dataset generate_synthetic(const SyntheticConfig& config, const ClassRegistry& classes) {
  if (config.cases_per_class == 0) fail(Errc::invalid_argument, "cases_per_class must be >= 1");
  if (config.slices_min == 0 || config.slices_min > config.slices_max) {
    fail(Errc::invalid_argument, "slice range must satisfy 1 <= min <= max");
  }
  if (config.image_size < 2) fail(Errc::invalid_argument, "image_size must be >= 2");
  if (!(config.slice_radius_min_ratio > 0 && config.slice_radius_min_ratio <= 1) || config.slice_shift < 0) {
    fail(Errc::invalid_argument, "slice_radius_min_ratio must be in (0, 1] and slice_shift >= 0");
  }

  Dataset ds;
  ds.classes = classes;
  const double centre = static_cast<double>(config.image_size) / 2;
  for (const auto& label : classes.labels()) {
    const PhaseProfile* profile = nullptr;
    for (const auto& p : config.profiles)
      if (p.abbrev == label.abbrev) profile = &p;
    if (!profile) fail(Errc::invalid_argument, "no synthetic profile for class " + label.abbrev);
    profile->validate(config.image_size);
    if (profile->radius_max + profile->jitter + config.slice_shift > centre) {
      fail(Errc::invalid_argument, "profile " + label.abbrev + ": lesion can leave the image after per-slice drift");
    }

    for (std::size_t k = 0; k < config.cases_per_class; ++k) {
      Rng rng(derive_seed(config.seed, "synthetic/" + label.abbrev, k));
      char id[64];
      std::snprintf(id, sizeof id, "%s_%03zu", label.abbrev.c_str(), k);
      CaseRecord rec{id, label.abbrev, {}};
      const double radius = rng.uniform(profile->radius_min, profile->radius_max);
      const double cy = centre + rng.uniform(-profile->jitter, profile->jitter);
      const double cx = centre + rng.uniform(-profile->jitter, profile->jitter);
      const std::size_t n_slices = config.slices_min + rng.below(config.slices_max - config.slices_min + 1);
      for (std::size_t s = 0; s < n_slices; ++s) {
        const double r = radius * rng.uniform(config.slice_radius_min_ratio, 1.0);
        const double sy = cy + rng.uniform(-config.slice_shift, config.slice_shift);
        const double sx = cx + rng.uniform(-config.slice_shift, config.slice_shift);
        Tensor px = render_lesion(*profile, config.image_size, sy, sx, r);
        if (profile->noise_sigma > 0) {
          for (auto& v : px.values()) {
            v = static_cast<float>(std::clamp(v + profile->noise_sigma * rng.normal(), 0.0, 1.0));
          }
        }
        rec.slices.push_back({"s" + std::to_string(s), std::move(px)});
      }
      ds.cases.push_back(std::move(rec));
    }
  }

  ordered_json prov;
  prov["kind"] = "synthetic";
  prov["seed"] = config.seed;
  prov["cases_per_class"] = config.cases_per_class;
  prov["slices_per_case"] = {config.slices_min, config.slices_max};
  prov["profiles"] = ordered_json::parse(profiles_to_json(config.profiles));
  ds.provenance = prov.dump();
  return ds;
}

std::vector<PhaseProfile> parse_profiles(std::string_view json_text) {
  std::vector<PhaseProfile> out;
  try {
    const auto doc = ordered_json::parse(json_text);
    if (!doc.is_array()) fail(Errc::invalid_argument, "profile file must hold a JSON array");
    for (const auto& j : doc) {
      PhaseProfile p;
      p.abbrev = j.at("abbrev").get<std::string>();
      if (j.contains("background")) p.background = j["background"].get<double>();
      if (j.contains("lesion")) p.lesion = j["lesion"].get<std::array<double, 3>>();
      if (j.contains("structure")) p.structure = parse_lesion_structure(j["structure"].get<std::string>());
      if (j.contains("inner")) p.inner = j["inner"].get<double>();
      if (j.contains("inner_fraction")) p.inner_fraction = j["inner_fraction"].get<double>();
      if (j.contains("noise_sigma")) p.noise_sigma = j["noise_sigma"].get<double>();
      if (j.contains("radius")) {
        const auto r = j["radius"].get<std::array<double, 2>>();
        p.radius_min = r[0];
        p.radius_max = r[1];
      }
      if (j.contains("jitter")) p.jitter = j["jitter"].get<double>();
      out.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::invalid_argument, std::string("profile file: ") + e.what());
  }
  return out;
}

std::string profiles_to_json(const std::vector<PhaseProfile>& profiles) {
  ordered_json arr = ordered_json::array();
  for (const auto& p : profiles) {
    arr.push_back({{"abbrev", p.abbrev},
                   {"background", p.background},
                   {"lesion", p.lesion},
                   {"structure", to_string(p.structure)},
                   {"inner", p.inner},
                   {"inner_fraction", p.inner_fraction},
                   {"noise_sigma", p.noise_sigma},
                   {"radius", {p.radius_min, p.radius_max}},
                   {"jitter", p.jitter}});
  }
  return arr.dump();
}

}  // namespace lvlm
