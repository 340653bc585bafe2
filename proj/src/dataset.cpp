#include "lvlm/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <set>

#include <json.hpp>

#include "lvlm/container.hpp"
#include "lvlm/error.hpp"

namespace lvlm {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

void check_identifier(const std::string& id, const char* what) {
  if (id.empty() || id == "." || id == ".." || id.find_first_of("/\\") != std::string::npos) {
    fail(Errc::schema_mismatch, std::string("invalid ") + what + " '" + id + "'");
  }
}

std::string encode_slice(const Tensor& pixels) {
  std::string bytes(kSliceBytes, '\0');
  for (std::size_t i = 0; i < kSliceValues; ++i) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(pixels[i]);
    for (int b = 0; b < 4; ++b) bytes[4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
  }
  return bytes;
}

Tensor decode_slice(std::string_view bytes) {
  Tensor out({kPhases, kSliceSize, kSliceSize});
  for (std::size_t i = 0; i < kSliceValues; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= std::uint32_t(static_cast<unsigned char>(bytes[4 * i + b])) << (8 * b);
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

template <typename J>
const J& require_field(const J& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) fail(Errc::schema_mismatch, where + ": missing field '" + key + "'");
  return obj.at(key);
}

}  // namespace

std::size_t Dataset::num_slices() const {
  std::size_t n = 0;
  for (const auto& c : cases) n += c.slices.size();
  return n;
}

void Dataset::validate() const {
  std::set<std::string> ids;
  for (const auto& c : cases) {
    check_identifier(c.case_id, "case id");
    if (!ids.insert(c.case_id).second) fail(Errc::schema_mismatch, "duplicate case id '" + c.case_id + "'");
    classes.find(c.label);
    if (c.slices.empty()) fail(Errc::schema_mismatch, "case " + c.case_id + " has no slices");
    std::set<std::string> slice_ids;
    for (const auto& s : c.slices) {
      check_identifier(s.slice_id, "slice id");
      if (!slice_ids.insert(s.slice_id).second) {
        fail(Errc::schema_mismatch, "duplicate slice id '" + s.slice_id + "' in case " + c.case_id);
      }
      require_shape(s.pixels.shape(), {kPhases, kSliceSize, kSliceSize}, "slice pixels");
      check_unit_range(s.pixels.values(), c.case_id + "/" + s.slice_id);
    }
  }
}

void check_unit_range(std::span<const float> values, const std::string& what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    const float v = values[i];
    if (!(v >= 0.0f && v <= 1.0f)) {
      fail(Errc::out_of_range, what + ": value " + std::to_string(v) + " at index " + std::to_string(i) +
                                   " outside [0, 1]");
    }
  }
}

void save_dataset(const fs::path& dir, const Dataset& dataset) {
  dataset.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(Errc::io, "cannot create directory " + dir.string() + ": " + ec.message());

  ordered_json manifest;
  manifest["version"] = kManifestVersion;
  manifest["classes"] = ordered_json::array();
  for (const auto& l : dataset.classes.labels()) {
    manifest["classes"].push_back({{"abbrev", l.abbrev}, {"full_name", l.full_name}});
  }
  manifest["cases"] = ordered_json::array();
  for (const auto& c : dataset.cases) {
    fs::create_directories(dir / c.case_id, ec);
    if (ec) fail(Errc::io, "cannot create directory " + (dir / c.case_id).string() + ": " + ec.message());
    ordered_json files = ordered_json::array();
    for (const auto& s : c.slices) {
      const std::string rel = c.case_id + "/" + s.slice_id + ".f32";
      write_file(dir / rel, encode_slice(s.pixels));
      files.push_back(rel);
    }
    manifest["cases"].push_back({{"case_id", c.case_id}, {"class", c.label}, {"slices", files}});
  }
  ordered_json provenance;
  try {
    provenance = ordered_json::parse(dataset.provenance);
  } catch (const nlohmann::json::exception&) {
    provenance = {{"kind", "external"}, {"note", dataset.provenance}};
  }
  manifest["provenance"] = provenance;
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  const std::string where = manifest_path.string();
  ordered_json manifest;
  try {
    manifest = ordered_json::parse(read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::schema_mismatch, where + ": malformed JSON: " + e.what());
  }

  Dataset ds;
  try {
    const int version = require_field(manifest, "version", where).template get<int>();
    if (version != kManifestVersion) {
      fail(Errc::bad_version, where + ": manifest version " + std::to_string(version) + ", expected " +
                                  std::to_string(kManifestVersion));
    }
    for (const auto& c : require_field(manifest, "classes", where)) {
      ds.classes.add(require_field(c, "abbrev", where).template get<std::string>(),
                     require_field(c, "full_name", where).template get<std::string>());
    }
    for (const auto& c : require_field(manifest, "cases", where)) {
      CaseRecord rec;
      rec.case_id = require_field(c, "case_id", where).template get<std::string>();
      check_identifier(rec.case_id, "case id");
      rec.label = require_field(c, "class", where).template get<std::string>();
      if (!ds.classes.contains(rec.label)) {
        fail(Errc::unknown_class, where + ": case " + rec.case_id + " has class '" + rec.label +
                                      "' not in the manifest class list");
      }
      for (const auto& f : require_field(c, "slices", where)) {
        const fs::path rel(f.template get<std::string>());
        if (rel.is_absolute() || rel.parent_path() != fs::path(rec.case_id) || rel.extension() != ".f32") {
          fail(Errc::schema_mismatch, where + ": slice file '" + rel.string() + "' must be " + rec.case_id +
                                          "/<slice_id>.f32");
        }
        const std::string bytes = read_file(dir / rel);
        if (bytes.size() != kSliceBytes) {
          fail(Errc::length_mismatch, (dir / rel).string() + ": expected " + std::to_string(kSliceBytes) +
                                          " bytes, found " + std::to_string(bytes.size()));
        }
        MultiPhaseSlice s{rel.stem().string(), decode_slice(bytes)};
        check_unit_range(s.pixels.values(), (dir / rel).string());
        rec.slices.push_back(std::move(s));
      }
      ds.cases.push_back(std::move(rec));
    }
    ds.provenance = manifest.contains("provenance") ? manifest["provenance"].dump() : R"({"kind":"external"})";
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::schema_mismatch, where + ": " + e.what());
  }
  ds.validate();
  return ds;
}

std::vector<float> resize_bilinear(std::span<const float> plane, std::size_t height, std::size_t width,
                                   std::size_t out_height, std::size_t out_width) {
  if (plane.size() != height * width) fail(Errc::shape, "resize_bilinear: plane size does not match dimensions");
  std::vector<float> out(out_height * out_width);
  const double sy = static_cast<double>(height) / static_cast<double>(out_height);
  const double sx = static_cast<double>(width) / static_cast<double>(out_width);
  auto source = [](double scale, std::size_t o, std::size_t n, std::size_t& i0, std::size_t& i1, double& frac) {
    double s = (static_cast<double>(o) + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(n - 1));
    i0 = static_cast<std::size_t>(std::floor(s));
    i1 = std::min(i0 + 1, n - 1);
    frac = s - static_cast<double>(i0);
  };
  for (std::size_t oy = 0; oy < out_height; ++oy) {
    std::size_t y0, y1;
    double fy;
    source(sy, oy, height, y0, y1, fy);
    for (std::size_t ox = 0; ox < out_width; ++ox) {
      std::size_t x0, x1;
      double fx;
      source(sx, ox, width, x0, x1, fx);
      const double top = (1 - fx) * plane[y0 * width + x0] + fx * plane[y0 * width + x1];
      const double bottom = (1 - fx) * plane[y1 * width + x0] + fx * plane[y1 * width + x1];
      out[oy * out_width + ox] = static_cast<float>((1 - fy) * top + fy * bottom);
    }
  }
  return out;
}

Tensor preprocess(const Tensor& raw, std::size_t target) {
  require_rank(raw.shape(), 3, "preprocess input");
  if (raw.dim(0) != kPhases) fail(Errc::shape, "preprocess: expected 3 phases, got " + shape_to_string(raw.shape()));
  const std::size_t h = raw.dim(1), w = raw.dim(2);
  if (h < 2 || w < 2) fail(Errc::shape, "preprocess: spatial dims must be >= 2, got " + shape_to_string(raw.shape()));
  if (!raw.all_finite()) fail(Errc::out_of_range, "preprocess: non-finite input value");

  Tensor out({kPhases, target, target});
  for (std::size_t c = 0; c < kPhases; ++c) {
    auto plane = resize_bilinear(raw.values().subspan(c * h * w, h * w), h, w, target, target);
    std::copy(plane.begin(), plane.end(), out.data() + c * target * target);
  }
  const auto [lo, hi] = std::minmax_element(out.values().begin(), out.values().end());
  const double mn = *lo, mx = *hi;
  if (mx == mn) {
    out.fill(0.5f);
    return out;
  }
  for (auto& v : out.values()) v = static_cast<float>((v - mn) / (mx - mn));
  return out;
}

Tensor stack_phases(const Tensor& nc, const Tensor& art, const Tensor& pv) {
  require_rank(nc.shape(), 2, "NC phase");
  require_shape(art.shape(), nc.shape(), "ART phase");
  require_shape(pv.shape(), nc.shape(), "PV phase");
  Tensor out({kPhases, nc.dim(0), nc.dim(1)});
  const std::size_t plane = nc.size();
  std::copy(nc.values().begin(), nc.values().end(), out.data());
  std::copy(art.values().begin(), art.values().end(), out.data() + plane);
  std::copy(pv.values().begin(), pv.values().end(), out.data() + 2 * plane);
  return out;
}

std::vector<SliceRef> collect_slices(const Dataset& dataset, std::span<const std::size_t> case_indices) {
  std::vector<SliceRef> refs;
  for (std::size_t ci : case_indices) {
    const auto& c = dataset.cases.at(ci);
    const std::size_t label = dataset.label_index(c);
    for (std::size_t s = 0; s < c.slices.size(); ++s) refs.push_back({ci, s, label});
  }
  return refs;
}

std::vector<SliceRef> collect_slices(const Dataset& dataset) {
  std::vector<std::size_t> all(dataset.cases.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return collect_slices(dataset, all);
}

template <typename T>
BasicTensor<T> make_batch(const Dataset& dataset, std::span<const SliceRef> refs) {
  if (refs.empty()) fail(Errc::invalid_argument, "make_batch: no slices");
  const Shape& s = dataset.cases.at(refs[0].case_index).slices.at(refs[0].slice_index).pixels.shape();
  const std::size_t per = shape_numel(s);
  BasicTensor<T> out({refs.size(), s[0], s[1], s[2]});
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& px = dataset.cases.at(refs[i].case_index).slices.at(refs[i].slice_index).pixels;
    require_shape(px.shape(), s, "slice pixels");
    std::copy(px.values().begin(), px.values().end(), out.data() + i * per);
  }
  return out;
}

template Tensor make_batch<float>(const Dataset&, std::span<const SliceRef>);
template Tensor64 make_batch<double>(const Dataset&, std::span<const SliceRef>);

}  // namespace lvlm
