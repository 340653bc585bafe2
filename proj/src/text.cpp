#include "lvlm/text.hpp"

#include <cmath>

#include "lvlm/encoder.hpp"
#include "lvlm/error.hpp"
#include "lvlm/random.hpp"

namespace lvlm {

ClassRegistry ClassRegistry::defaults() {
  ClassRegistry r;
  r.add("CYST", "Cyst");
  r.add("FNH", "Focal Nodular Hyperplasia");
  r.add("HCC", "Hepatocellular Carcinoma");
  r.add("HEM", "Hemangioma");
  return r;
}

const ClassLabel& ClassRegistry::add(std::string abbrev, std::string full_name) {
  if (abbrev.empty() || full_name.empty()) fail(Errc::invalid_argument, "class abbreviation and name must be non-empty");
  if (contains(abbrev)) fail(Errc::invalid_argument, "class '" + abbrev + "' registered twice");
  labels_.push_back({std::move(abbrev), std::move(full_name), labels_.size()});
  return labels_.back();
}

bool ClassRegistry::contains(std::string_view abbrev) const {
  for (const auto& l : labels_)
    if (l.abbrev == abbrev) return true;
  return false;
}

const ClassLabel& ClassRegistry::find(std::string_view abbrev) const {
  for (const auto& l : labels_)
    if (l.abbrev == abbrev) return l;
  std::string known;
  for (const auto& l : labels_) known += (known.empty() ? "" : ", ") + l.abbrev;
  fail(Errc::unknown_class, "unknown class label '" + std::string(abbrev) + "' (known: " + known + ")");
}

ClassRegistry ClassRegistry::select(std::span<const std::string> abbrevs) const {
  ClassRegistry out;
  for (const auto& a : abbrevs) out.add(a, find(a).full_name);
  return out;
}

std::vector<std::string> ClassRegistry::abbrevs() const {
  std::vector<std::string> out;
  for (const auto& l : labels_) out.push_back(l.abbrev);
  return out;
}

std::string expand_label(const ClassRegistry& registry, std::string_view abbrev) { return registry.expand(abbrev); }

std::string build_prompt(std::string_view full_name, std::string_view prompt_template) {
  const auto first = prompt_template.find(kLabelPlaceholder);
  if (first == std::string_view::npos) {
    fail(Errc::bad_template, "prompt template '" + std::string(prompt_template) + "' has no {label} placeholder");
  }
  if (prompt_template.find(kLabelPlaceholder, first + 1) != std::string_view::npos) {
    fail(Errc::bad_template, "prompt template '" + std::string(prompt_template) + "' has more than one {label} placeholder");
  }
  std::string out(prompt_template.substr(0, first));
  out += full_name;
  out += prompt_template.substr(first + kLabelPlaceholder.size());
  return out;
}

std::vector<float> pseudo_embed(std::string_view prompt, std::size_t dim, std::uint64_t seed) {
  if (dim < 2) fail(Errc::invalid_argument, "pseudo_embed: dimension must be >= 2");
  Rng rng(splitmix64(fnv1a64(prompt) ^ splitmix64(seed)));
  std::vector<double> v(dim);
  double sq = 0;
  for (auto& x : v) {
    x = rng.normal();
    sq += x * x;
  }
  const double norm = std::sqrt(sq);
  std::vector<float> out(dim);
  for (std::size_t i = 0; i < dim; ++i) out[i] = static_cast<float>(v[i] / norm);
  return out;
}

TextEmbeddingTable::TextEmbeddingTable(std::vector<std::string> classes, Tensor rows, std::string provenance)
    : classes_(std::move(classes)), rows_(std::move(rows)), provenance_(std::move(provenance)) {
  require_rank(rows_.shape(), 2, "text embedding table");
  if (rows_.dim(0) != classes_.size()) {
    fail(Errc::shape, "text embedding table has " + std::to_string(rows_.dim(0)) + " rows for " +
                          std::to_string(classes_.size()) + " classes");
  }
}

std::span<const float> TextEmbeddingTable::row(std::size_t c) const {
  return rows_.values().subspan(c * dim(), dim());
}

NamedTensors TextEmbeddingTable::to_named_tensors() const {
  NamedTensors out;
  for (std::size_t c = 0; c < classes_.size(); ++c) {
    auto r = row(c);
    out.push_back({std::string(kTextEmbeddingPrefix) + classes_[c], Tensor({dim()}, std::vector<float>(r.begin(), r.end()))});
  }
  return out;
}

TextEmbeddingTable make_pseudo_table(const ClassRegistry& classes, std::string_view prompt_template, std::size_t dim,
                                     std::uint64_t seed) {
  Tensor rows({classes.size(), dim});
  for (const auto& label : classes.labels()) {
    const auto v = pseudo_embed(build_prompt(label.full_name, prompt_template), dim, seed);
    std::copy(v.begin(), v.end(), rows.data() + label.index * dim);
  }
  return TextEmbeddingTable(classes.abbrevs(), std::move(rows),
                            "pseudo(seed=" + std::to_string(seed) + ", template=\"" + std::string(prompt_template) + "\")");
}

TextEmbeddingTable table_from_tensors(const NamedTensors& tensors, std::span<const std::string> class_list,
                                      std::string provenance) {
  std::vector<const Tensor*> found(class_list.size(), nullptr);
  for (std::size_t c = 0; c < class_list.size(); ++c) {
    const std::string key = std::string(kTextEmbeddingPrefix) + class_list[c];
    for (const auto& t : tensors)
      if (t.name == key) found[c] = &t.value;
    if (!found[c]) {
      fail(Errc::missing_entry, provenance + ": no embedding entry '" + key + "' for class " + class_list[c]);
    }
  }
  if (class_list.empty()) fail(Errc::invalid_argument, "text embedding table needs at least one class");
  const std::size_t dim = found[0]->size();
  for (std::size_t c = 0; c < class_list.size(); ++c) {
    if (found[c]->rank() != 1 || found[c]->size() != dim) {
      fail(Errc::dim_mismatch, provenance + ": embedding for " + class_list[c] + " has shape " +
                                   shape_to_string(found[c]->shape()) + ", expected [" + std::to_string(dim) + "] like " +
                                   class_list[0]);
    }
  }
  Tensor rows({class_list.size(), dim});
  for (std::size_t c = 0; c < class_list.size(); ++c) std::copy(found[c]->values().begin(), found[c]->values().end(), rows.data() + c * dim);
  return TextEmbeddingTable(std::vector<std::string>(class_list.begin(), class_list.end()), std::move(rows),
                            std::move(provenance));
}

TextEmbeddingTable load_embedding_table(const std::filesystem::path& path, std::span<const std::string> class_list) {
  return table_from_tensors(load_tensors(path), class_list, path.string());
}

void save_embedding_table(const std::filesystem::path& path, const TextEmbeddingTable& table) {
  save_tensors(path, table.to_named_tensors());
}

template <typename T>
void init_projection_head(ParamStore<T>& params, std::size_t embed_dim, std::size_t text_dim, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "fc_t"));
  BasicTensor<T> w({embed_dim, text_dim});
  const double std_dev = std::sqrt(2.0 / static_cast<double>(text_dim));
  for (auto& v : w.values()) v = static_cast<T>(std_dev * rng.normal());
  params.add("fc_t.w", std::move(w));
  params.add("fc_t.b", BasicTensor<T>({embed_dim}));
}

template <typename T>
BasicTensor<T> project_text(const BasicTensor<T>& weight, std::span<const T> bias, const BasicTensor<T>& table_rows) {
  if (table_rows.rank() != 2 || weight.rank() != 2 || weight.dim(1) != table_rows.dim(1)) {
    fail(Errc::dim_mismatch, "project_text: head expects text width " +
                                 (weight.rank() == 2 ? std::to_string(weight.dim(1)) : std::string("?")) +
                                 ", table rows are " + shape_to_string(table_rows.shape()));
  }
  return linear(table_rows, weight, bias);
}

template <typename T>
void project_text_backward(const ParamStore<T>& params, const BasicTensor<T>& table_rows,
                           const BasicTensor<T>& grad_output, ParamStore<T>& grads) {
  auto g = linear_backward(table_rows, params.get("fc_t.w"), grad_output, false);
  accumulate_grad(grads, "fc_t.w", g.weight);
  accumulate_grad(grads, "fc_t.b", g.bias);
}

template void init_projection_head<float>(ParamStore<float>&, std::size_t, std::size_t, std::uint64_t);
template void init_projection_head<double>(ParamStore<double>&, std::size_t, std::size_t, std::uint64_t);
template BasicTensor<float> project_text<float>(const BasicTensor<float>&, std::span<const float>, const BasicTensor<float>&);
template BasicTensor<double> project_text<double>(const BasicTensor<double>&, std::span<const double>, const BasicTensor<double>&);
template void project_text_backward<float>(const ParamStore<float>&, const BasicTensor<float>&, const BasicTensor<float>&,
                                           ParamStore<float>&);
template void project_text_backward<double>(const ParamStore<double>&, const BasicTensor<double>&,
                                            const BasicTensor<double>&, ParamStore<double>&);

}  // namespace lvlm
