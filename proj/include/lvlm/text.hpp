#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lvlm/container.hpp"
#include "lvlm/ops.hpp"
#include "lvlm/params.hpp"

namespace lvlm {

struct ClassLabel {
  std::string abbrev;
  std::string full_name;
  std::size_t index = 0;
};

/// Ordered class list with label expansions; indices are positions 0..C-1.
class ClassRegistry {
 public:
  /// CYST, FNH, HCC, HEM.
  static ClassRegistry defaults();

  const ClassLabel& add(std::string abbrev, std::string full_name);
  bool contains(std::string_view abbrev) const;
  /// Throws Errc::unknown_class listing the registered labels.
  const ClassLabel& find(std::string_view abbrev) const;
  std::string expand(std::string_view abbrev) const { return find(abbrev).full_name; }

  /// Classes in the given order, re-indexed; each must be registered here.
  ClassRegistry select(std::span<const std::string> abbrevs) const;

  const std::vector<ClassLabel>& labels() const { return labels_; }
  std::vector<std::string> abbrevs() const;
  std::size_t size() const { return labels_.size(); }

 private:
  std::vector<ClassLabel> labels_;
};

std::string expand_label(const ClassRegistry& registry, std::string_view abbrev);

inline constexpr std::string_view kLabelPlaceholder = "{label}";
inline constexpr std::string_view kDefaultPromptTemplate = "a CT scan of tumors {label}";

/// Substitutes the single "{label}" placeholder; other templates are rejected.
std::string build_prompt(std::string_view full_name, std::string_view prompt_template = kDefaultPromptTemplate);

/// Deterministic unit vector keyed by (FNV-1a 64 of the prompt bytes, seed).
/// Stand-in for a frozen sentence encoder.
std::vector<float> pseudo_embed(std::string_view prompt, std::size_t dim, std::uint64_t seed);

inline constexpr std::size_t kDefaultTextDim = 768;
inline constexpr std::string_view kTextEmbeddingPrefix = "text_emb/";

/// Frozen per-class text embeddings, one row per class in class-index order.
class TextEmbeddingTable {
 public:
  TextEmbeddingTable(std::vector<std::string> classes, Tensor rows, std::string provenance);

  const std::vector<std::string>& classes() const { return classes_; }
  std::size_t num_classes() const { return classes_.size(); }
  std::size_t dim() const { return rows_.dim(1); }
  const Tensor& rows() const { return rows_; }
  std::span<const float> row(std::size_t c) const;
  const std::string& provenance() const { return provenance_; }

  /// Entries "text_emb/<abbrev>" of shape [D_t].
  NamedTensors to_named_tensors() const;

 private:
  std::vector<std::string> classes_;
  Tensor rows_;
  std::string provenance_;
};

/// Builds prompts (expand + template) and embeds each with pseudo_embed.
TextEmbeddingTable make_pseudo_table(const ClassRegistry& classes, std::string_view prompt_template, std::size_t dim,
                                     std::uint64_t seed);

/// Picks "text_emb/<abbrev>" for each class from `tensors`; extra entries are ignored.
TextEmbeddingTable table_from_tensors(const NamedTensors& tensors, std::span<const std::string> class_list,
                                      std::string provenance);
TextEmbeddingTable load_embedding_table(const std::filesystem::path& path, std::span<const std::string> class_list);
void save_embedding_table(const std::filesystem::path& path, const TextEmbeddingTable& table);

// FC_T: fc_t.w [D, D_t], fc_t.b [D].

template <typename T>
void init_projection_head(ParamStore<T>& params, std::size_t embed_dim, std::size_t text_dim, std::uint64_t seed);

/// [C, D_t] -> [C, D]
template <typename T>
BasicTensor<T> project_text(const BasicTensor<T>& weight, std::span<const T> bias, const BasicTensor<T>& table_rows);

/// Gradients for the head only; the table receives none.
template <typename T>
void project_text_backward(const ParamStore<T>& params, const BasicTensor<T>& table_rows,
                           const BasicTensor<T>& grad_output, ParamStore<T>& grads);

}  // namespace lvlm
