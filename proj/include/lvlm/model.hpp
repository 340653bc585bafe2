#pragma once

// Full pipeline: encoder + FC_I -> image embeddings; frozen text rows + FC_T -> class
// embeddings; scaled cosine similarities -> softmax cross-entropy.
//
// Tensors beyond the encoder's:
//   fc_t.w [D, D_t], fc_t.b [D]
//   logit_scale [1]        learnable mode, holds log s
//   logit_scale.fixed [1]  fixed mode, holds s (constant)
//   text_emb/<abbrev> [D_t] per class (constant)

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lvlm/container.hpp"
#include "lvlm/encoder.hpp"
#include "lvlm/text.hpp"

namespace lvlm {

enum class ScaleMode { fixed, learnable };

inline const double kDefaultLogScale = std::log(1.0 / 0.07);

struct LogitScaleConfig {
  ScaleMode mode = ScaleMode::learnable;
  double value = kDefaultLogScale;  // s for fixed mode, initial log s for learnable mode

  /// "learnable", "learnable:<log_s>", "fixed:<s>".
  static LogitScaleConfig parse(std::string_view text);
  std::string to_string() const;
};

/// logits = scale * cosine(img, txt); scale must be positive.
template <typename T>
BasicTensor<T> compute_logits(const BasicTensor<T>& img_emb, const BasicTensor<T>& txt_emb, double scale);

struct ModelSpec {
  EncoderConfig encoder = EncoderConfig::preset("tiny-18");
  std::size_t text_dim = kDefaultTextDim;
  LogitScaleConfig logit_scale{};
  std::vector<std::string> classes{"CYST", "FNH", "HCC", "HEM"};

  void validate() const;
};

template <typename T>
struct ModelTape {
  EncoderTape<T> encoder;
  BasicTensor<T> img_emb;   // [N, D]
  BasicTensor<T> txt_rows;  // [C, D_t]
  BasicTensor<T> txt_emb;   // [C, D]
  BasicTensor<T> cosine;    // [N, C]
  double scale = 1;
};

template <typename T>
struct LossResult {
  T loss = 0;
  BasicTensor<T> logits;
};

class VlmModel {
 public:
  explicit VlmModel(ModelSpec spec);

  const ModelSpec& spec() const { return spec_; }
  const ImageEncoder& encoder() const { return encoder_; }
  std::size_t num_classes() const { return spec_.classes.size(); }

  /// Fresh encoder, FC_I, FC_T and logit scale from `seed`; text rows copied from `table`
  /// (whose class order must match the spec).
  template <typename T>
  ParamStore<T> init(const TextEmbeddingTable& table, std::uint64_t seed) const;

  template <typename T>
  BasicTensor<T> text_rows(const ParamStore<T>& params) const;
  template <typename T>
  double scale(const ParamStore<T>& params) const;

  /// Checks that every tensor the model reads is present with the expected shape.
  template <typename T>
  void check_params(const ParamStore<T>& params) const;

  template <typename T>
  BasicTensor<T> logits(const ParamStore<T>& params, const BasicTensor<T>& batch, Mode mode,
                        ParamStore<T>* stats_sink = nullptr, ModelTape<T>* tape = nullptr) const;

  /// Forward plus, when `grads` is non-null, backward into the entries present in `grads`.
  /// `signature` receives the nonsmooth branch fingerprint of the forward pass.
  template <typename T>
  LossResult<T> loss(const ParamStore<T>& params, const BasicTensor<T>& batch, std::span<const std::size_t> labels,
                     Mode mode, ParamStore<T>* stats_sink = nullptr, ParamStore<T>* grads = nullptr,
                     std::uint64_t* signature = nullptr) const;

 private:
  ModelSpec spec_;
  ImageEncoder encoder_;
};

template <typename T>
struct Classification {
  std::vector<std::size_t> predictions;
  BasicTensor<T> probabilities;  // [N, C]
};

/// Eval-mode prediction; never mutates `params`. Processes the batch in chunks of `chunk` samples.
template <typename T>
Classification<T> classify(const VlmModel& model, const ParamStore<T>& params, const BasicTensor<T>& batch,
                           std::size_t chunk = 64);

/// Argmax rows of a logits/probability matrix (first maximum wins).
template <typename T>
std::vector<std::size_t> argmax_rows(const BasicTensor<T>& m);

NamedTensors to_named_tensors(const ParamStore<float>& params);
void save_model(const std::filesystem::path& path, const ParamStore<float>& params);

/// Rebuilds a store from container entries using the kinds the model assigns to each name.
ParamStore<float> params_from_tensors(const NamedTensors& tensors);

/// Kind of a tensor by name: running statistics are buffers, text rows and fixed scales constants.
ParamKind kind_for_name(std::string_view name);

}  // namespace lvlm
