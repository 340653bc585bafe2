#pragma once

// ResNet-style image encoder followed by the FC_I projection into the shared space.
//
// Parameter names (stable; they are the weights-file contract):
//   stem.conv.w, stem.bn.{gamma,beta,running_mean,running_var}
//   stage{i}.block{j}.conv{k}.w, stage{i}.block{j}.bn{k}.*        i, j, k are 1-based
//   stage{i}.block{j}.shortcut.conv.w, stage{i}.block{j}.shortcut.bn.*   (projection blocks only)
//   fc_i.w [D, F], fc_i.b [D]

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lvlm/ops.hpp"
#include "lvlm/params.hpp"

namespace lvlm {

enum class BlockKind { basic, bottleneck };
enum class StemKind {
  compact,   // 3x3 conv stride 1 + 2x2 max-pool stride 2, for 128x128 ROI inputs
  imagenet,  // 7x7 conv stride 2 + 3x3 max-pool stride 2, for ImageNet weight layouts
};

std::string_view to_string(BlockKind kind);
std::string_view to_string(StemKind kind);
BlockKind parse_block_kind(std::string_view text);
StemKind parse_stem_kind(std::string_view text);

struct EncoderConfig {
  std::vector<std::size_t> stage_blocks{2, 2, 2, 2};
  std::vector<std::size_t> stage_channels{16, 32, 64, 128};
  BlockKind block_kind = BlockKind::basic;
  StemKind stem = StemKind::compact;
  std::size_t embed_dim = 1024;
  std::size_t input_channels = 3;  // NC, ART, PV
  std::size_t input_size = 128;    // square inputs
  BatchNormOptions norm{};

  std::size_t expansion() const { return block_kind == BlockKind::bottleneck ? 4 : 1; }
  std::size_t feature_dim() const { return stage_channels.back() * expansion(); }
  void validate() const;

  /// "tiny-18", "tiny-50", "resnet18", "resnet50".
  static EncoderConfig preset(std::string_view name);
};

struct ConvLayer {
  std::string name;
  std::size_t in = 0, out = 0, kernel = 1, stride = 1, padding = 0;
  Conv2dOptions options() const { return {stride, padding}; }
};

struct NormLayer {
  std::string name;
  std::size_t channels = 0;
};

struct BlockSpec {
  std::string name;
  BlockKind kind = BlockKind::basic;
  std::size_t in_channels = 0, out_channels = 0, stride = 1;
  std::vector<ConvLayer> convs;  // main branch, conv k followed by norm k
  std::vector<NormLayer> norms;
  std::optional<ConvLayer> shortcut_conv;  // 1x1 projection when stride > 1 or width changes
  std::optional<NormLayer> shortcut_norm;
};

BlockSpec make_block(std::string name, BlockKind kind, std::size_t in_channels, std::size_t width,
                     std::size_t stride);

template <typename T>
struct BlockTape {
  BasicTensor<T> input;
  std::vector<BatchNormCache<T>> norms;
  std::vector<BasicTensor<T>> inner_relu;  // activations between convs of the main branch
  BatchNormCache<T> shortcut_norm;
  BasicTensor<T> output;  // after the final relu
};

template <typename T>
struct EncoderTape {
  BasicTensor<T> input;
  BatchNormCache<T> stem_norm;
  BasicTensor<T> stem_relu;
  std::vector<std::size_t> pool_argmax;
  std::vector<BlockTape<T>> blocks;
  Shape feature_shape;  // last block output
  BasicTensor<T> pooled;  // FC_I input [N, F]

  /// Fingerprint of every ReLU mask and max-pool winner in the pass.
  std::uint64_t nonsmooth_signature() const;
};

class ImageEncoder {
 public:
  explicit ImageEncoder(EncoderConfig config);

  const EncoderConfig& config() const { return config_; }
  const ConvLayer& stem_conv() const { return stem_conv_; }
  const NormLayer& stem_norm() const { return stem_norm_; }
  Pool2dOptions stem_pool() const;
  const std::vector<BlockSpec>& blocks() const { return blocks_; }

  /// Appends freshly initialized encoder tensors (He-normal weights, unit gamma, zero beta,
  /// running mean 0 / var 1) to `params`, deterministic per seed.
  template <typename T>
  void init_params(ParamStore<T>& params, std::uint64_t seed) const;

  /// Initializes fc_i only.
  template <typename T>
  void init_projection(ParamStore<T>& params, std::uint64_t seed) const;

  /// Names of every tensor the encoder owns, in creation order.
  std::vector<std::string> tensor_names() const;

 private:
  EncoderConfig config_;
  ConvLayer stem_conv_;
  NormLayer stem_norm_;
  std::vector<BlockSpec> blocks_;
};

template <typename T>
ParamStore<T> build_encoder(const EncoderConfig& config, std::uint64_t seed);

/// relu(F(x) + shortcut(x)). In train mode, running statistics are written to
/// `stats_sink` (skipping frozen buffers); pass nullptr to leave them untouched.
template <typename T>
BasicTensor<T> residual_block(const BlockSpec& block, const ParamStore<T>& params, BasicTensor<T> input,
                              Mode mode, const BatchNormOptions& norm, ParamStore<T>* stats_sink = nullptr,
                              BlockTape<T>* tape = nullptr);

/// Accumulates parameter gradients into `grads` (entries absent from `grads` are skipped)
/// and returns the gradient w.r.t. the block input.
template <typename T>
BasicTensor<T> residual_block_backward(const BlockSpec& block, const ParamStore<T>& params, const BlockTape<T>& tape,
                                       const BasicTensor<T>& grad_output, ParamStore<T>& grads);

/// batch [N,3,S,S] -> raw (unnormalized) embeddings [N,D].
template <typename T>
BasicTensor<T> encode_images(const ImageEncoder& encoder, const ParamStore<T>& params, const BasicTensor<T>& batch,
                             Mode mode, ParamStore<T>* stats_sink = nullptr, EncoderTape<T>* tape = nullptr);

template <typename T>
void encode_images_backward(const ImageEncoder& encoder, const ParamStore<T>& params, const EncoderTape<T>& tape,
                            const BasicTensor<T>& grad_embeddings, ParamStore<T>& grads);

/// Adds `delta` into grads[name] when that entry exists.
template <typename T>
void accumulate_grad(ParamStore<T>& grads, std::string_view name, const BasicTensor<T>& delta);

}  // namespace lvlm
