#include "lvlm/encoder.hpp"

#include <cmath>

#include "lvlm/error.hpp"
#include "lvlm/random.hpp"

namespace lvlm {

std::string_view to_string(BlockKind kind) { return kind == BlockKind::basic ? "basic" : "bottleneck"; }
std::string_view to_string(StemKind kind) { return kind == StemKind::compact ? "compact" : "imagenet"; }

BlockKind parse_block_kind(std::string_view text) {
  if (text == "basic") return BlockKind::basic;
  if (text == "bottleneck") return BlockKind::bottleneck;
  fail(Errc::invalid_argument, "unknown block kind '" + std::string(text) + "' (expected basic|bottleneck)");
}

StemKind parse_stem_kind(std::string_view text) {
  if (text == "compact") return StemKind::compact;
  if (text == "imagenet") return StemKind::imagenet;
  fail(Errc::invalid_argument, "unknown stem '" + std::string(text) + "' (expected compact|imagenet)");
}

EncoderConfig EncoderConfig::preset(std::string_view name) {
  EncoderConfig c;
  if (name == "tiny-18") return c;
  if (name == "tiny-50") {
    c.stage_blocks = {3, 4, 6, 3};
    c.block_kind = BlockKind::bottleneck;
    return c;
  }
  if (name == "resnet18" || name == "resnet50") {
    c.stage_channels = {64, 128, 256, 512};
    c.stem = StemKind::imagenet;
    if (name == "resnet50") {
      c.stage_blocks = {3, 4, 6, 3};
      c.block_kind = BlockKind::bottleneck;
    }
    return c;
  }
  fail(Errc::invalid_argument,
       "unknown encoder preset '" + std::string(name) + "' (expected tiny-18|tiny-50|resnet18|resnet50)");
}

namespace {
std::size_t conv_out(std::size_t in, std::size_t k, std::size_t s, std::size_t p) {
  if (in + 2 * p < k) return 0;
  return (in + 2 * p - k) / s + 1;
}
}  // namespace

void EncoderConfig::validate() const {
  if (stage_blocks.empty() || stage_blocks.size() != stage_channels.size()) {
    fail(Errc::invalid_argument, "encoder config: stage_blocks and stage_channels must be non-empty and equally long");
  }
  for (std::size_t i = 0; i < stage_blocks.size(); ++i) {
    if (stage_blocks[i] == 0 || stage_channels[i] == 0) {
      fail(Errc::invalid_argument, "encoder config: stage " + std::to_string(i + 1) + " has zero blocks or channels");
    }
  }
  if (embed_dim < 2) fail(Errc::invalid_argument, "encoder config: embed_dim must be >= 2");
  if (input_channels != 3) {
    fail(Errc::invalid_argument, "encoder config: input must have exactly 3 channels (NC, ART, PV), got " +
                                     std::to_string(input_channels));
  }
  std::size_t s = input_size;
  if (stem == StemKind::compact) {
    s = conv_out(s, 3, 1, 1);
    s = conv_out(s, 2, 2, 0);
  } else {
    s = conv_out(s, 7, 2, 3);
    s = conv_out(s, 3, 2, 1);
  }
  for (std::size_t i = 1; i < stage_blocks.size() && s > 0; ++i) s = conv_out(s, 3, 2, 1);
  if (s == 0) {
    fail(Errc::invalid_argument, "encoder config: input size " + std::to_string(input_size) +
                                     " is too small for the stem and stage strides");
  }
}

BlockSpec make_block(std::string name, BlockKind kind, std::size_t in_channels, std::size_t width,
                     std::size_t stride) {
  BlockSpec b;
  b.name = std::move(name);
  b.kind = kind;
  b.in_channels = in_channels;
  b.stride = stride;
  auto conv = [&](int k, std::size_t in, std::size_t out, std::size_t kernel, std::size_t s) {
    b.convs.push_back({b.name + ".conv" + std::to_string(k), in, out, kernel, s, kernel / 2});
    b.norms.push_back({b.name + ".bn" + std::to_string(k), out});
  };
  if (kind == BlockKind::basic) {
    conv(1, in_channels, width, 3, stride);
    conv(2, width, width, 3, 1);
    b.out_channels = width;
  } else {
    conv(1, in_channels, width, 1, 1);
    conv(2, width, width, 3, stride);
    conv(3, width, width * 4, 1, 1);
    b.out_channels = width * 4;
  }
  if (stride != 1 || in_channels != b.out_channels) {
    b.shortcut_conv = ConvLayer{b.name + ".shortcut.conv", in_channels, b.out_channels, 1, stride, 0};
    b.shortcut_norm = NormLayer{b.name + ".shortcut.bn", b.out_channels};
  }
  return b;
}

ImageEncoder::ImageEncoder(EncoderConfig config) : config_(std::move(config)) {
  config_.validate();
  const std::size_t c0 = config_.stage_channels.front();
  if (config_.stem == StemKind::compact) {
    stem_conv_ = {"stem.conv", config_.input_channels, c0, 3, 1, 1};
  } else {
    stem_conv_ = {"stem.conv", config_.input_channels, c0, 7, 2, 3};
  }
  stem_norm_ = {"stem.bn", c0};
  std::size_t in = c0;
  for (std::size_t i = 0; i < config_.stage_blocks.size(); ++i) {
    for (std::size_t j = 0; j < config_.stage_blocks[i]; ++j) {
      const std::size_t stride = (i > 0 && j == 0) ? 2 : 1;
      blocks_.push_back(make_block("stage" + std::to_string(i + 1) + ".block" + std::to_string(j + 1),
                                   config_.block_kind, in, config_.stage_channels[i], stride));
      in = blocks_.back().out_channels;
    }
  }
}

Pool2dOptions ImageEncoder::stem_pool() const {
  return config_.stem == StemKind::compact ? Pool2dOptions{2, 2, 0} : Pool2dOptions{3, 2, 1};
}

namespace {

template <typename T>
void add_conv(ParamStore<T>& params, const ConvLayer& c, Rng& rng) {
  BasicTensor<T> w({c.out, c.in, c.kernel, c.kernel});
  const double std_dev = std::sqrt(2.0 / static_cast<double>(c.in * c.kernel * c.kernel));
  for (auto& v : w.values()) v = static_cast<T>(std_dev * rng.normal());
  params.add(c.name + ".w", std::move(w));
}

template <typename T>
void add_norm(ParamStore<T>& params, const NormLayer& n) {
  params.add(n.name + ".gamma", BasicTensor<T>({n.channels}, T(1)));
  params.add(n.name + ".beta", BasicTensor<T>({n.channels}, T(0)));
  params.add(n.name + ".running_mean", BasicTensor<T>({n.channels}, T(0)), ParamKind::buffer);
  params.add(n.name + ".running_var", BasicTensor<T>({n.channels}, T(1)), ParamKind::buffer);
}

void norm_names(std::vector<std::string>& out, const NormLayer& n) {
  for (const char* s : {".gamma", ".beta", ".running_mean", ".running_var"}) out.push_back(n.name + s);
}

}  // namespace

template <typename T>
void ImageEncoder::init_params(ParamStore<T>& params, std::uint64_t seed) const {
  Rng rng(derive_seed(seed, "encoder"));
  add_conv(params, stem_conv_, rng);
  add_norm(params, stem_norm_);
  for (const auto& b : blocks_) {
    for (std::size_t k = 0; k < b.convs.size(); ++k) {
      add_conv(params, b.convs[k], rng);
      add_norm(params, b.norms[k]);
    }
    if (b.shortcut_conv) {
      add_conv(params, *b.shortcut_conv, rng);
      add_norm(params, *b.shortcut_norm);
    }
  }
  init_projection(params, seed);
}

template <typename T>
void ImageEncoder::init_projection(ParamStore<T>& params, std::uint64_t seed) const {
  Rng rng(derive_seed(seed, "fc_i"));
  const std::size_t f = config_.feature_dim(), d = config_.embed_dim;
  BasicTensor<T> w({d, f});
  const double std_dev = std::sqrt(2.0 / static_cast<double>(f));
  for (auto& v : w.values()) v = static_cast<T>(std_dev * rng.normal());
  params.add("fc_i.w", std::move(w));
  params.add("fc_i.b", BasicTensor<T>({d}));
}

std::vector<std::string> ImageEncoder::tensor_names() const {
  std::vector<std::string> names{stem_conv_.name + ".w"};
  norm_names(names, stem_norm_);
  for (const auto& b : blocks_) {
    for (std::size_t k = 0; k < b.convs.size(); ++k) {
      names.push_back(b.convs[k].name + ".w");
      norm_names(names, b.norms[k]);
    }
    if (b.shortcut_conv) {
      names.push_back(b.shortcut_conv->name + ".w");
      norm_names(names, *b.shortcut_norm);
    }
  }
  names.push_back("fc_i.w");
  names.push_back("fc_i.b");
  return names;
}

template <typename T>
ParamStore<T> build_encoder(const EncoderConfig& config, std::uint64_t seed) {
  ParamStore<T> params;
  ImageEncoder(config).init_params(params, seed);
  return params;
}

template <typename T>
void accumulate_grad(ParamStore<T>& grads, std::string_view name, const BasicTensor<T>& delta) {
  auto* g = grads.find(name);
  if (!g) return;
  require_shape(delta.shape(), g->shape(), "gradient accumulation");
  for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += delta[i];
}

namespace {

template <typename T>
BasicTensor<T> apply_norm(const NormLayer& n, const ParamStore<T>& params, BasicTensor<T> x, Mode mode,
                          const BatchNormOptions& opt, ParamStore<T>* sink, BatchNormCache<T>* cache) {
  const auto& gamma = params.get(n.name + ".gamma");
  const auto& beta = params.get(n.name + ".beta");
  if (mode == Mode::eval) {
    return batchnorm2d_eval(x, gamma.values(), beta.values(), params.get(n.name + ".running_mean").values(),
                            params.get(n.name + ".running_var").values(), opt, cache);
  }
  RunningStats<T> stats;
  RunningStats<T>* update = nullptr;
  if (sink) {
    auto& mean = sink->entry(n.name + ".running_mean");
    auto& var = sink->entry(n.name + ".running_var");
    if (!mean.frozen && !var.frozen) {
      stats = {mean.value.values(), var.value.values()};
      update = &stats;
    }
  }
  return batchnorm2d_train(std::move(x), gamma.values(), beta.values(), opt, update, cache);
}

template <typename T>
BasicTensor<T> norm_backward(const NormLayer& n, const ParamStore<T>& params, const BatchNormCache<T>& cache,
                             const BasicTensor<T>& grad, ParamStore<T>& grads) {
  auto g = batchnorm2d_backward(cache, params.get(n.name + ".gamma").values(), grad);
  accumulate_grad(grads, n.name + ".gamma", g.gamma);
  accumulate_grad(grads, n.name + ".beta", g.beta);
  return std::move(g.input);
}

template <typename T>
BasicTensor<T> conv_backward(const ConvLayer& c, const ParamStore<T>& params, const BasicTensor<T>& input,
                             const BasicTensor<T>& grad, ParamStore<T>& grads, bool need_input_grad) {
  const std::string wname = c.name + ".w";
  auto g = conv2d_backward(input, params.get(wname), grad, c.options(), false, need_input_grad);
  accumulate_grad(grads, wname, g.weight);
  return std::move(g.input);
}

void mix_bits(std::uint64_t& h, std::uint64_t v) {
  h ^= v;
  h *= 0x100000001b3ULL;
}

template <typename T>
void mix_mask(std::uint64_t& h, const BasicTensor<T>& t) {
  std::uint64_t word = 0;
  std::size_t bits = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    word = (word << 1) | (t[i] > T(0) ? 1u : 0u);
    if (++bits == 64) {
      mix_bits(h, word);
      word = 0;
      bits = 0;
    }
  }
  mix_bits(h, word);
  mix_bits(h, t.size());
}

}  // namespace

template <typename T>
std::uint64_t EncoderTape<T>::nonsmooth_signature() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  mix_mask(h, stem_relu);
  for (auto i : pool_argmax) mix_bits(h, i);
  for (const auto& b : blocks) {
    for (const auto& r : b.inner_relu) mix_mask(h, r);
    mix_mask(h, b.output);
  }
  return h;
}

template <typename T>
BasicTensor<T> residual_block(const BlockSpec& block, const ParamStore<T>& params, BasicTensor<T> block_input,
                              Mode mode, const BatchNormOptions& norm, ParamStore<T>* stats_sink, BlockTape<T>* tape) {
  if (block_input.rank() != 4 || block_input.dim(1) != block.in_channels) {
    fail(Errc::shape, block.name + ": expected input with " + std::to_string(block.in_channels) + " channels, got " +
                          shape_to_string(block_input.shape()));
  }
  if (tape) {
    tape->input = std::move(block_input);
    tape->norms.assign(block.convs.size(), {});
    tape->inner_relu.assign(block.convs.size() - 1, {});
  }
  const BasicTensor<T>& input = tape ? tape->input : block_input;
  BasicTensor<T> h, activation;
  const BasicTensor<T>* in = &input;
  for (std::size_t k = 0; k < block.convs.size(); ++k) {
    const auto& c = block.convs[k];
    h = conv2d<T>(*in, params.get(c.name + ".w"), {}, c.options());
    h = apply_norm(block.norms[k], params, std::move(h), mode, norm, stats_sink, tape ? &tape->norms[k] : nullptr);
    if (k + 1 < block.convs.size()) {
      relu_inplace(h);
      if (tape) {
        tape->inner_relu[k] = std::move(h);
        in = &tape->inner_relu[k];
      } else {
        activation = std::move(h);
        in = &activation;
      }
    }
  }
  if (block.shortcut_conv) {
    auto s = conv2d<T>(input, params.get(block.shortcut_conv->name + ".w"), {}, block.shortcut_conv->options());
    s = apply_norm(*block.shortcut_norm, params, std::move(s), mode, norm, stats_sink, tape ? &tape->shortcut_norm : nullptr);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += s[i];
  } else {
    require_shape(h.shape(), input.shape(), "residual_block identity shortcut");
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += input[i];
  }
  relu_inplace(h);
  if (tape) tape->output = h;
  return h;
}

template <typename T>
BasicTensor<T> residual_block_backward(const BlockSpec& block, const ParamStore<T>& params, const BlockTape<T>& tape,
                                       const BasicTensor<T>& grad_output, ParamStore<T>& grads) {
  const auto g = relu_backward(tape.output, grad_output);
  BasicTensor<T> gh, dx;
  const BasicTensor<T>* cur = &g;
  for (std::size_t k = block.convs.size(); k-- > 0;) {
    auto gn = norm_backward(block.norms[k], params, tape.norms[k], *cur, grads);
    const BasicTensor<T>& conv_in = k == 0 ? tape.input : tape.inner_relu[k - 1];
    auto gc = conv_backward(block.convs[k], params, conv_in, gn, grads, true);
    if (k > 0) {
      relu_backward_inplace(tape.inner_relu[k - 1], gc);
      gh = std::move(gc);
      cur = &gh;
    } else {
      dx = std::move(gc);
    }
  }
  if (block.shortcut_conv) {
    auto gs = norm_backward(*block.shortcut_norm, params, tape.shortcut_norm, g, grads);
    const auto sx = conv_backward(*block.shortcut_conv, params, tape.input, gs, grads, true);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += sx[i];
  } else {
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i];
  }
  return dx;
}

template <typename T>
BasicTensor<T> encode_images(const ImageEncoder& encoder, const ParamStore<T>& params, const BasicTensor<T>& batch,
                             Mode mode, ParamStore<T>* stats_sink, EncoderTape<T>* tape) {
  const auto& cfg = encoder.config();
  if (batch.rank() != 4 || batch.dim(1) != cfg.input_channels || batch.dim(2) != cfg.input_size ||
      batch.dim(3) != cfg.input_size) {
    fail(Errc::shape, "encode_images: expected batch [N," + std::to_string(cfg.input_channels) + "," +
                          std::to_string(cfg.input_size) + "," + std::to_string(cfg.input_size) + "], got " +
                          shape_to_string(batch.shape()));
  }
  if (tape) {
    tape->input = batch;
    tape->blocks.assign(encoder.blocks().size(), {});
  }
  const auto& sc = encoder.stem_conv();
  auto h = conv2d<T>(batch, params.get(sc.name + ".w"), {}, sc.options());
  h = apply_norm(encoder.stem_norm(), params, std::move(h), mode, cfg.norm, stats_sink, tape ? &tape->stem_norm : nullptr);
  relu_inplace(h);
  auto pooled = maxpool2d(h, encoder.stem_pool());
  if (tape) {
    tape->stem_relu = std::move(h);
    tape->pool_argmax = std::move(pooled.argmax);
  }
  h = std::move(pooled.output);
  for (std::size_t b = 0; b < encoder.blocks().size(); ++b) {
    h = residual_block(encoder.blocks()[b], params, std::move(h), mode, cfg.norm, stats_sink,
                       tape ? &tape->blocks[b] : nullptr);
  }
  auto features = global_avg_pool(h);
  if (tape) {
    tape->feature_shape = h.shape();
    tape->pooled = features;
  }
  return linear<T>(features, params.get("fc_i.w"), params.get("fc_i.b").values());
}

template <typename T>
void encode_images_backward(const ImageEncoder& encoder, const ParamStore<T>& params, const EncoderTape<T>& tape,
                            const BasicTensor<T>& grad_embeddings, ParamStore<T>& grads) {
  auto lg = linear_backward(tape.pooled, params.get("fc_i.w"), grad_embeddings, true);
  accumulate_grad(grads, "fc_i.w", lg.weight);
  accumulate_grad(grads, "fc_i.b", lg.bias);
  auto g = global_avg_pool_backward(lg.input, tape.feature_shape);
  for (std::size_t b = encoder.blocks().size(); b-- > 0;) {
    g = residual_block_backward(encoder.blocks()[b], params, tape.blocks[b], g, grads);
  }
  g = maxpool2d_backward<T>(tape.pool_argmax, g, tape.stem_relu.shape());
  relu_backward_inplace(tape.stem_relu, g);
  g = norm_backward(encoder.stem_norm(), params, tape.stem_norm, g, grads);
  conv_backward(encoder.stem_conv(), params, tape.input, g, grads, false);
}

#define LVLM_INSTANTIATE_ENCODER(T)                                                                               \
  template struct EncoderTape<T>;                                                                                 \
  template void ImageEncoder::init_params<T>(ParamStore<T>&, std::uint64_t) const;                                \
  template void ImageEncoder::init_projection<T>(ParamStore<T>&, std::uint64_t) const;                            \
  template ParamStore<T> build_encoder<T>(const EncoderConfig&, std::uint64_t);                                   \
  template void accumulate_grad<T>(ParamStore<T>&, std::string_view, const BasicTensor<T>&);                      \
  template BasicTensor<T> residual_block<T>(const BlockSpec&, const ParamStore<T>&, BasicTensor<T>, Mode,        \
                                            const BatchNormOptions&, ParamStore<T>*, BlockTape<T>*);              \
  template BasicTensor<T> residual_block_backward<T>(const BlockSpec&, const ParamStore<T>&, const BlockTape<T>&, \
                                                     const BasicTensor<T>&, ParamStore<T>&);                      \
  template BasicTensor<T> encode_images<T>(const ImageEncoder&, const ParamStore<T>&, const BasicTensor<T>&,      \
                                           Mode, ParamStore<T>*, EncoderTape<T>*);                                \
  template void encode_images_backward<T>(const ImageEncoder&, const ParamStore<T>&, const EncoderTape<T>&,      \
                                          const BasicTensor<T>&, ParamStore<T>&);

LVLM_INSTANTIATE_ENCODER(float)
LVLM_INSTANTIATE_ENCODER(double)

}  // namespace lvlm
