#include <gtest/gtest.h>

#include <set>

#include "lvlm/encoder.hpp"
#include "lvlm/error.hpp"
#include "test_util.hpp"

namespace lvlm {
namespace {

using test::dot;
using test::max_rel_error;
using test::numeric_gradient;
using test::random_tensor;

// Walks the layer shapes of a config and counts learnable elements by hand.
std::size_t shape_walk_count(const EncoderConfig& c) {
  const std::size_t stem_k = c.stem == StemKind::compact ? 3 : 7;
  const std::size_t c0 = c.stage_channels.front();
  std::size_t total = c.input_channels * c0 * stem_k * stem_k + 2 * c0;
  std::size_t in = c0;
  const std::size_t e = c.expansion();
  for (std::size_t s = 0; s < c.stage_blocks.size(); ++s) {
    const std::size_t w = c.stage_channels[s];
    for (std::size_t b = 0; b < c.stage_blocks[s]; ++b) {
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      if (c.block_kind == BlockKind::basic) {
        total += in * w * 9 + 2 * w + w * w * 9 + 2 * w;
      } else {
        total += in * w + 2 * w + w * w * 9 + 2 * w + w * w * e + 2 * w * e;
      }
      if (stride > 1 || in != w * e) total += in * w * e + 2 * w * e;
      in = w * e;
    }
  }
  return total + in * c.embed_dim + c.embed_dim;
}

TEST(Encoder, Tiny18ParameterCountRegression) {
  const auto cfg = EncoderConfig::preset("tiny-18");
  const auto params = build_encoder<float>(cfg, 1);
  EXPECT_EQ(count_parameters(params), shape_walk_count(cfg));
  // Frozen value of the shape walk for the default configuration.
  EXPECT_EQ(count_parameters(params), 832272u);
}

TEST(Encoder, Tiny50ParameterCountAndOrdering) {
  const auto c18 = EncoderConfig::preset("tiny-18");
  const auto c50 = EncoderConfig::preset("tiny-50");
  const auto p50 = build_encoder<float>(c50, 1);
  EXPECT_EQ(count_parameters(p50), shape_walk_count(c50));
  EXPECT_GT(count_parameters(p50), count_parameters(build_encoder<float>(c18, 1)));
}

TEST(Encoder, ImageNetStemCountMatchesWalk) {
  auto cfg = EncoderConfig::preset("tiny-18");
  cfg.stem = StemKind::imagenet;
  EXPECT_EQ(count_parameters(build_encoder<float>(cfg, 2)), shape_walk_count(cfg));
}

TEST(Encoder, CountParametersBasics) {
  ParamStore<float> empty;
  EXPECT_EQ(count_parameters(empty), 0u);
  ParamStore<float> lin;
  lin.add("w", Tensor({2, 3}));
  lin.add("b", Tensor({2}));
  lin.add("running_mean", Tensor({5}), ParamKind::buffer);
  EXPECT_EQ(count_parameters(lin), 8u);
}

TEST(Encoder, BuildIsDeterministicPerSeed) {
  const auto cfg = EncoderConfig::preset("tiny-18");
  const auto a = build_encoder<float>(cfg, 7);
  const auto b = build_encoder<float>(cfg, 7);
  const auto c = build_encoder<float>(cfg, 8);
  EXPECT_EQ(hash_params(a), hash_params(b));
  EXPECT_NE(hash_params(a), hash_params(c));
}

TEST(Encoder, InitialisationRules) {
  const auto params = build_encoder<double>(EncoderConfig::preset("tiny-18"), 3);
  std::set<std::string> names;
  for (const auto& e : params.entries()) {
    EXPECT_TRUE(names.insert(e.name).second) << e.name;
    const auto ends = [&](const std::string& s) {
      return e.name.size() >= s.size() && e.name.compare(e.name.size() - s.size(), s.size(), s) == 0;
    };
    if (ends(".gamma") || ends(".running_var")) {
      for (double v : e.value.values()) EXPECT_EQ(v, 1.0) << e.name;
    }
    if (ends(".beta") || ends(".running_mean") || e.name == "fc_i.b") {
      for (double v : e.value.values()) EXPECT_EQ(v, 0.0) << e.name;
    }
    if (ends(".running_mean") || ends(".running_var")) {
      EXPECT_EQ(e.kind, ParamKind::buffer);
    }
  }
  // He scaling: the sample variance of a large kernel is close to 2 / fan_in.
  const auto& w = params.get("stage4.block2.conv1.w");
  double ss = 0;
  for (double v : w.values()) ss += v * v;
  const double fan_in = 128.0 * 9.0;
  EXPECT_NEAR(ss / static_cast<double>(w.size()), 2.0 / fan_in, 0.1 * 2.0 / fan_in);
}

TEST(Encoder, NameSchemeIsStable) {
  const ImageEncoder enc(EncoderConfig::preset("tiny-18"));
  const auto names = enc.tensor_names();
  const std::set<std::string> set(names.begin(), names.end());
  for (const char* n : {"stem.conv.w", "stem.bn.gamma", "stem.bn.running_var", "stage1.block1.conv1.w",
                        "stage2.block1.shortcut.conv.w", "stage4.block2.bn2.beta", "fc_i.w", "fc_i.b"}) {
    EXPECT_TRUE(set.count(n)) << n;
  }
  EXPECT_FALSE(set.count("stage1.block1.shortcut.conv.w"));
}

TEST(Encoder, ProjectionShortcutRule) {
  EXPECT_FALSE(make_block("b", BlockKind::basic, 16, 16, 1).shortcut_conv);
  EXPECT_TRUE(make_block("b", BlockKind::basic, 16, 16, 2).shortcut_conv);
  EXPECT_TRUE(make_block("b", BlockKind::basic, 16, 32, 1).shortcut_conv);
  EXPECT_TRUE(make_block("b", BlockKind::bottleneck, 16, 16, 1).shortcut_conv);
  EXPECT_FALSE(make_block("b", BlockKind::bottleneck, 64, 16, 1).shortcut_conv);
}

ParamStore<double> block_params(const BlockSpec& block, std::uint64_t seed, bool zero_weights) {
  ParamStore<double> p;
  std::uint64_t s = seed;
  auto add_conv = [&](const ConvLayer& c) {
    Tensor64 w({c.out, c.in, c.kernel, c.kernel});
    if (!zero_weights) w = random_tensor(w.shape(), ++s, 0.3);
    p.add(c.name + ".w", w);
  };
  auto add_norm = [&](const NormLayer& n) {
    p.add(n.name + ".gamma", zero_weights ? Tensor64({n.channels}, 1.0) : random_tensor({n.channels}, ++s));
    p.add(n.name + ".beta", zero_weights ? Tensor64({n.channels}) : random_tensor({n.channels}, ++s));
    p.add(n.name + ".running_mean", Tensor64({n.channels}), ParamKind::buffer);
    p.add(n.name + ".running_var", Tensor64({n.channels}, 1.0), ParamKind::buffer);
  };
  for (std::size_t k = 0; k < block.convs.size(); ++k) {
    add_conv(block.convs[k]);
    add_norm(block.norms[k]);
  }
  if (block.shortcut_conv) {
    add_conv(*block.shortcut_conv);
    add_norm(*block.shortcut_norm);
  }
  return p;
}

TEST(ResidualBlock, ZeroBranchGivesReluOfInput) {
  const auto block = make_block("blk", BlockKind::basic, 3, 3, 1);
  const auto params = block_params(block, 1, true);
  const auto x = random_tensor({2, 3, 5, 5}, 9);
  for (Mode mode : {Mode::train, Mode::eval}) {
    auto y = residual_block<double>(block, params, x, mode, {});
    const auto expect = relu(x);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], expect[i], 1e-12);
  }
}

void check_block_gradient(BlockKind kind, std::size_t in, std::size_t width, std::size_t stride) {
  const auto block = make_block("blk", kind, in, width, stride);
  auto params = block_params(block, 40 + in + width + stride, false);
  auto x = random_tensor({3, in, 6, 6}, 77);
  BlockTape<double> tape;
  const auto y = residual_block<double>(block, params, x, Mode::train, {}, nullptr, &tape);
  const auto proj = random_tensor(y.shape(), 78);
  auto grads = params.zeros_like_trainable();
  const auto dx = residual_block_backward(block, params, tape, proj, grads);

  auto f = [&] { return dot(proj, residual_block<double>(block, params, x, Mode::train, {})); };
  EXPECT_LE(max_rel_error(dx, numeric_gradient(x, f), 1e-6), 1e-5);
  for (const auto& g : grads.entries()) {
    EXPECT_LE(max_rel_error(g.value, numeric_gradient(params.get(g.name), f), 1e-6), 1e-5) << g.name;
  }
}

TEST(ResidualBlock, GradientMatchesFiniteDifferencesBasicIdentity) {
  check_block_gradient(BlockKind::basic, 3, 3, 1);
}

TEST(ResidualBlock, GradientMatchesFiniteDifferencesBasicProjection) {
  check_block_gradient(BlockKind::basic, 2, 4, 2);
}

TEST(ResidualBlock, GradientMatchesFiniteDifferencesBottleneck) {
  check_block_gradient(BlockKind::bottleneck, 4, 2, 2);
}

EncoderConfig small_config() {
  auto cfg = EncoderConfig::preset("tiny-18");
  cfg.stage_channels = {4, 8, 8, 8};
  cfg.embed_dim = 6;
  cfg.input_size = 16;
  return cfg;
}

TEST(EncodeImages, OutputShapeForAnyBatch) {
  const auto cfg = small_config();
  const ImageEncoder enc(cfg);
  const auto params = build_encoder<float>(cfg, 5);
  for (std::size_t n : {1u, 2u, 5u}) {
    auto batch = random_tensor({n, 3, 16, 16}, n).cast<float>();
    EXPECT_EQ(encode_images(enc, params, batch, Mode::eval).shape(), (Shape{n, 6}));
  }
}

TEST(EncodeImages, EvalModeIsPure) {
  const auto cfg = small_config();
  const ImageEncoder enc(cfg);
  auto params = build_encoder<float>(cfg, 5);
  // Move the running statistics off their defaults so eval mode reads something nontrivial.
  auto batch = random_tensor({4, 3, 16, 16}, 1).cast<float>();
  (void)encode_images(enc, params, batch, Mode::train, &params);
  const auto before = hash_params(params);
  const auto a = encode_images(enc, params, batch, Mode::eval, &params);
  const auto b = encode_images(enc, params, batch, Mode::eval, &params);
  EXPECT_EQ(a, b);
  EXPECT_EQ(hash_params(params), before);
}

TEST(EncodeImages, TrainModeUpdatesRunningStatisticsOnlyWithSink) {
  const auto cfg = small_config();
  const ImageEncoder enc(cfg);
  auto params = build_encoder<float>(cfg, 5);
  auto batch = random_tensor({4, 3, 16, 16}, 2).cast<float>();
  const auto before = hash_params(params);
  (void)encode_images(enc, params, batch, Mode::train);
  EXPECT_EQ(hash_params(params), before);
  (void)encode_images(enc, params, batch, Mode::train, &params);
  EXPECT_NE(hash_params(params), before);
}

TEST(EncodeImages, RejectsWrongSpatialSize) {
  const auto cfg = small_config();
  const ImageEncoder enc(cfg);
  const auto params = build_encoder<float>(cfg, 5);
  Tensor batch({2, 3, 20, 20});
  try {
    (void)encode_images(enc, params, batch, Mode::eval);
    FAIL() << "expected a shape error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::shape);
  }
}

TEST(EncoderConfig, ValidationRejectsBadConfigs) {
  auto c = EncoderConfig::preset("tiny-18");
  c.stage_blocks = {2, 2};
  EXPECT_THROW(c.validate(), Error);
  c = EncoderConfig::preset("tiny-18");
  c.embed_dim = 1;
  EXPECT_THROW(c.validate(), Error);
  c = EncoderConfig::preset("tiny-18");
  c.input_channels = 1;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_THROW(EncoderConfig::preset("tiny-101"), Error);
}

}  // namespace
}  // namespace lvlm
