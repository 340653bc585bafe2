#include <gtest/gtest.h>

#include <cmath>

#include "lvlm/error.hpp"
#include "lvlm/gradsuite.hpp"
#include "lvlm/model.hpp"
#include "lvlm/optim.hpp"
#include "test_util.hpp"

namespace lvlm {
namespace {

using test::random_tensor;

ModelSpec small_spec(std::size_t input_size = 16) {
  ModelSpec spec;
  spec.encoder.stage_channels = {4, 8, 8, 8};
  spec.encoder.embed_dim = 16;
  spec.encoder.input_size = input_size;
  spec.text_dim = 32;
  return spec;
}

TextEmbeddingTable table_for(const ModelSpec& spec, std::uint64_t seed = 0) {
  auto reg = ClassRegistry::defaults().select(spec.classes);
  return make_pseudo_table(reg, kDefaultPromptTemplate, spec.text_dim, seed);
}

TEST(LogitScale, ParseAndPrint) {
  const auto l = LogitScaleConfig::parse("learnable");
  EXPECT_EQ(l.mode, ScaleMode::learnable);
  EXPECT_DOUBLE_EQ(l.value, std::log(1 / 0.07));
  EXPECT_NEAR(std::exp(l.value), 14.2857, 1e-4);
  const auto f = LogitScaleConfig::parse("fixed:10");
  EXPECT_EQ(f.mode, ScaleMode::fixed);
  EXPECT_DOUBLE_EQ(f.value, 10.0);
  EXPECT_EQ(LogitScaleConfig::parse(f.to_string()).value, 10.0);
  EXPECT_THROW(LogitScaleConfig::parse("fixed:0"), Error);
  EXPECT_THROW(LogitScaleConfig::parse("fixed:-2"), Error);
  EXPECT_THROW(LogitScaleConfig::parse("sometimes"), Error);
}

TEST(ComputeLogits, ScaleOneIsCosine) {
  const auto img = random_tensor({5, 8}, 1), txt = random_tensor({4, 8}, 2);
  EXPECT_EQ(compute_logits(img, txt, 1.0), cosine_similarity_matrix(img, txt));
  const auto scaled = compute_logits(img, txt, std::exp(std::log(1 / 0.07)));
  const auto cos = cosine_similarity_matrix(img, txt);
  for (std::size_t i = 0; i < cos.size(); ++i) EXPECT_NEAR(scaled[i], cos[i] / 0.07, 1e-12);
  EXPECT_THROW(compute_logits(img, txt, 0.0), Error);
  EXPECT_THROW(compute_logits(img, txt, -1.0), Error);
}

TEST(ComputeLogits, MatchingEmbeddingPredictsItsClass) {
  Tensor64 txt({4, 4});
  for (std::size_t c = 0; c < 4; ++c) txt.at(c, c) = 1;
  auto img = Tensor64::from({1, 4}, {0, 0, 3, 0});
  EXPECT_EQ(argmax_rows(compute_logits(img, txt, 14.29))[0], 2u);
}

TEST(ComputeLogits, ArgmaxInvariantToPositiveScale) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto img = random_tensor({8, 12}, 1000 + seed), txt = random_tensor({4, 12}, 2000 + seed);
    const auto ref = argmax_rows(compute_logits(img, txt, 1.0));
    for (double s : {0.1, 14.29, 50.0}) EXPECT_EQ(argmax_rows(compute_logits(img, txt, s)), ref);
  }
}

TEST(Model, InitLayoutAndKinds) {
  const auto spec = small_spec();
  const VlmModel model(spec);
  const auto params = model.init<float>(table_for(spec), 3);
  EXPECT_NO_THROW(model.check_params(params));
  EXPECT_EQ(params.entry("text_emb/HCC").kind, ParamKind::constant);
  EXPECT_EQ(params.get("fc_t.w").shape(), (Shape{16, 32}));
  EXPECT_EQ(params.entry("logit_scale").kind, ParamKind::parameter);
  EXPECT_NEAR(model.scale(params), 1 / 0.07, 1e-4);

  auto fixed = spec;
  fixed.logit_scale = LogitScaleConfig::parse("fixed:5");
  const VlmModel fm(fixed);
  const auto fp = fm.init<float>(table_for(fixed), 3);
  EXPECT_FALSE(fp.contains("logit_scale"));
  EXPECT_EQ(fp.entry("logit_scale.fixed").kind, ParamKind::constant);
  EXPECT_DOUBLE_EQ(fm.scale(fp), 5.0);
}

TEST(Model, TableMustMatchSpec) {
  const auto spec = small_spec();
  const VlmModel model(spec);
  auto wide = spec;
  wide.text_dim = 40;
  EXPECT_THROW(model.init<float>(table_for(wide), 0), Error);
}

TEST(Model, LossGradientMatchesFiniteDifferencesTwoSamples) {
  ModelGradCheckConfig cfg;
  cfg.spec = small_spec();
  cfg.batch = 2;
  // At 16x16 the last stage normalizes two values per channel, which leaves only rounding noise.
  cfg.input_size = 32;
  cfg.max_elements = 8;
  const auto report = model_gradcheck(cfg, 5);
  EXPECT_LE(report.max_rel_error(), 1e-5);
  bool saw_fc_t = false, saw_scale = false, saw_stem = false;
  for (const auto& t : report.tensors) {
    saw_fc_t |= t.name == "fc_t.w";
    saw_scale |= t.name == "logit_scale";
    saw_stem |= t.name == "stem.conv.w";
  }
  EXPECT_TRUE(saw_fc_t && saw_scale && saw_stem);
}

TEST(Classify, ProbabilitiesAndPurity) {
  const auto spec = small_spec();
  const VlmModel model(spec);
  auto params = model.init<float>(table_for(spec), 4);
  const auto batch = random_tensor({6, 3, 16, 16}, 9).cast<float>();
  // Non-default running statistics.
  std::vector<std::size_t> labels{0, 1, 2, 3, 0, 1};
  (void)model.loss<float>(params, batch, labels, Mode::train, &params);
  const auto before = hash_params(params);
  const auto a = classify(model, params, batch, 4);
  const auto b = classify(model, params, batch);
  EXPECT_EQ(hash_params(params), before);
  EXPECT_EQ(a.predictions, b.predictions);
  for (std::size_t i = 0; i < 6; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < 4; ++c) s += a.probabilities.at(i, c);
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  EXPECT_EQ(a.predictions, argmax_rows(a.probabilities));
}

TEST(Classify, PredictionsInvariantToLogitScale) {
  const auto spec = small_spec();
  const VlmModel model(spec);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto params = model.init<float>(table_for(spec), seed);
    const auto batch = random_tensor({8, 3, 16, 16}, 50 + seed).cast<float>();
    const auto ref = classify(model, params, batch).predictions;
    for (double s : {0.1, 1.0, 14.29, 50.0}) {
      params.get("logit_scale")[0] = static_cast<float>(std::log(s));
      EXPECT_EQ(classify(model, params, batch).predictions, ref) << "scale " << s;
    }
  }
}

TEST(Model, SmallStepDecreasesLossOnFixedBatch) {
  const auto spec = small_spec();
  const VlmModel model(spec);
  AdamWConfig opt;
  opt.learning_rate = 1e-4;
  opt.weight_decay = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto params = model.init<float>(table_for(spec), seed).cast<double>();
    apply_freeze(params, {"text_emb/"});
    const auto batch = random_tensor({8, 3, 16, 16}, 70 + seed);
    std::vector<std::size_t> labels{0, 1, 2, 3, 3, 2, 1, 0};
    auto grads = params.zeros_like_trainable();
    // Statistics stay fixed so both losses see the same function.
    const double before = model.loss<double>(params, batch, labels, Mode::train, nullptr, &grads).loss;
    auto state = adamw_init(params);
    adamw_step(params, grads, state, opt);
    const double after = model.loss<double>(params, batch, labels, Mode::train).loss;
    EXPECT_LT(after, before) << "seed " << seed;
  }
}

TEST(Model, EqualLogitsGiveLogC) {
  // A zero image projection makes every cosine zero, hence all logits equal.
  const auto spec = small_spec();
  const VlmModel model(spec);
  auto params = model.init<double>(table_for(spec), 1);
  params.get("fc_i.w").fill(0);
  params.get("fc_i.b").fill(0);
  const auto batch = random_tensor({4, 3, 16, 16}, 3);
  std::vector<std::size_t> labels{0, 1, 2, 3};
  EXPECT_NEAR(model.loss<double>(params, batch, labels, Mode::eval).loss, std::log(4.0), 1e-12);
}

TEST(Model, WeightsRoundTrip) {
  test::TempDir dir("model");
  const auto spec = small_spec();
  const VlmModel model(spec);
  const auto params = model.init<float>(table_for(spec), 8);
  save_model(dir / "w.lvlm", params);
  const auto back = params_from_tensors(load_tensors(dir / "w.lvlm"));
  EXPECT_EQ(hash_params(back), hash_params(params));
  for (const auto& e : params.entries()) EXPECT_EQ(back.entry(e.name).kind, e.kind) << e.name;
}

}  // namespace
}  // namespace lvlm
