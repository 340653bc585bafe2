#include "lvlm/gradsuite.hpp"

#include <algorithm>
#include <functional>

#include "lvlm/encoder.hpp"
#include "lvlm/error.hpp"
#include "lvlm/ops.hpp"
#include "lvlm/random.hpp"
#include "lvlm/text.hpp"

namespace lvlm {

namespace {

using T64 = Tensor64;

T64 random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  T64 t(std::move(shape));
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

/// Values at least `gap` away from zero, so the relu kink is never within a step.
T64 away_from_zero(Rng& rng, Shape shape, double gap) {
  T64 t(std::move(shape));
  for (auto& v : t.values()) {
    const double u = rng.uniform(gap, 1.0);
    v = rng.uniform() < 0.5 ? -u : u;
  }
  return t;
}

double dot(const T64& a, const T64& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::uint64_t mask_signature(const T64& t) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < t.size(); ++i) h = (h ^ (t[i] > 0 ? 1u : 0u)) * 0x100000001b3ULL;
  return h;
}

std::uint64_t index_signature(std::span<const std::size_t> idx) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto i : idx) h = (h ^ i) * 0x100000001b3ULL;
  return h;
}

struct Case {
  std::vector<std::pair<std::string, T64*>> inputs;
  std::function<FdEvaluation()> objective;
  std::function<std::vector<T64>()> analytic;  // one gradient per input, same order
};

void run_case(GradCheckReport& report, const std::string& prefix, const Case& c) {
  const auto grads = c.analytic();
  std::vector<FdTarget> targets;
  for (std::size_t i = 0; i < c.inputs.size(); ++i) {
    targets.push_back({prefix + "." + c.inputs[i].first, c.inputs[i].second, &grads[i]});
  }
  auto part = finite_difference_check(c.objective, targets);
  for (auto& t : part.tensors) report.tensors.push_back(std::move(t));
}

GradCheckReport check_conv(std::uint64_t seed) {
  GradCheckReport report;
  Rng rng(seed);
  struct Geometry {
    const char* name;
    std::size_t kernel, stride, padding;
    bool bias;
  };
  for (const Geometry g : {Geometry{"k3s1p1", 3, 1, 1, true}, Geometry{"k3s2p1", 3, 2, 1, false},
                           Geometry{"k1s2p0", 1, 2, 0, false}, Geometry{"k7s2p3", 7, 2, 3, true}}) {
    T64 x = random_tensor(rng, {2, 3, 7, 7});
    T64 w = random_tensor(rng, {4, 3, g.kernel, g.kernel}, 0.3);
    T64 b = random_tensor(rng, {4});
    const Conv2dOptions opt{g.stride, g.padding};
    const auto out_shape = conv2d_output_shape(x.shape(), w.shape(), opt);
    const T64 r = random_tensor(rng, out_shape);
    auto bias = [&]() { return g.bias ? std::span<const double>(b.values()) : std::span<const double>{}; };
    Case c;
    c.inputs = {{"input", &x}, {"weight", &w}};
    if (g.bias) c.inputs.push_back({"bias", &b});
    c.objective = [&] { return FdEvaluation{dot(conv2d<double>(x, w, bias(), opt), r), 0}; };
    c.analytic = [&] {
      auto gr = conv2d_backward<double>(x, w, r, opt, g.bias);
      std::vector<T64> out{gr.input, gr.weight};
      if (g.bias) out.push_back(gr.bias);
      return out;
    };
    run_case(report, std::string("conv2d.") + g.name, c);
  }
  return report;
}

GradCheckReport check_batchnorm(std::uint64_t seed) {
  GradCheckReport report;
  Rng rng(seed);
  const BatchNormOptions opt{};
  for (Mode mode : {Mode::train, Mode::eval}) {
    T64 x = random_tensor(rng, {4, 3, 3, 3}, 2.0);
    T64 gamma = random_tensor(rng, {3});
    T64 beta = random_tensor(rng, {3});
    T64 mean = random_tensor(rng, {3}, 0.5);
    T64 var({3});
    for (auto& v : var.values()) v = rng.uniform(0.5, 2.0);
    const T64 r = random_tensor(rng, x.shape());
    auto forward = [&](BatchNormCache<double>* cache) {
      if (mode == Mode::train) return batchnorm2d_train<double>(x, gamma.values(), beta.values(), opt, nullptr, cache);
      return batchnorm2d_eval<double>(x, gamma.values(), beta.values(), mean.values(), var.values(), opt, cache);
    };
    Case c;
    c.inputs = {{"input", &x}, {"gamma", &gamma}, {"beta", &beta}};
    c.objective = [&] { return FdEvaluation{dot(forward(nullptr), r), 0}; };
    c.analytic = [&] {
      BatchNormCache<double> cache;
      forward(&cache);
      auto g = batchnorm2d_backward<double>(cache, gamma.values(), r);
      return std::vector<T64>{g.input, g.gamma, g.beta};
    };
    run_case(report, mode == Mode::train ? "batchnorm2d.train" : "batchnorm2d.eval", c);
  }
  return report;
}

GradCheckReport check_relu(std::uint64_t seed) {
  GradCheckReport report;
  Rng rng(seed);
  T64 x = away_from_zero(rng, {2, 3, 4, 4}, 0.05);
  const T64 r = random_tensor(rng, x.shape());
  Case c;
  c.inputs = {{"input", &x}};
  c.objective = [&] {
    auto y = relu(x);
    return FdEvaluation{dot(y, r), mask_signature(x)};
  };
  c.analytic = [&] { return std::vector<T64>{relu_backward(x, r)}; };
  run_case(report, "relu", c);
  return report;
}

GradCheckReport check_maxpool(std::uint64_t seed) {
  GradCheckReport report;
  Rng rng(seed);
  for (const Pool2dOptions opt : {Pool2dOptions{2, 2, 0}, Pool2dOptions{3, 2, 1}}) {
    T64 x = random_tensor(rng, {2, 2, 6, 6});
    const auto probe = maxpool2d(x, opt);
    const T64 r = random_tensor(rng, probe.output.shape());
    Case c;
    c.inputs = {{"input", &x}};
    c.objective = [&] {
      auto y = maxpool2d(x, opt);
      return FdEvaluation{dot(y.output, r), index_signature(y.argmax)};
    };
    c.analytic = [&] {
      auto y = maxpool2d(x, opt);
      return std::vector<T64>{maxpool2d_backward<double>(y.argmax, r, x.shape())};
    };
    run_case(report, "maxpool2d.k" + std::to_string(opt.kernel) + "s" + std::to_string(opt.stride), c);
  }
  return report;
}

GradCheckReport check_avgpool(std::uint64_t seed) {
  GradCheckReport report;
  Rng rng(seed);
  T64 x = random_tensor(rng, {2, 3, 4, 5});
  const T64 r = random_tensor(rng, {2, 3});
  Case c;
  c.inputs = {{"input", &x}};
  c.objective = [&] { return FdEvaluation{dot(global_avg_pool(x), r), 0}; };
  c.analytic = [&] { return std::vector<T64>{global_avg_pool_backward(r, x.shape())}; };
  run_case(report, "global_avg_pool", c);
  return report;
}

GradCheckReport check_linear(std::uint64_t seed) {
  GradCheckReport report;
  Rng rng(seed);
  T64 x = random_tensor(rng, {3, 5});
  T64 w = random_tensor(rng, {4, 5});
  T64 b = random_tensor(rng, {4});
  const T64 r = random_tensor(rng, {3, 4});
  Case c;
  c.inputs = {{"input", &x}, {"weight", &w}, {"bias", &b}};
  c.objective = [&] { return FdEvaluation{dot(linear<double>(x, w, b.values()), r), 0}; };
  c.analytic = [&] {
    auto g = linear_backward<double>(x, w, r);
    return std::vector<T64>{g.input, g.weight, g.bias};
  };
  run_case(report, "linear", c);
  return report;
}

GradCheckReport check_l2(std::uint64_t seed) {
  GradCheckReport report;
  Rng rng(seed);
  T64 x = random_tensor(rng, {3, 6});
  const T64 r = random_tensor(rng, {3, 6});
  Case c;
  c.inputs = {{"input", &x}};
  c.objective = [&] { return FdEvaluation{dot(l2_normalize(x), r), 0}; };
  c.analytic = [&] { return std::vector<T64>{l2_normalize_backward(x, r)}; };
  run_case(report, "l2_normalize", c);
  return report;
}

GradCheckReport check_cosine(std::uint64_t seed) {
  GradCheckReport report;
  Rng rng(seed);
  T64 img = random_tensor(rng, {3, 6});
  T64 txt = random_tensor(rng, {4, 6});
  const T64 r = random_tensor(rng, {3, 4});
  Case c;
  c.inputs = {{"img", &img}, {"txt", &txt}};
  c.objective = [&] { return FdEvaluation{dot(cosine_similarity_matrix(img, txt), r), 0}; };
  c.analytic = [&] {
    auto g = cosine_similarity_backward(img, txt, r);
    return std::vector<T64>{g.img, g.txt};
  };
  run_case(report, "cosine_similarity", c);
  return report;
}

GradCheckReport check_cross_entropy(std::uint64_t seed) {
  GradCheckReport report;
  Rng rng(seed);
  T64 logits = random_tensor(rng, {5, 4}, 3.0);
  const std::vector<std::size_t> labels{0, 1, 2, 3, 1};
  Case c;
  c.inputs = {{"logits", &logits}};
  c.objective = [&] { return FdEvaluation{softmax_cross_entropy(logits, labels), 0}; };
  c.analytic = [&] { return std::vector<T64>{softmax_cross_entropy_backward(logits, labels)}; };
  run_case(report, "softmax_cross_entropy", c);
  return report;
}

GradCheckReport check_fc_t(std::uint64_t seed) {
  GradCheckReport report;
  Rng rng(seed);
  ParamStore<double> params;
  init_projection_head(params, 6, 10, seed);
  for (auto& v : params.get("fc_t.b").values()) v = rng.normal();
  const T64 rows = random_tensor(rng, {4, 10});
  const T64 r = random_tensor(rng, {4, 6});
  Case c;
  c.inputs = {{"weight", &params.get("fc_t.w")}, {"bias", &params.get("fc_t.b")}};
  c.objective = [&] {
    return FdEvaluation{dot(project_text<double>(params.get("fc_t.w"), params.get("fc_t.b").values(), rows), r), 0};
  };
  c.analytic = [&] {
    auto grads = params.zeros_like_trainable();
    project_text_backward<double>(params, rows, r, grads);
    return std::vector<T64>{grads.get("fc_t.w"), grads.get("fc_t.b")};
  };
  run_case(report, "fc_t", c);
  return report;
}

ParamStore<double> block_params(const BlockSpec& block, Rng& rng) {
  ParamStore<double> params;
  auto add_conv = [&](const ConvLayer& c) {
    const double std = std::sqrt(2.0 / static_cast<double>(c.in * c.kernel * c.kernel));
    params.add(c.name + ".w", random_tensor(rng, {c.out, c.in, c.kernel, c.kernel}, std));
  };
  auto add_norm = [&](const NormLayer& n) {
    T64 gamma({n.channels});
    for (auto& v : gamma.values()) v = rng.uniform(0.5, 1.5);
    params.add(n.name + ".gamma", gamma);
    params.add(n.name + ".beta", random_tensor(rng, {n.channels}, 0.1));
    params.add(n.name + ".running_mean", T64({n.channels}, 0.0), ParamKind::buffer);
    params.add(n.name + ".running_var", T64({n.channels}, 1.0), ParamKind::buffer);
  };
  for (std::size_t k = 0; k < block.convs.size(); ++k) {
    add_conv(block.convs[k]);
    add_norm(block.norms[k]);
  }
  if (block.shortcut_conv) {
    add_conv(*block.shortcut_conv);
    add_norm(*block.shortcut_norm);
  }
  return params;
}

std::uint64_t block_signature(const BlockTape<double>& tape) {
  std::uint64_t h = 0;
  for (const auto& r : tape.inner_relu) h = h * 31 + mask_signature(r);
  return h * 31 + mask_signature(tape.output);
}

GradCheckReport check_block(std::uint64_t seed, BlockKind kind) {
  GradCheckReport report;
  Rng rng(seed);
  const BatchNormOptions norm{};
  const auto block = make_block(kind == BlockKind::basic ? "basic" : "bottleneck", kind, 3, 4, 2);
  auto params = block_params(block, rng);
  T64 x = random_tensor(rng, {3, 3, 6, 6});
  BlockTape<double> probe;
  const auto y = residual_block<double>(block, params, x, Mode::train, norm, nullptr, &probe);
  const T64 r = random_tensor(rng, y.shape());
  Case c;
  c.inputs = {{"input", &x}};
  for (auto& e : params.entries()) {
    if (e.trainable()) c.inputs.push_back({e.name.substr(block.name.size() + 1), &e.value});
  }
  c.objective = [&] {
    BlockTape<double> tape;
    const auto out = residual_block<double>(block, params, x, Mode::train, norm, nullptr, &tape);
    return FdEvaluation{dot(out, r), block_signature(tape)};
  };
  c.analytic = [&] {
    BlockTape<double> tape;
    residual_block<double>(block, params, x, Mode::train, norm, nullptr, &tape);
    auto grads = params.zeros_like_trainable();
    std::vector<T64> out{residual_block_backward(block, params, tape, r, grads)};
    for (const auto& e : params.entries()) {
      if (e.trainable()) out.push_back(grads.get(e.name));
    }
    return out;
  };
  run_case(report, std::string("residual_block.") + block.name, c);
  return report;
}

using ScopeFn = std::function<GradCheckReport(std::uint64_t)>;

const std::vector<std::pair<std::string, ScopeFn>>& scopes() {
  static const std::vector<std::pair<std::string, ScopeFn>> s{
      {"model", [](std::uint64_t seed) { return model_gradcheck({}, seed); }},
      {"conv2d", check_conv},
      {"batchnorm2d", check_batchnorm},
      {"relu", check_relu},
      {"maxpool2d", check_maxpool},
      {"global_avg_pool", check_avgpool},
      {"linear", check_linear},
      {"l2_normalize", check_l2},
      {"cosine_similarity", check_cosine},
      {"softmax_cross_entropy", check_cross_entropy},
      {"fc_t", check_fc_t},
      {"residual_block", [](std::uint64_t seed) {
         auto a = check_block(seed, BlockKind::basic);
         auto b = check_block(seed, BlockKind::bottleneck);
         for (auto& t : b.tensors) a.tensors.push_back(std::move(t));
         return a;
       }},
  };
  return s;
}

}  // namespace

std::vector<std::string> gradcheck_scopes() {
  std::vector<std::string> out;
  for (const auto& [name, fn] : scopes()) out.push_back(name);
  return out;
}

GradCheckReport run_gradcheck_scope(std::string_view scope, std::uint64_t seed) {
  for (const auto& [name, fn] : scopes()) {
    if (name == scope) return fn(derive_seed(seed, "gradcheck/" + name));
  }
  std::string known;
  for (const auto& n : gradcheck_scopes()) known += (known.empty() ? "" : "|") + n;
  fail(Errc::invalid_argument, "unknown gradcheck scope '" + std::string(scope) + "' (expected " + known + ")");
}

GradCheckReport model_gradcheck(const ModelGradCheckConfig& config, std::uint64_t seed) {
  ModelSpec spec = config.spec;
  spec.encoder.input_size = config.input_size;
  const VlmModel model(spec);
  auto registry = ClassRegistry::defaults().select(spec.classes);
  const auto table = make_pseudo_table(registry, kDefaultPromptTemplate, spec.text_dim, derive_seed(seed, "text"));
  auto params = model.init<double>(table, derive_seed(seed, "init"));

  // Perturb norm affine parameters and biases away from their identity initialization so
  // their gradients are generic.
  Rng rng(derive_seed(seed, "perturb"));
  for (auto& e : params.entries()) {
    if (!e.trainable()) continue;
    if (e.name.ends_with(".gamma")) {
      for (auto& v : e.value.values()) v = rng.uniform(0.5, 1.5);
    } else if (e.name.ends_with(".beta") || e.name.ends_with(".b")) {
      for (auto& v : e.value.values()) v = 0.1 * rng.normal();
    }
  }

  const std::size_t s = config.input_size;
  T64 batch({config.batch, 3, s, s});
  for (auto& v : batch.values()) v = rng.uniform();
  std::vector<std::size_t> labels(config.batch);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % model.num_classes();

  auto grads = params.zeros_like_trainable();
  model.loss<double>(params, batch, labels, config.mode, nullptr, &grads);

  std::vector<FdTarget> targets;
  for (auto& e : params.entries()) {
    if (e.trainable()) targets.push_back({e.name, &e.value, &grads.get(e.name)});
  }
  auto objective = [&] {
    std::uint64_t sig = 0;
    const auto r = model.loss<double>(params, batch, labels, config.mode, nullptr, nullptr, &sig);
    return FdEvaluation{r.loss, sig};
  };
  GradCheckOptions opt;
  opt.max_elements = config.max_elements;
  opt.seed = derive_seed(seed, "sample");
  return finite_difference_check(objective, targets, opt);
}

}  // namespace lvlm
