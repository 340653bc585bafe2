#include "lvlm/model.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>

#include "lvlm/error.hpp"

namespace lvlm {

namespace {

double parse_number(std::string_view text, std::string_view what) {
  double v = 0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    fail(Errc::invalid_argument, "invalid number '" + std::string(text) + "' for " + std::string(what));
  }
  return v;
}

bool starts_with(std::string_view s, std::string_view prefix) { return s.substr(0, prefix.size()) == prefix; }

}  // namespace

LogitScaleConfig LogitScaleConfig::parse(std::string_view text) {
  LogitScaleConfig c;
  if (text == "learnable") return c;
  if (starts_with(text, "learnable:")) {
    c.value = parse_number(text.substr(10), "learnable log scale");
    if (!std::isfinite(c.value)) fail(Errc::invalid_argument, "learnable log scale must be finite");
    return c;
  }
  if (starts_with(text, "fixed:")) {
    c.mode = ScaleMode::fixed;
    c.value = parse_number(text.substr(6), "fixed logit scale");
    if (!(c.value > 0) || !std::isfinite(c.value)) {
      fail(Errc::invalid_argument, "fixed logit scale must be positive, got " + std::string(text.substr(6)));
    }
    return c;
  }
  fail(Errc::invalid_argument, "logit scale must be 'learnable', 'learnable:<log_s>' or 'fixed:<s>', got '" +
                                   std::string(text) + "'");
}

std::string LogitScaleConfig::to_string() const {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return std::string(mode == ScaleMode::fixed ? "fixed:" : "learnable:") + buf;
}

template <typename T>
BasicTensor<T> compute_logits(const BasicTensor<T>& img_emb, const BasicTensor<T>& txt_emb, double scale) {
  if (!(scale > 0) || !std::isfinite(scale)) {
    fail(Errc::invalid_argument, "logit scale must be positive and finite, got " + std::to_string(scale));
  }
  auto out = cosine_similarity_matrix(img_emb, txt_emb);
  const T s = static_cast<T>(scale);
  for (auto& v : out.values()) v *= s;
  return out;
}

void ModelSpec::validate() const {
  encoder.validate();
  if (text_dim < 2) fail(Errc::invalid_argument, "text embedding dimension must be >= 2");
  if (classes.size() < 2) fail(Errc::invalid_argument, "need at least two classes");
  for (std::size_t i = 0; i < classes.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (classes[i] == classes[j]) fail(Errc::invalid_argument, "class '" + classes[i] + "' listed twice");
  if (logit_scale.mode == ScaleMode::fixed && !(logit_scale.value > 0)) {
    fail(Errc::invalid_argument, "fixed logit scale must be positive");
  }
}

VlmModel::VlmModel(ModelSpec spec) : spec_(std::move(spec)), encoder_((spec_.validate(), spec_.encoder)) {}

template <typename T>
ParamStore<T> VlmModel::init(const TextEmbeddingTable& table, std::uint64_t seed) const {
  if (table.classes() != spec_.classes) {
    fail(Errc::invalid_argument, "text embedding table classes do not match the model class list");
  }
  if (table.dim() != spec_.text_dim) {
    fail(Errc::dim_mismatch, "text embedding width " + std::to_string(table.dim()) + " does not match the model's " +
                                 std::to_string(spec_.text_dim));
  }
  ParamStore<T> params;
  encoder_.init_params(params, seed);
  init_projection_head(params, spec_.encoder.embed_dim, spec_.text_dim, seed);
  if (spec_.logit_scale.mode == ScaleMode::learnable) {
    params.add("logit_scale", BasicTensor<T>({1}, static_cast<T>(spec_.logit_scale.value)));
  } else {
    params.add("logit_scale.fixed", BasicTensor<T>({1}, static_cast<T>(spec_.logit_scale.value)), ParamKind::constant);
  }
  for (const auto& nt : table.to_named_tensors()) {
    params.add(nt.name, nt.value.template cast<T>(), ParamKind::constant);
  }
  return params;
}

template <typename T>
BasicTensor<T> VlmModel::text_rows(const ParamStore<T>& params) const {
  BasicTensor<T> rows({spec_.classes.size(), spec_.text_dim});
  for (std::size_t c = 0; c < spec_.classes.size(); ++c) {
    const auto& r = params.get(std::string(kTextEmbeddingPrefix) + spec_.classes[c]);
    require_shape(r.shape(), {spec_.text_dim}, "text embedding row");
    std::copy(r.values().begin(), r.values().end(), rows.data() + c * spec_.text_dim);
  }
  return rows;
}

template <typename T>
double VlmModel::scale(const ParamStore<T>& params) const {
  if (spec_.logit_scale.mode == ScaleMode::learnable) {
    const double log_s = static_cast<double>(params.get("logit_scale")[0]);
    const double s = std::exp(log_s);
    if (!std::isfinite(s) || !(s > 0)) {
      fail(Errc::numeric, "logit scale diverged (log s = " + std::to_string(log_s) + ")");
    }
    return s;
  }
  return static_cast<double>(params.get("logit_scale.fixed")[0]);
}

template <typename T>
void VlmModel::check_params(const ParamStore<T>& params) const {
  auto expect = [&](const std::string& name, const Shape& shape) {
    const auto* t = params.find(name);
    if (!t) fail(Errc::missing_entry, "model parameters lack '" + name + "'");
    if (t->shape() != shape) {
      fail(Errc::shape, "'" + name + "' has shape " + shape_to_string(t->shape()) + ", expected " +
                            shape_to_string(shape));
    }
  };
  const auto reference = build_encoder<T>(spec_.encoder, 0);
  for (const auto& e : reference.entries()) expect(e.name, e.value.shape());
  expect("fc_t.w", {spec_.encoder.embed_dim, spec_.text_dim});
  expect("fc_t.b", {spec_.encoder.embed_dim});
  expect(spec_.logit_scale.mode == ScaleMode::learnable ? "logit_scale" : "logit_scale.fixed", {1});
  for (const auto& c : spec_.classes) expect(std::string(kTextEmbeddingPrefix) + c, {spec_.text_dim});
}

template <typename T>
BasicTensor<T> VlmModel::logits(const ParamStore<T>& params, const BasicTensor<T>& batch, Mode mode,
                                ParamStore<T>* stats_sink, ModelTape<T>* tape) const {
  ModelTape<T> local;
  ModelTape<T>& t = tape ? *tape : local;
  t.img_emb = encode_images(encoder_, params, batch, mode, stats_sink, tape ? &t.encoder : nullptr);
  t.txt_rows = text_rows(params);
  t.txt_emb = project_text(params.get("fc_t.w"), params.get("fc_t.b").values(), t.txt_rows);
  t.scale = scale(params);
  t.cosine = cosine_similarity_matrix(t.img_emb, t.txt_emb);
  return compute_logits(t.img_emb, t.txt_emb, t.scale);
}

template <typename T>
LossResult<T> VlmModel::loss(const ParamStore<T>& params, const BasicTensor<T>& batch,
                             std::span<const std::size_t> labels, Mode mode, ParamStore<T>* stats_sink,
                             ParamStore<T>* grads, std::uint64_t* signature) const {
  if (labels.size() != batch.dim(0)) {
    fail(Errc::shape, "label count " + std::to_string(labels.size()) + " does not match batch size " +
                          std::to_string(batch.dim(0)));
  }
  for (std::size_t y : labels) {
    if (y >= spec_.classes.size()) fail(Errc::invalid_argument, "label index " + std::to_string(y) + " out of range");
  }
  ModelTape<T> tape;
  LossResult<T> out;
  out.logits = logits(params, batch, mode, stats_sink, grads || signature ? &tape : nullptr);
  out.loss = softmax_cross_entropy(out.logits, labels);
  if (signature) *signature = tape.encoder.nonsmooth_signature();
  if (!grads) return out;

  const auto dlogits = softmax_cross_entropy_backward(out.logits, labels);
  if (spec_.logit_scale.mode == ScaleMode::learnable) {
    double acc = 0;
    for (std::size_t i = 0; i < dlogits.size(); ++i) acc += static_cast<double>(dlogits[i]) * tape.cosine[i];
    BasicTensor<T> g({1}, static_cast<T>(acc * tape.scale));
    accumulate_grad(*grads, "logit_scale", g);
  }
  BasicTensor<T> dcos = dlogits;
  const T s = static_cast<T>(tape.scale);
  for (auto& v : dcos.values()) v *= s;
  auto cg = cosine_similarity_backward(tape.img_emb, tape.txt_emb, dcos);
  project_text_backward(params, tape.txt_rows, cg.txt, *grads);
  encode_images_backward(encoder_, params, tape.encoder, cg.img, *grads);
  return out;
}

template <typename T>
std::vector<std::size_t> argmax_rows(const BasicTensor<T>& m) {
  require_rank(m.shape(), 2, "argmax input");
  std::vector<std::size_t> out(m.dim(0));
  for (std::size_t i = 0; i < m.dim(0); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < m.dim(1); ++c)
      if (m.at(i, c) > m.at(i, best)) best = c;
    out[i] = best;
  }
  return out;
}

template <typename T>
Classification<T> classify(const VlmModel& model, const ParamStore<T>& params, const BasicTensor<T>& batch,
                           std::size_t chunk) {
  require_rank(batch.shape(), 4, "classify batch");
  if (chunk == 0) chunk = 1;
  const std::size_t n = batch.dim(0), per = batch.size() / std::max<std::size_t>(n, 1), c = model.num_classes();
  Classification<T> out;
  out.probabilities = BasicTensor<T>({n, c});
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t m = std::min(chunk, n - start);
    BasicTensor<T> part({m, batch.dim(1), batch.dim(2), batch.dim(3)});
    std::copy(batch.data() + start * per, batch.data() + (start + m) * per, part.data());
    const auto logits = model.logits(params, part, Mode::eval);
    const auto probs = softmax_rows(logits);
    const auto pred = argmax_rows(logits);
    std::copy(probs.values().begin(), probs.values().end(), out.probabilities.data() + start * c);
    out.predictions.insert(out.predictions.end(), pred.begin(), pred.end());
  }
  return out;
}

ParamKind kind_for_name(std::string_view name) {
  auto ends_with = [&](std::string_view suffix) {
    return name.size() >= suffix.size() && name.substr(name.size() - suffix.size()) == suffix;
  };
  if (ends_with(".running_mean") || ends_with(".running_var")) return ParamKind::buffer;
  if (starts_with(name, kTextEmbeddingPrefix) || name == "logit_scale.fixed") return ParamKind::constant;
  return ParamKind::parameter;
}

NamedTensors to_named_tensors(const ParamStore<float>& params) {
  NamedTensors out;
  out.reserve(params.size());
  for (const auto& e : params.entries()) out.push_back({e.name, e.value});
  return out;
}

void save_model(const std::filesystem::path& path, const ParamStore<float>& params) {
  save_tensors(path, to_named_tensors(params));
}

ParamStore<float> params_from_tensors(const NamedTensors& tensors) {
  ParamStore<float> out;
  for (const auto& t : tensors) out.add(t.name, t.value, kind_for_name(t.name));
  return out;
}

#define LVLM_INSTANTIATE_MODEL(T)                                                                                   \
  template BasicTensor<T> compute_logits<T>(const BasicTensor<T>&, const BasicTensor<T>&, double);                  \
  template ParamStore<T> VlmModel::init<T>(const TextEmbeddingTable&, std::uint64_t) const;                          \
  template BasicTensor<T> VlmModel::text_rows<T>(const ParamStore<T>&) const;                                       \
  template double VlmModel::scale<T>(const ParamStore<T>&) const;                                                   \
  template void VlmModel::check_params<T>(const ParamStore<T>&) const;                                              \
  template BasicTensor<T> VlmModel::logits<T>(const ParamStore<T>&, const BasicTensor<T>&, Mode, ParamStore<T>*,     \
                                              ModelTape<T>*) const;                                                 \
  template LossResult<T> VlmModel::loss<T>(const ParamStore<T>&, const BasicTensor<T>&, std::span<const std::size_t>, \
                                           Mode, ParamStore<T>*, ParamStore<T>*, std::uint64_t*) const;                             \
  template std::vector<std::size_t> argmax_rows<T>(const BasicTensor<T>&);                                          \
  template Classification<T> classify<T>(const VlmModel&, const ParamStore<T>&, const BasicTensor<T>&, std::size_t);

LVLM_INSTANTIATE_MODEL(float)
LVLM_INSTANTIATE_MODEL(double)

}  // namespace lvlm
