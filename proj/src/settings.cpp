#include "lvlm/settings.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <type_traits>

#include "lvlm/container.hpp"
#include "lvlm/error.hpp"

namespace lvlm {

namespace {

std::string_view trim(std::string_view s) {
  const auto ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
  fail(Errc::invalid_argument,
       "setting '" + std::string(key) + "': expected " + std::string(expected) + ", got '" + std::string(value) + "'");
}

std::size_t to_size(std::string_view key, std::string_view value) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc{} || ptr != value.data() + value.size() || value.empty()) {
    bad_value(key, value, "a non-negative integer");
  }
  return out;
}

std::uint64_t to_u64(std::string_view key, std::string_view value) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc{} || ptr != value.data() + value.size() || value.empty()) {
    bad_value(key, value, "an unsigned 64-bit integer");
  }
  return out;
}

double to_double(std::string_view key, std::string_view value) {
  double out = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc{} || ptr != value.data() + value.size() || value.empty()) bad_value(key, value, "a number");
  return out;
}

bool to_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  bad_value(key, value, "true|false");
}

std::vector<std::string> split_list(std::string_view value) {
  std::vector<std::string> out;
  while (!value.empty()) {
    const auto comma = value.find(',');
    const auto item = trim(value.substr(0, comma));
    if (!item.empty()) out.emplace_back(item);
    if (comma == std::string_view::npos) break;
    value.remove_prefix(comma + 1);
  }
  return out;
}

std::vector<std::size_t> to_sizes(std::string_view key, std::string_view value) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(value)) out.push_back(to_size(key, item));
  if (out.empty()) bad_value(key, value, "a comma-separated list of integers");
  return out;
}

std::string join(const auto& items) {
  std::string out;
  for (const auto& item : items) {
    if (!out.empty()) out += ',';
    if constexpr (std::is_same_v<std::decay_t<decltype(item)>, std::string>) {
      out += item;
    } else {
      out += std::to_string(item);
    }
  }
  return out;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const std::vector<std::string>& keys() {
  static const std::vector<std::string> k{
      "encoder",      "stage_blocks", "stage_channels", "block_kind",   "stem",     "embed_dim",
      "bn_momentum",  "bn_eps",       "logit_scale",    "epochs",       "batch_size", "lr",
      "weight_decay", "beta1",        "beta2",          "adam_eps",     "decay_all", "seed",
      "variant",      "freeze",       "folds",          "stratify"};
  return k;
}

}  // namespace

std::vector<std::string> setting_keys() { return keys(); }

void RunSettings::apply(std::string_view key, std::string_view value) {
  value = trim(value);
  auto& enc = model.encoder;
  auto& opt = train.optimizer;
  if (key == "encoder") {
    enc = EncoderConfig::preset(value);
  } else if (key == "stage_blocks") {
    enc.stage_blocks = to_sizes(key, value);
  } else if (key == "stage_channels") {
    enc.stage_channels = to_sizes(key, value);
  } else if (key == "block_kind") {
    enc.block_kind = parse_block_kind(value);
  } else if (key == "stem") {
    enc.stem = parse_stem_kind(value);
  } else if (key == "embed_dim") {
    enc.embed_dim = to_size(key, value);
  } else if (key == "bn_momentum") {
    enc.norm.momentum = to_double(key, value);
  } else if (key == "bn_eps") {
    enc.norm.epsilon = to_double(key, value);
  } else if (key == "logit_scale") {
    model.logit_scale = LogitScaleConfig::parse(value);
  } else if (key == "epochs") {
    train.epochs = to_size(key, value);
  } else if (key == "batch_size") {
    train.batch_size = to_size(key, value);
  } else if (key == "lr") {
    opt.learning_rate = to_double(key, value);
  } else if (key == "weight_decay") {
    opt.weight_decay = to_double(key, value);
  } else if (key == "beta1") {
    opt.beta1 = to_double(key, value);
  } else if (key == "beta2") {
    opt.beta2 = to_double(key, value);
  } else if (key == "adam_eps") {
    opt.epsilon = to_double(key, value);
  } else if (key == "decay_all") {
    opt.decay_all = to_bool(key, value);
  } else if (key == "seed") {
    train.seed = to_u64(key, value);
  } else if (key == "variant") {
    train.set_variant(value);
  } else if (key == "freeze") {
    train.freeze = split_list(value);
  } else if (key == "folds") {
    folds = to_size(key, value);
  } else if (key == "stratify") {
    stratify = to_bool(key, value);
  } else {
    std::string known;
    for (const auto& k : keys()) known += (known.empty() ? "" : ", ") + k;
    fail(Errc::invalid_argument, "unknown setting '" + std::string(key) + "' (known: " + known + ")");
  }
}

void RunSettings::apply(const SettingList& settings) {
  for (const auto& [k, v] : settings) apply(k, v);
}

SettingList RunSettings::describe() const {
  const auto& enc = model.encoder;
  const auto& opt = train.optimizer;
  return {
      {"stage_blocks", join(enc.stage_blocks)},
      {"stage_channels", join(enc.stage_channels)},
      {"block_kind", std::string(to_string(enc.block_kind))},
      {"stem", std::string(to_string(enc.stem))},
      {"embed_dim", std::to_string(enc.embed_dim)},
      {"bn_momentum", fmt_double(enc.norm.momentum)},
      {"bn_eps", fmt_double(enc.norm.epsilon)},
      {"logit_scale", model.logit_scale.to_string()},
      {"epochs", std::to_string(train.epochs)},
      {"batch_size", std::to_string(train.batch_size)},
      {"lr", fmt_double(opt.learning_rate)},
      {"weight_decay", fmt_double(opt.weight_decay)},
      {"beta1", fmt_double(opt.beta1)},
      {"beta2", fmt_double(opt.beta2)},
      {"adam_eps", fmt_double(opt.epsilon)},
      {"decay_all", opt.decay_all ? "true" : "false"},
      {"seed", std::to_string(train.seed)},
      {"variant", train.variant_string()},
      {"freeze", join(train.freeze)},
      {"folds", std::to_string(folds)},
      {"stratify", stratify ? "true" : "false"},
  };
}

void RunSettings::validate() const {
  model.validate();
  train.validate();
  if (folds < 2) fail(Errc::invalid_argument, "folds must be >= 2");
}

SettingList parse_settings(std::string_view text, std::string_view source) {
  SettingList out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    auto line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const auto where = std::string(source) + ":" + std::to_string(line_no);
    if (eq == std::string_view::npos) fail(Errc::invalid_argument, where + ": expected key=value");
    const auto key = std::string(trim(line.substr(0, eq)));
    if (std::find(keys().begin(), keys().end(), key) == keys().end()) {
      fail(Errc::invalid_argument, where + ": unknown setting '" + key + "'");
    }
    out.emplace_back(key, std::string(trim(line.substr(eq + 1))));
  }
  return out;
}

SettingList load_settings_file(const std::filesystem::path& path) {
  return parse_settings(read_file(path), path.string());
}

}  // namespace lvlm
