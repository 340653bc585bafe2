#pragma once

// Resolved run configuration. Sources apply in order (defaults, config file, flags); each
// source is a list of key=value settings, so a run manifest that stores the resolved list
// can rebuild the same configuration.

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lvlm/model.hpp"
#include "lvlm/train.hpp"

namespace lvlm {

using SettingList = std::vector<std::pair<std::string, std::string>>;

struct RunSettings {
  ModelSpec model{};
  TrainConfig train{};
  std::size_t folds = 3;
  bool stratify = true;

  /// Accepted keys: see setting_keys(). "encoder" replaces every encoder field with a preset.
  void apply(std::string_view key, std::string_view value);
  void apply(const SettingList& settings);

  /// Every resolved value in a fixed order; doubles printed with %.17g.
  SettingList describe() const;
  void validate() const;
};

std::vector<std::string> setting_keys();

/// key=value lines; '#' starts a comment; blank lines ignored; unknown keys rejected.
SettingList parse_settings(std::string_view text, std::string_view source = "<config>");
SettingList load_settings_file(const std::filesystem::path& path);

}  // namespace lvlm
