#pragma once

// JSON documents written by `train` (run manifest) and `crossval` (fold reports), and the
// text/CSV/JSON renderings produced by `report`. Every document carries
// {"schema_version": 1, "kind": "train" | "crossval"}.

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "lvlm/crossval.hpp"
#include "lvlm/settings.hpp"
#include "lvlm/train.hpp"

namespace lvlm {

inline constexpr int kReportSchemaVersion = 1;

struct ReportInputs {
  std::string data;      // dataset directory
  std::string text_emb;  // embedding table file
  std::string data_hash;
  std::string text_hash;
};

/// Row label of the configuration, e.g. "tiny-18/basic scratch".
std::string configuration_label(const RunSettings& settings);

/// Deterministic: no timings or host details, so identical runs produce identical bytes.
std::string crossval_json(const CrossvalResult& result, const RunSettings& settings,
                          const std::vector<std::string>& classes, const ReportInputs& inputs);

struct TrainRun {
  ReportInputs inputs;
  SettingList config;
  std::vector<std::string> classes;
  std::string weights;  // output paths
  std::string history_csv;
  std::string params_hash;  // hex FNV-1a of the final parameter store
  std::string text_hash_after;
  std::size_t steps = 0;
  std::size_t trainable = 0;
  std::size_t frozen = 0;
  TrainHistory history;  // seconds are not serialized
};

std::string train_run_json(const TrainRun& run);
/// Accepts only kind "train"; schema_mismatch otherwise.
TrainRun parse_train_run(std::string_view json_text);

enum class ReportFormat { text, json, csv };
ReportFormat parse_report_format(std::string_view text);

/// Re-renders a train or crossval document; schema_mismatch naming the versions when the
/// schema version differs.
std::string render_report(std::string_view json_text, ReportFormat format);

std::string hex64(std::uint64_t v);

}  // namespace lvlm
