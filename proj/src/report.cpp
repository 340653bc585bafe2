#include "lvlm/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>

#include <json.hpp>

#include "lvlm/error.hpp"

namespace lvlm {

using Json = nlohmann::ordered_json;

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

namespace {

Json number_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

Json optional_number(const std::optional<double>& v) { return v ? number_or_null(*v) : Json(nullptr); }

Json mean_std_json(const MeanStd& v) {
  if (!v.defined) return nullptr;
  return Json{{"mean", number_or_null(v.mean)}, {"std", number_or_null(v.std)}};
}

Json config_json(const SettingList& config) {
  Json out = Json::object();
  for (const auto& [k, v] : config) out[k] = v;
  return out;
}

Json inputs_json(const ReportInputs& in) {
  return Json{{"data", in.data}, {"text_emb", in.text_emb}, {"data_hash", in.data_hash}, {"text_hash", in.text_hash}};
}

Json history_json(const TrainHistory& history) {
  Json out = Json::array();
  for (const auto& e : history.epochs) {
    Json row{{"epoch", e.epoch}, {"loss", e.loss}, {"train_acc", e.train_acc}};
    if (e.val_loss >= 0) {
      row["val_loss"] = e.val_loss;
      row["val_acc"] = e.val_acc;
    }
    out.push_back(std::move(row));
  }
  return out;
}

[[noreturn]] void schema_error(const std::string& what) { fail(Errc::schema_mismatch, "report: " + what); }

Json parse_document(std::string_view text) {
  Json doc;
  try {
    doc = Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    schema_error(std::string("input is not valid JSON (") + e.what() + ")");
  }
  if (!doc.is_object() || !doc.contains("schema_version") || !doc["schema_version"].is_number_integer()) {
    schema_error("missing integer schema_version");
  }
  const int version = doc["schema_version"].get<int>();
  if (version != kReportSchemaVersion) {
    schema_error("schema_version " + std::to_string(version) + " is not supported (expected " +
                 std::to_string(kReportSchemaVersion) + ")");
  }
  if (!doc.contains("kind") || !doc["kind"].is_string()) schema_error("missing kind");
  return doc;
}

template <typename F>
auto guarded(F&& f) {
  try {
    return f();
  } catch (const nlohmann::json::exception& e) {
    schema_error(std::string("malformed document (") + e.what() + ")");
  }
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

std::string cell(const Json& v) {
  if (v.is_null()) return "n/a";
  return fmt("%.2f", v.get<double>());
}

std::string cell_ms(const Json& v) {
  if (v.is_null() || v["mean"].is_null() || v["std"].is_null()) return "n/a";
  MeanStd m{true, v["mean"].get<double>(), v["std"].get<double>()};
  return format_mean_std(m);
}

std::size_t display_width(const std::string& s) {
  std::size_t n = 0;
  for (unsigned char c : s) n += (c & 0xC0) != 0x80;
  return n;
}

std::string render_table(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows) {
    width.resize(std::max(width.size(), r.size()), 0);
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], display_width(r[i]));
  }
  std::string out;
  for (const auto& r : rows) {
    std::string line;
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (i) line += "  ";
      line += r[i];
      if (i + 1 < r.size()) line.append(width[i] - display_width(r[i]), ' ');
    }
    out += line + "\n";
  }
  return out;
}

std::string csv_number(const Json& v) {
  if (v.is_null()) return "";
  return fmt("%.17g", v.get<double>());
}

std::string render_crossval(const Json& doc, ReportFormat format) {
  return guarded([&] {
    const auto classes = doc.at("classes").get<std::vector<std::string>>();
    const auto& folds = doc.at("folds");
    const auto& agg = doc.at("aggregate");
    if (format == ReportFormat::csv) {
      std::string header = "row";
      for (const auto& c : classes) header += "," + c;
      header += ",macro,micro,auc";
      for (const auto& c : classes) header += "," + c + "_std";
      header += ",macro_std,micro_std,auc_std\n";
      std::string out = header;
      for (const auto& f : folds) {
        std::string line = "fold" + std::to_string(f.at("fold").get<std::size_t>());
        for (const auto& v : f.at("accuracy").at("per_class")) line += "," + csv_number(v);
        line += "," + csv_number(f.at("accuracy").at("macro"));
        line += "," + csv_number(f.at("accuracy").at("micro"));
        line += "," + csv_number(f.at("auc").at("macro"));
        line.append(classes.size() + 3, ',');
        out += line + "\n";
      }
      auto mean = [](const Json& v) { return v.is_null() ? std::string() : csv_number(v.at("mean")); };
      auto sd = [](const Json& v) { return v.is_null() ? std::string() : csv_number(v.at("std")); };
      std::string line = "aggregate";
      for (const auto& v : agg.at("per_class")) line += "," + mean(v);
      for (const char* k : {"macro", "micro", "auc"}) line += "," + mean(agg.at(k));
      for (const auto& v : agg.at("per_class")) line += "," + sd(v);
      for (const char* k : {"macro", "micro", "auc"}) line += "," + sd(agg.at(k));
      return out + line + "\n";
    }
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> header{"Model"};
    header.insert(header.end(), classes.begin(), classes.end());
    header.insert(header.end(), {"Avg(macro)", "Avg(micro)", "AUC"});
    rows.push_back(header);
    for (const auto& f : folds) {
      std::vector<std::string> r{"  fold " + std::to_string(f.at("fold").get<std::size_t>())};
      for (const auto& v : f.at("accuracy").at("per_class")) r.push_back(cell(v));
      r.push_back(cell(f.at("accuracy").at("macro")));
      r.push_back(cell(f.at("accuracy").at("micro")));
      r.push_back(cell(f.at("auc").at("macro")));
      rows.push_back(r);
    }
    std::vector<std::string> r{doc.at("label").get<std::string>()};
    for (const auto& v : agg.at("per_class")) r.push_back(cell_ms(v));
    for (const char* k : {"macro", "micro", "auc"}) r.push_back(cell_ms(agg.at(k)));
    rows.push_back(r);
    return render_table(rows);
  });
}

std::string render_train(const Json& doc, ReportFormat format) {
  return guarded([&] {
    const auto& history = doc.at("history");
    if (format == ReportFormat::csv) {
      const bool val = !history.empty() && history.front().contains("val_loss");
      std::string out = val ? "epoch,loss,train_acc,val_loss,val_acc\n" : "epoch,loss,train_acc\n";
      for (const auto& e : history) {
        out += std::to_string(e.at("epoch").get<std::size_t>()) + "," + csv_number(e.at("loss")) + "," +
               csv_number(e.at("train_acc"));
        if (val) out += "," + csv_number(e.at("val_loss")) + "," + csv_number(e.at("val_acc"));
        out += "\n";
      }
      return out;
    }
    std::vector<std::vector<std::string>> rows{{"key", "value"}};
    for (const auto& [k, v] : doc.at("config").items()) rows.push_back({k, v.get<std::string>()});
    const auto& res = doc.at("results");
    rows.push_back({"steps", std::to_string(res.at("steps").get<std::size_t>())});
    rows.push_back({"params_hash", res.at("params_hash").get<std::string>()});
    if (!history.empty()) {
      const auto& last = history.back();
      rows.push_back({"final_loss", fmt("%.6f", last.at("loss").get<double>())});
      rows.push_back({"final_train_acc", fmt("%.2f", 100.0 * last.at("train_acc").get<double>())});
    }
    return render_table(rows);
  });
}

}  // namespace

std::string configuration_label(const RunSettings& settings) {
  const auto& enc = settings.model.encoder;
  std::string depth;
  for (auto b : enc.stage_blocks) depth += (depth.empty() ? "" : "-") + std::to_string(b);
  return std::string(to_string(enc.block_kind)) + "[" + depth + "] " +
         (settings.train.variant == Variant::scratch ? "scratch" : "finetune");
}

std::string crossval_json(const CrossvalResult& result, const RunSettings& settings,
                          const std::vector<std::string>& classes, const ReportInputs& inputs) {
  Json doc{{"schema_version", kReportSchemaVersion}, {"kind", "crossval"}};
  doc["label"] = configuration_label(settings);
  doc["inputs"] = inputs_json(inputs);
  doc["config"] = config_json(settings.describe());
  doc["classes"] = classes;
  Json folds = Json::array();
  for (const auto& f : result.folds) {
    const auto& r = f.report;
    Json confusion = Json::array();
    for (std::size_t t = 0; t < r.confusion.classes(); ++t) {
      Json row = Json::array();
      for (std::size_t p = 0; p < r.confusion.classes(); ++p) row.push_back(r.confusion.at(t, p));
      confusion.push_back(std::move(row));
    }
    Json per_class = Json::array();
    for (const auto& v : r.accuracy.per_class) per_class.push_back(optional_number(v));
    Json auc_per_class = Json::array();
    for (const auto& v : r.auc.per_class) auc_per_class.push_back(optional_number(v));
    Json preds = Json::array();
    for (const auto& p : f.predictions) {
      preds.push_back(Json{{"case_id", p.case_id},
                           {"slice_id", p.slice_id},
                           {"label", classes.at(p.label)},
                           {"predicted", classes.at(p.predicted)},
                           {"probabilities", p.probabilities}});
    }
    const auto& last = f.history.epochs;
    folds.push_back(Json{
        {"fold", r.fold + 1},
        {"test_cases", r.test_cases},
        {"train_slices", r.train_slices},
        {"test_slices", r.test_slices},
        {"final_loss", last.empty() ? Json(nullptr) : number_or_null(last.back().loss)},
        {"final_train_acc", last.empty() ? Json(nullptr) : number_or_null(last.back().train_acc)},
        {"confusion", confusion},
        {"accuracy", {{"per_class", per_class}, {"macro", number_or_null(r.accuracy.macro)},
                      {"micro", number_or_null(r.accuracy.micro)}}},
        {"auc", {{"per_class", auc_per_class}, {"macro", number_or_null(r.auc.macro)}, {"excluded", r.auc.excluded}}},
        {"predictions", preds},
    });
  }
  doc["folds"] = folds;
  Json agg_per_class = Json::array();
  for (const auto& v : result.aggregate.per_class) agg_per_class.push_back(mean_std_json(v));
  doc["aggregate"] = Json{{"std", "population"},
                          {"per_class", agg_per_class},
                          {"macro", mean_std_json(result.aggregate.macro)},
                          {"micro", mean_std_json(result.aggregate.micro)},
                          {"auc", mean_std_json(result.aggregate.auc)}};
  return doc.dump(2) + "\n";
}

std::string train_run_json(const TrainRun& run) {
  Json doc{{"schema_version", kReportSchemaVersion}, {"kind", "train"}};
  doc["inputs"] = inputs_json(run.inputs);
  doc["config"] = config_json(run.config);
  doc["classes"] = run.classes;
  doc["outputs"] = Json{{"weights", run.weights}, {"history", run.history_csv}};
  doc["results"] = Json{{"steps", run.steps},
                        {"trainable_tensors", run.trainable},
                        {"frozen_tensors", run.frozen},
                        {"params_hash", run.params_hash},
                        {"text_hash_after", run.text_hash_after}};
  doc["history"] = history_json(run.history);
  return doc.dump(2) + "\n";
}

TrainRun parse_train_run(std::string_view json_text) {
  const Json doc = parse_document(json_text);
  if (doc["kind"] != "train") {
    schema_error("expected a train run manifest, got kind '" + doc["kind"].get<std::string>() + "'");
  }
  return guarded([&] {
    TrainRun run;
    const auto& in = doc.at("inputs");
    run.inputs = {in.at("data").get<std::string>(), in.at("text_emb").get<std::string>(),
                  in.at("data_hash").get<std::string>(), in.at("text_hash").get<std::string>()};
    for (const auto& [k, v] : doc.at("config").items()) run.config.emplace_back(k, v.get<std::string>());
    run.classes = doc.at("classes").get<std::vector<std::string>>();
    run.weights = doc.at("outputs").at("weights").get<std::string>();
    run.history_csv = doc.at("outputs").at("history").get<std::string>();
    const auto& res = doc.at("results");
    run.steps = res.at("steps").get<std::size_t>();
    run.trainable = res.at("trainable_tensors").get<std::size_t>();
    run.frozen = res.at("frozen_tensors").get<std::size_t>();
    run.params_hash = res.at("params_hash").get<std::string>();
    run.text_hash_after = res.at("text_hash_after").get<std::string>();
    for (const auto& e : doc.at("history")) {
      EpochRecord r;
      r.epoch = e.at("epoch").get<std::size_t>();
      r.loss = e.at("loss").get<double>();
      r.train_acc = e.at("train_acc").get<double>();
      if (e.contains("val_loss")) {
        r.val_loss = e.at("val_loss").get<double>();
        r.val_acc = e.at("val_acc").get<double>();
      }
      run.history.epochs.push_back(r);
    }
    return run;
  });
}

ReportFormat parse_report_format(std::string_view text) {
  if (text == "text") return ReportFormat::text;
  if (text == "json") return ReportFormat::json;
  if (text == "csv") return ReportFormat::csv;
  fail(Errc::invalid_argument, "report format must be text|json|csv, got '" + std::string(text) + "'");
}

std::string render_report(std::string_view json_text, ReportFormat format) {
  const Json doc = parse_document(json_text);
  if (format == ReportFormat::json) return doc.dump(2) + "\n";
  const auto kind = doc["kind"].get<std::string>();
  if (kind == "crossval") return render_crossval(doc, format);
  if (kind == "train") return render_train(doc, format);
  schema_error("unknown document kind '" + kind + "'");
}

}  // namespace lvlm
