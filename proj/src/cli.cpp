#include "lvlm/cli.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <map>
#include <ostream>

#include <CLI11.hpp>

#include "lvlm/container.hpp"
#include "lvlm/crossval.hpp"
#include "lvlm/dataset.hpp"
#include "lvlm/error.hpp"
#include "lvlm/gradsuite.hpp"
#include "lvlm/random.hpp"
#include "lvlm/report.hpp"
#include "lvlm/settings.hpp"
#include "lvlm/synthetic.hpp"
#include "lvlm/text.hpp"
#include "lvlm/train.hpp"

namespace lvlm {

namespace fs = std::filesystem;

namespace {

std::string flag_for(const std::string& key) {
  std::string out = "--" + key;
  for (auto& ch : out)
    if (ch == '_') ch = '-';
  return out;
}

/// One string option per setting key; values are applied only when given.
struct SettingFlags {
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
  std::string config_file;

  void attach(CLI::App& app, bool with_folds) {
    app.add_option("--config", config_file, "key=value config file (flags override it)");
    for (const auto& key : setting_keys()) {
      if (key == "folds" && !with_folds) continue;
      const auto flag = key == "folds" ? std::string("--k") : flag_for(key);
      options[key] = app.add_option(flag, values[key], "setting '" + key + "'");
    }
  }

  RunSettings resolve() const {
    RunSettings s;
    if (!config_file.empty()) s.apply(load_settings_file(config_file));
    if (auto it = options.find("encoder"); it != options.end() && it->second->count()) {
      s.apply("encoder", values.at("encoder"));
    }
    for (const auto& key : setting_keys()) {
      if (key == "encoder") continue;
      auto it = options.find(key);
      if (it != options.end() && it->second->count()) s.apply(key, values.at(key));
    }
    return s;
  }
};

std::uint64_t dataset_hash(const Dataset& ds) {
  std::uint64_t h = fnv1a64(ds.provenance);
  for (const auto& l : ds.classes.labels()) h = splitmix64(h ^ fnv1a64(l.abbrev + "\n" + l.full_name));
  for (const auto& c : ds.cases) {
    h = splitmix64(h ^ fnv1a64(c.case_id + "\n" + c.label));
    for (const auto& s : c.slices) {
      const auto v = s.pixels.values();
      h = splitmix64(h ^ fnv1a64(s.slice_id));
      h = splitmix64(h ^ fnv1a64(std::string_view(reinterpret_cast<const char*>(v.data()), v.size_bytes())));
    }
  }
  return h;
}

std::uint64_t table_hash(const TextEmbeddingTable& table) { return fnv1a64(encode_tensors(table.to_named_tensors())); }

struct Inputs {
  Dataset dataset;
  TextEmbeddingTable table;
  ReportInputs report;
};

Inputs load_inputs(const std::string& data, const std::string& text_emb) {
  Dataset ds = load_dataset(data);
  const auto classes = ds.classes.abbrevs();
  auto table = load_embedding_table(text_emb, classes);
  ReportInputs ri{data, text_emb, hex64(dataset_hash(ds)), hex64(table_hash(table))};
  return {std::move(ds), std::move(table), std::move(ri)};
}

ModelSpec spec_for(const RunSettings& settings, const Inputs& in) {
  ModelSpec spec = settings.model;
  spec.classes = in.dataset.classes.abbrevs();
  spec.text_dim = in.table.dim();
  spec.validate();
  return spec;
}

std::string fmt(const char* pattern, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, pattern, args...);
  return buf;
}

int cmd_gen_data(const std::string& out_dir, std::uint64_t seed, std::size_t cases_per_class,
                 const std::string& profile, std::ostream& out) {
  SyntheticConfig config;
  config.seed = seed;
  config.cases_per_class = cases_per_class;
  if (!profile.empty()) config.profiles = parse_profiles(read_file(profile));
  const auto ds = generate_synthetic(config);
  save_dataset(out_dir, ds);
  out << fmt("wrote %zu classes, %zu cases, %zu slices to %s\n", ds.classes.size(), ds.cases.size(), ds.num_slices(),
             out_dir.c_str());
  return 0;
}

int cmd_embed_text(const std::string& classes_arg, const std::string& prompt_template, std::size_t dim,
                   std::uint64_t seed, const std::string& import, const std::string& out_file, std::ostream& out) {
  std::vector<std::string> abbrevs;
  for (std::size_t start = 0; start <= classes_arg.size();) {
    const auto comma = std::min(classes_arg.find(',', start), classes_arg.size());
    if (comma > start) abbrevs.push_back(classes_arg.substr(start, comma - start));
    start = comma + 1;
  }
  const auto registry = ClassRegistry::defaults().select(abbrevs);
  if (!import.empty()) {
    const auto table = load_embedding_table(import, registry.abbrevs());
    save_embedding_table(out_file, table);
    out << fmt("re-exported %zu rows of dimension %zu from %s\n", table.num_classes(), table.dim(), import.c_str());
    return 0;
  }
  for (const auto& label : registry.labels()) out << build_prompt(expand_label(registry, label.abbrev), prompt_template) << "\n";
  const auto table = make_pseudo_table(registry, prompt_template, dim, seed);
  save_embedding_table(out_file, table);
  return 0;
}

TrainRun run_training(const RunSettings& settings, const Inputs& in, const fs::path& out_dir, std::ostream& err) {
  settings.validate();
  const VlmModel model(spec_for(settings, in));
  const auto refs = collect_slices(in.dataset);
  TrainHooks hooks;
  const std::size_t epochs = settings.train.epochs;
  hooks.on_epoch = [&](const EpochRecord& e) {
    err << fmt("epoch %zu/%zu  loss %.6f  train_acc %.2f%%  %.2fs\n", e.epoch, epochs, e.loss, 100.0 * e.train_acc,
               e.seconds);
  };
  hooks.warn = [&](const std::string& msg) { err << "warning: " << msg << "\n"; };
  const auto result = train(model, in.dataset, refs, in.table, settings.train, hooks);

  fs::create_directories(out_dir);
  TrainRun run;
  run.inputs = in.report;
  run.config = settings.describe();
  run.classes = in.dataset.classes.abbrevs();
  run.weights = (out_dir / "weights.lvlm").string();
  run.history_csv = (out_dir / "history.csv").string();
  run.params_hash = hex64(hash_params(result.params));
  run.text_hash_after = hex64(hash_params(result.params, kTextEmbeddingPrefix));
  run.steps = result.steps;
  run.trainable = result.freeze.trainable.size();
  run.frozen = result.freeze.frozen.size();
  run.history = result.history;
  save_model(run.weights, result.params);
  write_file(run.history_csv, result.history.to_csv());
  write_file(out_dir / "run.json", train_run_json(run));
  return run;
}

int cmd_train(const SettingFlags& flags, const std::string& data, const std::string& text_emb,
              const std::string& replay, const std::string& out_dir, std::ostream& out, std::ostream& err) {
  if (!replay.empty()) {
    const auto recorded = parse_train_run(read_file(replay));
    RunSettings settings;
    settings.apply(recorded.config);
    const auto in = load_inputs(recorded.inputs.data, recorded.inputs.text_emb);
    if (in.report.data_hash != recorded.inputs.data_hash || in.report.text_hash != recorded.inputs.text_hash) {
      fail(Errc::schema_mismatch, "replay: inputs differ from the recorded run (dataset " + in.report.data_hash +
                                      " vs " + recorded.inputs.data_hash + ", text " + in.report.text_hash + " vs " +
                                      recorded.inputs.text_hash + ")");
    }
    const auto run = run_training(settings, in, out_dir, err);
    if (run.params_hash != recorded.params_hash) {
      out << "replay mismatch: params hash " << run.params_hash << " vs recorded " << recorded.params_hash << "\n";
      return 1;
    }
    out << "replay reproduced params hash " << run.params_hash << "\n";
    return 0;
  }
  if (data.empty() || text_emb.empty()) fail(Errc::invalid_argument, "train needs --data and --text-emb (or --replay)");
  const auto settings = flags.resolve();
  settings.validate();
  const auto in = load_inputs(data, text_emb);
  out << "resolved config:\n";
  for (const auto& [k, v] : settings.describe()) out << "  " << k << " = " << v << "\n";
  const auto run = run_training(settings, in, out_dir, err);
  if (!run.history.epochs.empty()) {
    const auto& last = run.history.epochs.back();
    out << fmt("final loss %.6f, train accuracy %.2f%%, %zu steps\n", last.loss, 100.0 * last.train_acc, run.steps);
  }
  out << "wrote " << run.weights << ", " << run.history_csv << ", " << (fs::path(out_dir) / "run.json").string()
      << "\n";
  return 0;
}

int cmd_crossval(const SettingFlags& flags, const std::string& data, const std::string& text_emb, std::size_t jobs,
                 const std::string& out_file, std::ostream& out, std::ostream& err) {
  const auto settings = flags.resolve();
  settings.validate();
  const auto in = load_inputs(data, text_emb);
  const auto spec = spec_for(settings, in);
  const auto keys = case_keys(in.dataset);
  const auto classes = in.dataset.classes.abbrevs();
  const auto split = split_cases_kfold(keys, classes.size(), settings.folds, derive_seed(settings.train.seed, "split"),
                                       settings.stratify, classes);
  CrossvalOptions options;
  options.jobs = jobs;
  options.log = [&](const std::string& msg) { err << msg << "\n"; };
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = run_crossval(in.dataset, split, spec, in.table, settings.train, options);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto json = crossval_json(result, settings, classes, in.report);
  write_file(out_file, json);
  out << render_report(json, ReportFormat::text);
  err << fmt("cross-validation finished in %.1fs; report written to %s\n", seconds, out_file.c_str());
  return 0;
}

int cmd_gradcheck(const std::string& scope, std::uint64_t seed, double tolerance, std::ostream& out) {
  const auto report = run_gradcheck_scope(scope, seed);
  std::size_t checked = 0;
  for (const auto& t : report.tensors) {
    out << fmt("%-48s checked %4zu  skipped %3zu  max_rel %.3e  max_abs %.3e\n", t.name.c_str(), t.checked, t.skipped,
               t.max_rel_error, t.max_abs_error);
    checked += t.checked;
  }
  const bool ok = checked > 0 && report.passed(tolerance);
  out << fmt("%s: max relative error %.3e (tolerance %.1e) over %zu elements\n", ok ? "PASS" : "FAIL",
             report.max_rel_error(), tolerance, checked);
  return ok ? 0 : 1;
}

int cmd_report(const std::string& in, const std::string& format, std::ostream& out) {
  const auto f = parse_report_format(format);
  out << render_report(read_file(in), f);
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Text-guided liver lesion classification toolkit"};
  app.name("lvlm");
  app.require_subcommand(1);

  std::string gen_out, gen_profile;
  std::uint64_t gen_seed = 42;
  std::size_t gen_cases = 15;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic multi-phase dataset");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--cases-per-class", gen_cases, "cases per class");
  gen->add_option("--profile", gen_profile, "phase profile JSON file");

  std::string emb_classes = "CYST,FNH,HCC,HEM", emb_template{kDefaultPromptTemplate}, emb_import, emb_out;
  std::size_t emb_dim = kDefaultTextDim;
  std::uint64_t emb_seed = 42;
  auto* emb = app.add_subcommand("embed-text", "Build or import the frozen class-prompt embedding table");
  emb->add_option("--classes", emb_classes, "comma-separated class abbreviations");
  emb->add_option("--template", emb_template, "prompt template with one {label} placeholder");
  emb->add_option("--dim", emb_dim, "embedding width");
  emb->add_option("--seed", emb_seed, "pseudo-embedding seed");
  emb->add_option("--import", emb_import, "existing table to validate and re-export");
  emb->add_option("--out", emb_out, "output table file")->required();

  std::string train_data, train_text, train_replay, train_out = "run";
  SettingFlags train_flags;
  auto* tr = app.add_subcommand("train", "Train on every slice of a dataset");
  tr->add_option("--data", train_data, "dataset directory");
  tr->add_option("--text-emb", train_text, "text embedding table");
  tr->add_option("--replay", train_replay, "re-run a recorded run.json and compare the result");
  tr->add_option("--out", train_out, "output directory");
  train_flags.attach(*tr, false);

  std::string cv_data, cv_text, cv_out = "crossval.json";
  std::size_t cv_jobs = 1;
  SettingFlags cv_flags;
  auto* cv = app.add_subcommand("crossval", "Case-level k-fold cross-validation");
  cv->add_option("--data", cv_data, "dataset directory")->required();
  cv->add_option("--text-emb", cv_text, "text embedding table")->required();
  cv->add_option("--jobs", cv_jobs, "folds trained concurrently (results do not depend on it)");
  cv->add_option("--out", cv_out, "report JSON file");
  cv_flags.attach(*cv, true);

  std::string gc_scope = "model";
  std::uint64_t gc_seed = 0;
  double gc_tolerance = 1e-5;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient verification in 64-bit");
  gc->add_option("--scope", gc_scope, "model or an op name");
  gc->add_option("--seed", gc_seed, "seed");
  gc->add_option("--tolerance", gc_tolerance, "maximum relative error");

  std::string rp_in, rp_format = "text";
  auto* rp = app.add_subcommand("report", "Render a train or crossval JSON document");
  rp->add_option("--in", rp_in, "input JSON")->required();
  rp->add_option("--format", rp_format, "text|json|csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_out, gen_seed, gen_cases, gen_profile, out);
    if (emb->parsed()) return cmd_embed_text(emb_classes, emb_template, emb_dim, emb_seed, emb_import, emb_out, out);
    if (tr->parsed()) return cmd_train(train_flags, train_data, train_text, train_replay, train_out, out, err);
    if (cv->parsed()) return cmd_crossval(cv_flags, cv_data, cv_text, cv_jobs, cv_out, out, err);
    if (gc->parsed()) return cmd_gradcheck(gc_scope, gc_seed, gc_tolerance, out);
    if (rp->parsed()) return cmd_report(rp_in, rp_format, out);
  } catch (const Error& e) {
    err << "error (" << errc_name(e.code()) << "): " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const fs::filesystem_error& e) {
    err << "error (io): " << e.what() << "\n";
    return 3;
  }
  return 2;
}

}  // namespace lvlm
