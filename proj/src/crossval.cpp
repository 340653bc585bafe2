#include "lvlm/crossval.hpp"

#include <atomic>
#include <exception>
#include <mutex>
#include <set>
#include <thread>

#include "lvlm/error.hpp"
#include "lvlm/random.hpp"

namespace lvlm {

std::vector<CaseKey> case_keys(const Dataset& dataset) {
  std::vector<CaseKey> keys;
  for (const auto& c : dataset.cases) keys.push_back({c.case_id, dataset.label_index(c)});
  return keys;
}

namespace {

void check_split(const Dataset& dataset, const FoldSplit& split) {
  if (split.k() < 2) fail(Errc::invalid_argument, "cross-validation needs k >= 2");
  std::set<std::size_t> seen;
  for (const auto& g : split.groups) {
    for (std::size_t i : g) {
      if (i >= dataset.cases.size()) fail(Errc::invalid_argument, "split references a case outside the dataset");
      if (!seen.insert(i).second) fail(Errc::invalid_argument, "split groups overlap");
    }
  }
  if (seen.size() != dataset.cases.size()) fail(Errc::invalid_argument, "split groups do not cover every case");
}

FoldResult run_fold(const Dataset& dataset, const FoldSplit& split, std::size_t fold, const VlmModel& model,
                    const TextEmbeddingTable& table, const TrainConfig& base) {
  TrainConfig config = base;
  config.seed = derive_seed(base.seed, "fold", fold);
  const auto train_cases = split.train_cases(fold);
  const auto test_cases = split.test_cases(fold);
  const auto train_refs = collect_slices(dataset, train_cases);
  const auto test_refs = collect_slices(dataset, test_cases);

  FoldResult out;
  auto trained = train(model, dataset, train_refs, table, config);
  out.history = std::move(trained.history);

  const auto batch = make_batch<float>(dataset, test_refs);
  const auto cls = classify(model, trained.params, batch);
  const std::size_t classes = model.num_classes();
  std::vector<std::size_t> labels;
  Confusion confusion(classes);
  for (std::size_t i = 0; i < test_refs.size(); ++i) {
    const auto& r = test_refs[i];
    labels.push_back(r.label);
    confusion.add(r.label, cls.predictions[i]);
    SlicePrediction p;
    p.case_id = dataset.cases[r.case_index].case_id;
    p.slice_id = dataset.cases[r.case_index].slices[r.slice_index].slice_id;
    p.label = r.label;
    p.predicted = cls.predictions[i];
    for (std::size_t c = 0; c < classes; ++c) p.probabilities.push_back(cls.probabilities.at(i, c));
    out.predictions.push_back(std::move(p));
  }
  auto& rep = out.report;
  rep.fold = fold;
  for (std::size_t ci : test_cases) rep.test_cases.push_back(dataset.cases[ci].case_id);
  rep.train_slices = train_refs.size();
  rep.test_slices = test_refs.size();
  rep.confusion = confusion;
  rep.accuracy = per_class_accuracy(confusion);
  rep.auc = macro_ovr_auc(cls.probabilities, labels);
  return out;
}

}  // namespace

CrossvalResult run_crossval(const Dataset& dataset, const FoldSplit& split, const ModelSpec& spec,
                            const TextEmbeddingTable& table, const TrainConfig& config,
                            const CrossvalOptions& options) {
  config.validate();
  check_split(dataset, split);
  const VlmModel model(spec);
  const std::size_t k = split.k();
  std::vector<FoldResult> folds(k);
  std::vector<std::exception_ptr> errors(k);
  std::mutex log_mutex;
  auto log = [&](const std::string& msg) {
    if (!options.log) return;
    std::lock_guard lock(log_mutex);
    options.log(msg);
  };
  auto work = [&](std::size_t f) {
    try {
      log("fold " + std::to_string(f + 1) + "/" + std::to_string(k) + ": training");
      folds[f] = run_fold(dataset, split, f, model, table, config);
      char buf[160];
      std::snprintf(buf, sizeof buf, "fold %zu/%zu: macro %.2f%%, micro %.2f%%, auc %.4f", f + 1, k,
                    folds[f].report.accuracy.macro, folds[f].report.accuracy.micro, folds[f].report.auc.macro);
      log(buf);
    } catch (...) {
      errors[f] = std::current_exception();
    }
  };

  const std::size_t jobs = std::max<std::size_t>(1, std::min(options.jobs, k));
  if (jobs == 1) {
    for (std::size_t f = 0; f < k; ++f) work(f);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) {
      pool.emplace_back([&] {
        for (std::size_t f; (f = next.fetch_add(1)) < k;) work(f);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  CrossvalResult out;
  out.folds = std::move(folds);
  std::vector<FoldReport> reports;
  for (const auto& f : out.folds) reports.push_back(f.report);
  out.aggregate = aggregate_folds(reports);
  return out;
}

}  // namespace lvlm
