#include "lvlm/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "lvlm/error.hpp"
#include "lvlm/random.hpp"

namespace lvlm {

std::vector<std::size_t> FoldSplit::train_cases(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t g = 0; g < groups.size(); ++g)
    if (g != test_group(fold)) out.insert(out.end(), groups[g].begin(), groups[g].end());
  std::sort(out.begin(), out.end());
  return out;
}

FoldSplit split_cases_kfold(std::span<const CaseKey> cases, std::size_t num_classes, std::size_t k,
                            std::uint64_t seed, bool stratify, std::span<const std::string> class_names) {
  if (k < 2) fail(Errc::invalid_argument, "k-fold split needs k >= 2, got " + std::to_string(k));
  auto class_name = [&](std::size_t c) {
    return c < class_names.size() ? class_names[c] : "class " + std::to_string(c);
  };
  std::vector<std::vector<std::size_t>> pools(stratify ? num_classes : 1);
  for (std::size_t i = 0; i < cases.size(); ++i) {
    if (cases[i].label >= num_classes) fail(Errc::invalid_argument, "case label out of range");
    pools[stratify ? cases[i].label : 0].push_back(i);
  }
  if (stratify) {
    for (std::size_t c = 0; c < num_classes; ++c) {
      if (pools[c].size() < k) {
        fail(Errc::invalid_argument, "class " + class_name(c) + " has " + std::to_string(pools[c].size()) +
                                         " cases, fewer than k = " + std::to_string(k));
      }
    }
  } else if (cases.size() < k) {
    fail(Errc::invalid_argument, "only " + std::to_string(cases.size()) + " cases for k = " + std::to_string(k));
  }

  FoldSplit split;
  split.groups.assign(k, {});
  Rng rng(derive_seed(seed, "split"));
  for (auto& pool : pools) {
    rng.shuffle(std::span<std::size_t>(pool));
    for (std::size_t i = 0; i < pool.size(); ++i) split.groups[i % k].push_back(pool[i]);
  }
  for (auto& g : split.groups) std::sort(g.begin(), g.end());
  return split;
}

void Confusion::add(std::size_t truth, std::size_t predicted, std::size_t count) {
  if (truth >= classes_ || predicted >= classes_) fail(Errc::invalid_argument, "confusion index out of range");
  counts_[truth * classes_ + predicted] += count;
}

std::size_t Confusion::row_sum(std::size_t truth) const {
  std::size_t s = 0;
  for (std::size_t p = 0; p < classes_; ++p) s += at(truth, p);
  return s;
}

std::size_t Confusion::trace() const {
  std::size_t s = 0;
  for (std::size_t c = 0; c < classes_; ++c) s += at(c, c);
  return s;
}

std::size_t Confusion::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::size_t{0}); }

AccuracyReport per_class_accuracy(const Confusion& confusion) {
  const std::size_t total = confusion.total();
  if (total == 0) fail(Errc::invalid_argument, "per_class_accuracy: confusion matrix is all zero");
  AccuracyReport r;
  double sum = 0;
  std::size_t defined = 0;
  for (std::size_t c = 0; c < confusion.classes(); ++c) {
    const std::size_t row = confusion.row_sum(c);
    if (row == 0) {
      r.per_class.push_back(std::nullopt);
      continue;
    }
    const double acc = 100.0 * static_cast<double>(confusion.at(c, c)) / static_cast<double>(row);
    r.per_class.push_back(acc);
    sum += acc;
    ++defined;
  }
  r.macro = sum / static_cast<double>(defined);
  r.micro = 100.0 * static_cast<double>(confusion.trace()) / static_cast<double>(total);
  return r;
}

std::optional<double> binary_auc(std::span<const double> scores, std::span<const std::uint8_t> positive) {
  if (scores.size() != positive.size()) fail(Errc::shape, "binary_auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Mid-ranks (1-based) over tie groups; all values are multiples of 0.5, exact in double.
  double rank_sum = 0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) {
      if (positive[order[t]]) {
        rank_sum += mid;
        ++pos;
      }
    }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) return std::nullopt;
  const double p = static_cast<double>(pos);
  const double u = rank_sum - p * (p + 1) / 2;
  return u / (p * static_cast<double>(neg));
}

template <typename T>
AucReport macro_ovr_auc(const BasicTensor<T>& probabilities, std::span<const std::size_t> labels) {
  require_rank(probabilities.shape(), 2, "macro_ovr_auc probabilities");
  const std::size_t n = probabilities.dim(0), classes = probabilities.dim(1);
  if (labels.size() != n) fail(Errc::shape, "macro_ovr_auc: label count does not match rows");
  if (n < 2) fail(Errc::invalid_argument, "macro_ovr_auc needs at least two samples");
  AucReport r;
  std::vector<double> scores(n);
  std::vector<std::uint8_t> positive(n);
  double sum = 0;
  std::size_t included = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i] >= classes) fail(Errc::invalid_argument, "macro_ovr_auc: label out of range");
      scores[i] = static_cast<double>(probabilities.at(i, c));
      positive[i] = labels[i] == c;
    }
    auto auc = binary_auc(scores, positive);
    r.per_class.push_back(auc);
    if (auc) {
      sum += *auc;
      ++included;
    } else {
      r.excluded.push_back(c);
    }
  }
  if (included == 0) fail(Errc::invalid_argument, "macro_ovr_auc: no class has both positives and negatives");
  r.macro = sum / static_cast<double>(included);
  return r;
}

template AucReport macro_ovr_auc<float>(const BasicTensor<float>&, std::span<const std::size_t>);
template AucReport macro_ovr_auc<double>(const BasicTensor<double>&, std::span<const std::size_t>);

MeanStd mean_std(std::span<const double> values, bool sample) {
  if (values.empty()) fail(Errc::invalid_argument, "mean_std of an empty list");
  MeanStd r;
  double sum = 0;
  for (double v : values) sum += v;
  r.mean = sum / static_cast<double>(values.size());
  double sq = 0;
  for (double v : values) sq += (v - r.mean) * (v - r.mean);
  const std::size_t denom = sample ? values.size() - 1 : values.size();
  r.std = denom == 0 ? 0.0 : std::sqrt(sq / static_cast<double>(denom));
  return r;
}

AggregateReport aggregate_folds(std::span<const FoldReport> reports, bool sample_std) {
  if (reports.empty()) fail(Errc::invalid_argument, "aggregate_folds: no fold reports");
  AggregateReport a;
  const std::size_t classes = reports[0].accuracy.per_class.size();
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<double> vals;
    bool defined = true;
    for (const auto& r : reports) {
      if (r.accuracy.per_class.size() != classes) fail(Errc::invalid_argument, "fold reports disagree on classes");
      if (!r.accuracy.per_class[c]) defined = false;
      else vals.push_back(*r.accuracy.per_class[c]);
    }
    a.per_class.push_back(defined ? mean_std(vals, sample_std) : MeanStd{false, 0, 0});
  }
  std::vector<double> macro, micro, auc;
  for (const auto& r : reports) {
    macro.push_back(r.accuracy.macro);
    micro.push_back(r.accuracy.micro);
    auc.push_back(r.auc.macro);
  }
  a.macro = mean_std(macro, sample_std);
  a.micro = mean_std(micro, sample_std);
  a.auc = mean_std(auc, sample_std);
  return a;
}

std::string format_mean_std(const MeanStd& v, int decimals) {
  if (!v.defined) return "n/a";
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.*f ± %.*f", decimals, v.mean, decimals, v.std);
  return buf;
}

}  // namespace lvlm
