#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lvlm/tensor.hpp"

namespace lvlm {

/// Case identity for splitting: id plus class index.
struct CaseKey {
  std::string case_id;
  std::size_t label = 0;
};

/// k disjoint case groups; fold f tests on group f and trains on the rest.
struct FoldSplit {
  std::vector<std::vector<std::size_t>> groups;  // indices into the case list, ascending

  std::size_t k() const { return groups.size(); }
  std::size_t test_group(std::size_t fold) const { return fold; }
  std::vector<std::size_t> test_cases(std::size_t fold) const { return groups.at(test_group(fold)); }
  std::vector<std::size_t> train_cases(std::size_t fold) const;
};

/// Within each class (or over all cases when not stratified), cases are shuffled with a
/// seeded Fisher-Yates pass and dealt round-robin into k groups starting at group 0.
FoldSplit split_cases_kfold(std::span<const CaseKey> cases, std::size_t num_classes, std::size_t k,
                            std::uint64_t seed, bool stratify = true,
                            std::span<const std::string> class_names = {});

class Confusion {
 public:
  explicit Confusion(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {}

  void add(std::size_t truth, std::size_t predicted, std::size_t count = 1);
  std::size_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth * classes_ + predicted]; }
  std::size_t classes() const { return classes_; }
  std::size_t row_sum(std::size_t truth) const;
  std::size_t trace() const;
  std::size_t total() const;

 private:
  std::size_t classes_;
  std::vector<std::size_t> counts_;
};

struct AccuracyReport {
  std::vector<std::optional<double>> per_class;  // percent; empty rows are undefined
  double macro = 0;                              // mean of defined per-class values
  double micro = 0;                              // 100 * trace / total
};

AccuracyReport per_class_accuracy(const Confusion& confusion);

/// Rank-statistic AUC: (ordered pairs + 0.5 ties) / (positives * negatives).
/// Returns nullopt when either side is empty.
std::optional<double> binary_auc(std::span<const double> scores, std::span<const std::uint8_t> positive);

struct AucReport {
  double macro = 0;
  std::vector<std::optional<double>> per_class;
  std::vector<std::size_t> excluded;  // classes lacking positives or negatives
};

/// One-vs-rest AUC per class column, averaged over the classes where it is defined.
template <typename T>
AucReport macro_ovr_auc(const BasicTensor<T>& probabilities, std::span<const std::size_t> labels);

struct FoldReport {
  std::size_t fold = 0;
  std::vector<std::string> test_cases;
  std::size_t train_slices = 0;
  std::size_t test_slices = 0;
  Confusion confusion{0};
  AccuracyReport accuracy;
  AucReport auc;
};

struct MeanStd {
  bool defined = true;
  double mean = 0;
  double std = 0;
};

/// Population standard deviation unless `sample` is set.
MeanStd mean_std(std::span<const double> values, bool sample = false);

struct AggregateReport {
  std::vector<MeanStd> per_class;  // undefined when any fold lacks that class
  MeanStd macro;
  MeanStd micro;
  MeanStd auc;
};

AggregateReport aggregate_folds(std::span<const FoldReport> reports, bool sample_std = false);

/// "m ± s" with two decimals; "n/a" when undefined.
std::string format_mean_std(const MeanStd& v, int decimals = 2);

}  // namespace lvlm
