#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "lvlm/error.hpp"
#include "lvlm/evaluation.hpp"
#include "lvlm/random.hpp"
#include "test_util.hpp"

namespace lvlm {
namespace {

std::vector<CaseKey> make_cases(const std::vector<std::size_t>& per_class) {
  std::vector<CaseKey> cases;
  for (std::size_t c = 0; c < per_class.size(); ++c)
    for (std::size_t i = 0; i < per_class[c]; ++i) cases.push_back({"c" + std::to_string(c) + "_" + std::to_string(i), c});
  return cases;
}

std::vector<std::vector<std::size_t>> class_group_sizes(const FoldSplit& split, const std::vector<CaseKey>& cases,
                                                        std::size_t classes) {
  std::vector<std::vector<std::size_t>> sizes(classes, std::vector<std::size_t>(split.k(), 0));
  for (std::size_t g = 0; g < split.k(); ++g)
    for (std::size_t i : split.groups[g]) ++sizes[cases[i].label][g];
  return sizes;
}

TEST(Split, ThirtyCasesOneClass) {
  const auto cases = make_cases({30});
  const auto split = split_cases_kfold(cases, 1, 3, 42);
  for (const auto& g : split.groups) EXPECT_EQ(g.size(), 10u);
}

TEST(Split, PaperClassCounts) {
  const auto cases = make_cases({30, 16, 19, 20});
  const auto split = split_cases_kfold(cases, 4, 3, 42);
  const auto sizes = class_group_sizes(split, cases, 4);
  // Round-robin from group 0: the first r groups receive the extra case.
  const std::vector<std::vector<std::size_t>> expect{{10, 10, 10}, {6, 5, 5}, {7, 6, 6}, {7, 7, 6}};
  EXPECT_EQ(sizes, expect);
}

TEST(Split, DeterministicPerSeed) {
  const auto cases = make_cases({15, 15, 15, 15});
  const auto a = split_cases_kfold(cases, 4, 3, 1);
  const auto b = split_cases_kfold(cases, 4, 3, 1);
  const auto c = split_cases_kfold(cases, 4, 3, 2);
  EXPECT_EQ(a.groups, b.groups);
  EXPECT_NE(a.groups, c.groups);
  EXPECT_EQ(class_group_sizes(a, cases, 4), class_group_sizes(c, cases, 4));
}

TEST(Split, TooFewCasesNamesClass) {
  const auto cases = make_cases({5, 2});
  const std::vector<std::string> names{"CYST", "FNH"};
  try {
    (void)split_cases_kfold(cases, 2, 3, 0, true, names);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("FNH"), std::string::npos);
  }
  EXPECT_THROW((void)split_cases_kfold(cases, 2, 1, 0), Error);
  EXPECT_NO_THROW((void)split_cases_kfold(cases, 2, 3, 0, false));
}

TEST(Split, KFiveOnFifteenPerClass) {
  const auto cases = make_cases({15, 15, 15, 15});
  const auto split = split_cases_kfold(cases, 4, 5, 42);
  for (const auto& row : class_group_sizes(split, cases, 4))
    for (std::size_t n : row) EXPECT_EQ(n, 3u);
}

TEST(Split, PartitionPropertyOverRandomDistributions) {
  Rng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t classes = 1 + rng.below(6), k = 2 + rng.below(4);
    const bool stratify = rng.below(4) != 0;
    std::vector<std::size_t> counts(classes);
    for (auto& n : counts) n = k + rng.below(25);
    const auto cases = make_cases(counts);
    const auto split = split_cases_kfold(cases, classes, k, rng.next(), stratify);
    std::vector<int> seen(cases.size(), 0);
    for (const auto& g : split.groups) {
      EXPECT_TRUE(std::is_sorted(g.begin(), g.end()));
      for (std::size_t i : g) ++seen[i];
    }
    for (int s : seen) ASSERT_EQ(s, 1);
    for (std::size_t f = 0; f < k; ++f) {
      const auto test = split.test_cases(f), train = split.train_cases(f);
      EXPECT_EQ(test.size() + train.size(), cases.size());
      std::set<std::size_t> t(test.begin(), test.end());
      for (std::size_t i : train) ASSERT_FALSE(t.count(i));
    }
    if (stratify) {
      for (const auto& row : class_group_sizes(split, cases, classes)) {
        EXPECT_LE(*std::max_element(row.begin(), row.end()) - *std::min_element(row.begin(), row.end()), 1u);
      }
    }
  }
}

TEST(Accuracy, Examples) {
  Confusion diag(3);
  for (std::size_t c = 0; c < 3; ++c) diag.add(c, c, 4);
  const auto d = per_class_accuracy(diag);
  for (const auto& v : d.per_class) EXPECT_EQ(*v, 100.0);

  Confusion m(2);
  m.add(0, 0);
  m.add(0, 1);
  m.add(1, 1, 2);
  const auto r = per_class_accuracy(m);
  EXPECT_DOUBLE_EQ(*r.per_class[0], 50.0);
  EXPECT_DOUBLE_EQ(*r.per_class[1], 100.0);
  EXPECT_DOUBLE_EQ(r.macro, 75.0);
  EXPECT_DOUBLE_EQ(r.micro, 75.0);

  Confusion collapse(4);
  for (std::size_t c = 0; c < 4; ++c) collapse.add(c, 0, 5);
  const auto cr = per_class_accuracy(collapse);
  EXPECT_EQ(*cr.per_class[0], 100.0);
  for (std::size_t c = 1; c < 4; ++c) EXPECT_EQ(*cr.per_class[c], 0.0);
  EXPECT_DOUBLE_EQ(cr.macro, 25.0);
  EXPECT_DOUBLE_EQ(cr.micro, 25.0);

  EXPECT_THROW(per_class_accuracy(Confusion(3)), Error);
}

TEST(Accuracy, EmptyRowUndefinedAndMicroIsTraceOverTotal) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    Confusion m(4);
    for (int i = 0; i < 30; ++i) m.add(rng.below(3), rng.below(4));
    const auto r = per_class_accuracy(m);
    EXPECT_FALSE(r.per_class[3].has_value());
    EXPECT_EQ(r.micro, 100.0 * static_cast<double>(m.trace()) / static_cast<double>(m.total()));
    double s = 0;
    int n = 0;
    for (const auto& v : r.per_class)
      if (v) {
        s += *v;
        ++n;
      }
    EXPECT_NEAR(r.macro, s / n, 1e-12);
  }
}

double brute_auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& pos) {
  double num = 0, p = 0, n = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) (pos[i] ? p : n) += 1;
  for (std::size_t i = 0; i < scores.size(); ++i)
    for (std::size_t j = 0; j < scores.size(); ++j)
      if (pos[i] && !pos[j]) num += scores[i] > scores[j] ? 1.0 : (scores[i] == scores[j] ? 0.5 : 0.0);
  return num / (p * n);
}

TEST(Auc, Examples) {
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  const std::vector<std::uint8_t> y{0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(*binary_auc(s, y), 0.75);
  EXPECT_DOUBLE_EQ(*binary_auc(std::vector<double>{1, 2, 3, 4}, y), 1.0);
  EXPECT_DOUBLE_EQ(*binary_auc(std::vector<double>{4, 3, 2, 1}, y), 0.0);
  EXPECT_DOUBLE_EQ(*binary_auc(std::vector<double>{2, 2, 2, 2}, y), 0.5);
  EXPECT_FALSE(binary_auc(s, std::vector<std::uint8_t>{1, 1, 1, 1}).has_value());
}

TEST(Auc, MacroMatchesBruteForceWithTies) {
  Rng rng(77);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + rng.below(120), c = 2 + rng.below(4);
    Tensor64 probs({n, c});
    std::vector<std::size_t> labels(n);
    for (auto& l : labels) l = rng.below(c);
    for (auto& v : probs.values()) v = static_cast<double>(rng.below(8)) / 8.0;  // heavy ties
    std::vector<std::size_t> present(c, 0);
    for (auto l : labels) ++present[l];
    const bool any = std::any_of(present.begin(), present.end(), [&](std::size_t k) { return k > 0 && k < n; });
    if (!any) {
      EXPECT_THROW((void)macro_ovr_auc(probs, labels), Error);
      continue;
    }
    const auto r = macro_ovr_auc(probs, labels);
    double sum = 0;
    int used = 0;
    for (std::size_t k = 0; k < c; ++k) {
      if (present[k] == 0 || present[k] == n) {
        EXPECT_FALSE(r.per_class[k].has_value());
        continue;
      }
      std::vector<double> col(n);
      std::vector<std::uint8_t> pos(n);
      for (std::size_t i = 0; i < n; ++i) {
        col[i] = probs.at(i, k);
        pos[i] = labels[i] == k;
      }
      const double b = brute_auc(col, pos);
      EXPECT_NEAR(*r.per_class[k], b, 1e-12);
      sum += b;
      ++used;
    }
    EXPECT_NEAR(r.macro, sum / used, 1e-12);
  }
}

TEST(Auc, InvariantUnderIncreasingTransforms) {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 10 + rng.below(50);
    std::vector<double> s(n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = rng.uniform();
      y[i] = i % 3 == 0;
    }
    const double base = *binary_auc(s, y);
    for (auto f : {+[](double x) { return std::exp(3 * x); }, +[](double x) { return x * x * x - 7; },
                   +[](double x) { return std::log1p(x); }}) {
      std::vector<double> t(n);
      std::transform(s.begin(), s.end(), t.begin(), f);
      EXPECT_NEAR(*binary_auc(t, y), base, 1e-12);
    }
  }
}

TEST(Aggregate, PopulationStd) {
  const std::vector<double> v{70, 72, 74};
  const auto m = mean_std(v);
  EXPECT_DOUBLE_EQ(m.mean, 72.0);
  EXPECT_NEAR(m.std, std::sqrt(8.0 / 3.0), 1e-12);
  EXPECT_EQ(format_mean_std(m), "72.00 ± 1.63");
  EXPECT_NEAR(mean_std(v, true).std, 2.0, 1e-12);
  const auto one = mean_std(std::vector<double>{55.5});
  EXPECT_EQ(one.mean, 55.5);
  EXPECT_EQ(one.std, 0.0);
  EXPECT_THROW(mean_std(std::vector<double>{}), Error);
}

FoldReport fold_with(const std::vector<std::vector<std::size_t>>& counts) {
  FoldReport r;
  r.confusion = Confusion(counts.size());
  for (std::size_t t = 0; t < counts.size(); ++t)
    for (std::size_t p = 0; p < counts.size(); ++p) r.confusion.add(t, p, counts[t][p]);
  r.accuracy = per_class_accuracy(r.confusion);
  r.auc.macro = 0.9;
  return r;
}

TEST(Aggregate, FoldsAndUndefinedClasses) {
  const auto a = fold_with({{3, 1, 0}, {0, 2, 2}, {0, 0, 4}});
  const std::vector<FoldReport> same{a, a, a};
  const auto agg = aggregate_folds(same);
  EXPECT_DOUBLE_EQ(agg.macro.mean, a.accuracy.macro);
  EXPECT_EQ(agg.macro.std, 0.0);
  EXPECT_DOUBLE_EQ(agg.auc.mean, 0.9);

  const auto b = fold_with({{2, 0, 0}, {1, 1, 0}, {0, 0, 0}});
  const std::vector<FoldReport> mixed{a, b};
  const auto m = aggregate_folds(mixed);
  EXPECT_TRUE(m.per_class[0].defined);
  EXPECT_TRUE(m.per_class[1].defined);
  EXPECT_FALSE(m.per_class[2].defined);
  EXPECT_EQ(format_mean_std(m.per_class[2]), "n/a");
  for (const auto& v : {m.macro, m.micro}) {
    EXPECT_GE(v.std, 0.0);
  }
  EXPECT_GE(m.macro.mean, std::min(a.accuracy.macro, b.accuracy.macro));
  EXPECT_LE(m.macro.mean, std::max(a.accuracy.macro, b.accuracy.macro));
  EXPECT_THROW(aggregate_folds(std::vector<FoldReport>{}), Error);
}

}  // namespace
}  // namespace lvlm
