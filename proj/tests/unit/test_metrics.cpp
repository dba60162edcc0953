#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "mvl/errors.hpp"
#include "mvl/metrics.hpp"
#include "mvl/rng.hpp"

namespace mvl {
namespace {

// Binary matrix from one-vs-rest counts of the positive class (index 1).
ConfusionMatrix binary(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn, std::uint64_t tn) {
  ConfusionMatrix cm(2);
  cm.at(1, 1) = tp;
  cm.at(0, 1) = fp;
  cm.at(1, 0) = fn;
  cm.at(0, 0) = tn;
  return cm;
}

// Plain-arithmetic oracles written independently of the library.
double oracle_aa(const ConfusionMatrix& cm) {
  const std::size_t k = cm.classes();
  double n = 0.0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) n += static_cast<double>(cm.at(i, j));
  double sum = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    double wrong = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (j != c) wrong += static_cast<double>(cm.at(c, j) + cm.at(j, c));
    }
    sum += (n - wrong) / n;
  }
  return sum / static_cast<double>(k);
}

double oracle_kappa(const ConfusionMatrix& cm) {
  const std::size_t k = cm.classes();
  double n = 0.0, agree = 0.0;
  std::vector<double> rows(k, 0.0), cols(k, 0.0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const double v = static_cast<double>(cm.at(i, j));
      n += v;
      rows[i] += v;
      cols[j] += v;
      if (i == j) agree += v;
    }
  double chance = 0.0;
  for (std::size_t c = 0; c < k; ++c) chance += rows[c] * cols[c];
  chance /= n * n;
  return (agree / n - chance) / (1.0 - chance);
}

double oracle_macro_f1(const ConfusionMatrix& cm) {
  const std::size_t k = cm.classes();
  double sum = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    double tp = static_cast<double>(cm.at(c, c)), pred = 0.0, truth = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      pred += static_cast<double>(cm.at(j, c));
      truth += static_cast<double>(cm.at(c, j));
    }
    const double p = pred > 0 ? tp / pred : 0.0;
    const double r = truth > 0 ? tp / truth : 0.0;
    sum += p + r > 0 ? 2 * p * r / (p + r) : 0.0;
  }
  return sum / static_cast<double>(k);
}

// Counts concordant positive/negative pairs directly.
double oracle_auc(const std::vector<double>& s, const std::vector<std::size_t>& y) {
  double credit = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      pairs += 1.0;
      credit += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  return credit / pairs;
}

ConfusionMatrix random_matrix(std::size_t k, Rng& rng) {
  ConfusionMatrix cm(k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) cm.at(i, j) = rng.below(30) + (i == j ? 1u : 0u);
  return cm;
}

std::vector<double> softmax_row(const std::vector<double>& logits, double temperature) {
  std::vector<double> p(logits.size());
  const double top = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp((logits[i] - top) / temperature);
  for (double& v : p) v /= z;
  return p;
}

TEST(Confusion, CountsAgainstHandExample) {
  const std::vector<std::size_t> t = {0, 0, 1}, p = {0, 1, 1};
  const ConfusionMatrix cm = confusion_matrix(t, p, 2);
  EXPECT_EQ(cm.at(0, 0), 1u);
  EXPECT_EQ(cm.at(0, 1), 1u);
  EXPECT_EQ(cm.at(1, 0), 0u);
  EXPECT_EQ(cm.at(1, 1), 1u);
  EXPECT_EQ(cm.total(), 3u);
}

TEST(Confusion, PerfectPredictionsAreDiagonal) {
  const std::vector<std::size_t> t = {0, 2, 1, 2, 0};
  const ConfusionMatrix cm = confusion_matrix(t, t, 3);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      if (i != j) EXPECT_EQ(cm.at(i, j), 0u);
    }
  EXPECT_EQ(cm.at(2, 2), 2u);
}

TEST(Confusion, OneVsRestCountsSumToTotal) {
  Rng rng(4);
  const ConfusionMatrix cm = random_matrix(4, rng);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(cm.tp(k) + cm.fp(k) + cm.fn(k) + cm.tn(k), cm.total());
}

TEST(Confusion, ArgmaxTiesGoToLowestIndex) {
  const std::vector<double> probs = {0.5, 0.5, 0.2, 0.4, 0.4, 0.3, 0.3, 0.4};
  EXPECT_EQ(argmax_rows(std::span(probs).first(2), 2), std::vector<std::size_t>{0});
  EXPECT_EQ(argmax_rows(std::span(probs).subspan(2, 6), 3), (std::vector<std::size_t>{1, 2}));
}

TEST(Confusion, RejectsMismatchedLengthsAndLabelsOutOfRange) {
  const std::vector<std::size_t> a = {0, 1}, b = {0}, bad = {0, 2};
  EXPECT_THROW(confusion_matrix(a, b, 2), MetricError);
  EXPECT_THROW(confusion_matrix(a, bad, 2), MetricError);
}

TEST(AverageAccuracy, WorkedBinaryExample) {
  EXPECT_NEAR(average_accuracy(binary(40, 10, 5, 45)), 0.85, 1e-12);
}

TEST(AverageAccuracy, PerfectIsOne) { EXPECT_DOUBLE_EQ(average_accuracy(binary(7, 0, 0, 9)), 1.0); }

TEST(AverageAccuracy, CyclicAllWrongThreeClassIsOneThird) {
  const std::vector<std::size_t> t = {0, 1, 2, 0, 1, 2}, p = {1, 2, 0, 1, 2, 0};
  EXPECT_NEAR(average_accuracy(confusion_matrix(t, p, 3)), 1.0 / 3.0, 1e-12);
}

TEST(AverageAccuracy, MatchesOracleOnRandomMatrices) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const ConfusionMatrix cm = random_matrix(2 + trial % 5, rng);
    EXPECT_NEAR(average_accuracy(cm), oracle_aa(cm), 1e-12);
  }
}

TEST(AverageAccuracy, EqualsOverallAccuracyOnBinaryData) {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const ConfusionMatrix cm = random_matrix(2, rng);
    EXPECT_NEAR(average_accuracy(cm), overall_accuracy(cm), 1e-12);
  }
}

TEST(AverageAccuracy, ZeroSamplesIsAnError) { EXPECT_THROW(average_accuracy(ConfusionMatrix(3)), MetricError); }

TEST(Kappa, WorkedBinaryExample) {
  EXPECT_NEAR(cohen_kappa(binary(40, 10, 5, 45)), 0.70, 1e-12);
  EXPECT_NEAR(binary_kappa(40, 10, 5, 45), 0.70, 1e-12);
}

TEST(Kappa, PerfectIsOne) { EXPECT_DOUBLE_EQ(cohen_kappa(binary(3, 0, 0, 8)), 1.0); }

TEST(Kappa, MultiClassReducesToBinaryClosedFormOnExhaustiveGrid) {
  std::size_t compared = 0;
  double worst = 0.0;
  for (std::uint64_t tp = 0; tp <= 50; ++tp)
    for (std::uint64_t fp = 0; fp <= 50; ++fp)
      for (std::uint64_t fn = 0; fn <= 50; ++fn)
        for (std::uint64_t tn = 0; tn <= 50; ++tn) {
          const double den = static_cast<double>((tp + fp) * (fp + tn) + (tp + fn) * (fn + tn));
          if (den == 0.0) {
            EXPECT_THROW(binary_kappa(tp, fp, fn, tn), MetricError);
            continue;
          }
          worst = std::max(worst, std::abs(cohen_kappa(binary(tp, fp, fn, tn)) - binary_kappa(tp, fp, fn, tn)));
          ++compared;
        }
  EXPECT_LT(worst, 1e-12);
  EXPECT_GT(compared, 6'700'000u);
}

TEST(Kappa, MatchesOracleOnRandomMultiClassMatrices) {
  Rng rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    const ConfusionMatrix cm = random_matrix(2 + trial % 6, rng);
    const double k = cohen_kappa(cm);
    EXPECT_NEAR(k, oracle_kappa(cm), 1e-12);
    EXPECT_GE(k, -1.0);
    EXPECT_LE(k, 1.0);
  }
}

TEST(Kappa, IndependentPredictionsGiveNearZero) {
  Rng rng(14);
  std::vector<std::size_t> t(100000), p(100000);
  for (std::size_t i = 0; i < t.size(); ++i) {
    t[i] = i % 2;
    p[i] = rng.below(2);
  }
  EXPECT_LT(std::abs(cohen_kappa(confusion_matrix(t, p, 2))), 0.05);
}

TEST(Kappa, DegenerateSingleCellIsAnError) {
  EXPECT_THROW(cohen_kappa(binary(0, 0, 0, 12)), MetricError);
  EXPECT_THROW(cohen_kappa(ConfusionMatrix(2)), MetricError);
}

TEST(F1, WorkedBinaryExample) {
  const F1Scores f = f1_scores(binary(40, 10, 5, 45));
  EXPECT_NEAR(f.f1[1], 2 * 0.8 * (40.0 / 45.0) / (0.8 + 40.0 / 45.0), 1e-12);
  EXPECT_NEAR(f.f1[1], 0.8421, 1e-4);
  EXPECT_NEAR(f.f1[0], 0.8571, 1e-4);
  EXPECT_NEAR(f.macro, 0.8496, 1e-4);
  EXPECT_DOUBLE_EQ(f.positive, f.f1[1]);
  EXPECT_NEAR(f.precision[1], 0.8, 1e-12);
  EXPECT_NEAR(f.recall[0], 45.0 / 55.0, 1e-12);
}

TEST(F1, PerfectPredictionsScoreOne) {
  const std::vector<std::size_t> t = {0, 1, 2, 2};
  const F1Scores f = f1_scores(confusion_matrix(t, t, 3));
  for (double v : f.f1) EXPECT_DOUBLE_EQ(v, 1.0);
  EXPECT_DOUBLE_EQ(f.macro, 1.0);
}

TEST(F1, AbsentClassCountsAsZeroInTheMacro) {
  const std::vector<std::size_t> t = {0, 1, 0, 1};
  const F1Scores f = f1_scores(confusion_matrix(t, t, 3));
  EXPECT_DOUBLE_EQ(f.precision[2], 0.0);
  EXPECT_DOUBLE_EQ(f.recall[2], 0.0);
  EXPECT_DOUBLE_EQ(f.f1[2], 0.0);
  EXPECT_NEAR(f.macro, 2.0 / 3.0, 1e-15);
}

TEST(F1, MatchesOracleOnRandomMatrices) {
  Rng rng(15);
  for (int trial = 0; trial < 200; ++trial) {
    ConfusionMatrix cm = random_matrix(2 + trial % 5, rng);
    if (trial % 7 == 0) cm.at(0, 0) = 0;
    const F1Scores f = f1_scores(cm);
    EXPECT_NEAR(f.macro, oracle_macro_f1(cm), 1e-12);
    for (std::size_t k = 0; k < cm.classes(); ++k) {
      EXPECT_GE(f.precision[k], 0.0);
      EXPECT_LE(f.precision[k], 1.0);
      EXPECT_GE(f.recall[k], 0.0);
      EXPECT_LE(f.recall[k], 1.0);
    }
  }
}

TEST(Auc, WorkedExample) {
  const std::vector<double> s = {0.1, 0.4, 0.35, 0.8};
  const std::vector<std::size_t> y = {0, 0, 1, 1};
  EXPECT_NEAR(auc_roc(s, y), 0.75, 1e-12);
}

TEST(Auc, PerfectRankingAndFullTies) {
  const std::vector<std::size_t> y = {0, 1, 0, 1};
  EXPECT_DOUBLE_EQ(auc_roc(std::vector<double>{0.1, 0.9, 0.2, 0.8}, y), 1.0);
  EXPECT_DOUBLE_EQ(auc_roc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, y), 0.5);
}

TEST(Auc, MatchesPairwiseOracleWithTies) {
  Rng rng(16);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 5 + rng.below(60);
    std::vector<double> s(n);
    std::vector<std::size_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(8)) / 8.0;
      y[i] = i < 2 ? i : static_cast<std::size_t>(rng.below(2));
    }
    const double auc = auc_roc(s, y);
    EXPECT_NEAR(auc, oracle_auc(s, y), 1e-12);
    std::vector<double> inverted(n);
    std::transform(s.begin(), s.end(), inverted.begin(), [](double v) { return 1.0 - v; });
    EXPECT_NEAR(auc_roc(inverted, y), 1.0 - auc, 1e-12);
  }
}

TEST(Auc, SingleClassOrNonBinaryLabelsAreErrors) {
  const std::vector<double> s = {0.2, 0.3};
  EXPECT_THROW(auc_roc(s, std::vector<std::size_t>{1, 1}), MetricError);
  EXPECT_THROW(auc_roc(s, std::vector<std::size_t>{0, 2}), MetricError);
  EXPECT_THROW(auc_roc(s, std::vector<std::size_t>{0}), MetricError);
}

TEST(Permutation, MetricsIgnoreSampleOrder) {
  Rng rng(17);
  const std::size_t n = 200, k = 3;
  std::vector<double> probs(n * k);
  std::vector<std::size_t> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += probs[i * k + c] = rng.uniform() + 0.01;
    for (std::size_t c = 0; c < k; ++c) probs[i * k + c] /= z;
    y[i] = rng.below(k);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  shuffle(order, rng);
  std::vector<double> p2(n * k);
  std::vector<std::size_t> y2(n);
  for (std::size_t i = 0; i < n; ++i) {
    y2[i] = y[order[i]];
    for (std::size_t c = 0; c < k; ++c) p2[i * k + c] = probs[order[i] * k + c];
  }
  const MetricsReport a = evaluate(probs, y, k), b = evaluate(p2, y2, k);
  EXPECT_EQ(a.confusion, b.confusion);
  EXPECT_DOUBLE_EQ(a.average_accuracy, b.average_accuracy);
  EXPECT_DOUBLE_EQ(*a.kappa, *b.kappa);
  EXPECT_DOUBLE_EQ(a.f1.macro, b.f1.macro);
  EXPECT_NEAR(a.uncertainty.entropy, b.uncertainty.entropy, 1e-12);
}

TEST(Uncertainty, OneHotRowsAreCertain) {
  const std::vector<double> p = {1, 0, 0, 0, 0, 1, 0, 1, 0};
  const Uncertainty u = uncertainty(p, 3);
  EXPECT_DOUBLE_EQ(u.max_probability, 1.0);
  EXPECT_DOUBLE_EQ(u.entropy, 0.0);
}

TEST(Uncertainty, UniformRowsAreMaximallyUncertain) {
  for (std::size_t k : {2u, 3u, 10u}) {
    const std::vector<double> p(4 * k, 1.0 / static_cast<double>(k));
    const Uncertainty u = uncertainty(p, k);
    EXPECT_NEAR(u.max_probability, 1.0 / static_cast<double>(k), 1e-15);
    EXPECT_NEAR(u.entropy, 1.0, 1e-12);
  }
}

TEST(Uncertainty, HandBinaryRow) {
  const std::vector<double> p = {0.9, 0.1};
  const Uncertainty u = uncertainty(p, 2);
  EXPECT_DOUBLE_EQ(u.max_probability, 0.9);
  EXPECT_NEAR(u.entropy, -(0.9 * std::log(0.9) + 0.1 * std::log(0.1)) / std::log(2.0), 1e-15);
  EXPECT_NEAR(u.entropy, 0.469, 1e-3);
  EXPECT_NEAR(uncertainty(p, 2, false).entropy, -(0.9 * std::log(0.9) + 0.1 * std::log(0.1)), 1e-15);
}

TEST(Uncertainty, MonotoneInSoftmaxTemperature) {
  Rng rng(18);
  const std::vector<double> temps = {0.25, 0.5, 1.0, 2.0, 4.0, 8.0};
  for (int batch = 0; batch < 100; ++batch) {
    const std::size_t k = 2 + batch % 9, n = 16;
    std::vector<std::vector<double>> logits(n, std::vector<double>(k));
    for (auto& row : logits)
      for (double& v : row) v = 3.0 * rng.normal();
    double prev_entropy = -1.0, prev_max = 2.0;
    for (double t : temps) {
      std::vector<double> p;
      for (const auto& row : logits) {
        const auto r = softmax_row(row, t);
        p.insert(p.end(), r.begin(), r.end());
      }
      const Uncertainty u = uncertainty(p, k);
      EXPECT_GE(u.entropy, prev_entropy - 1e-12);
      EXPECT_LE(u.max_probability, prev_max + 1e-12);
      prev_entropy = u.entropy;
      prev_max = u.max_probability;
    }
  }
}

TEST(Report, BinaryReportCarriesEveryMeasure) {
  const std::vector<double> p = {0.9, 0.1, 0.6, 0.4, 0.65, 0.35, 0.2, 0.8};
  const std::vector<std::size_t> y = {0, 0, 1, 1};
  const MetricsReport r = evaluate(p, y, 2);
  EXPECT_EQ(r.samples, 4u);
  EXPECT_NEAR(*r.auc, 0.75, 1e-12);
  ASSERT_TRUE(r.kappa.has_value());
  EXPECT_NEAR(r.average_accuracy, 0.75, 1e-12);
  EXPECT_NEAR(r.uncertainty.max_probability, (0.9 + 0.6 + 0.65 + 0.8) / 4.0, 1e-12);
}

TEST(GroupedReport, SingleGroupEqualsGlobalReport) {
  const std::vector<double> p = {0.9, 0.1, 0.3, 0.7, 0.6, 0.4, 0.2, 0.8};
  const std::vector<std::size_t> y = {0, 1, 1, 0};
  const std::vector<std::string> keys(4, "all");
  const auto groups = grouped_report(p, y, 2, keys);
  ASSERT_EQ(groups.size(), 1u);
  const MetricsReport g = evaluate(p, y, 2);
  EXPECT_EQ(groups[0].report.confusion, g.confusion);
  EXPECT_DOUBLE_EQ(*groups[0].report.kappa, *g.kappa);
  EXPECT_DOUBLE_EQ(*groups[0].report.auc, *g.auc);
}

TEST(GroupedReport, IdenticalGroupsGiveIdenticalReports) {
  const std::vector<double> p = {0.9, 0.1, 0.3, 0.7, 0.6, 0.4, 0.9, 0.1, 0.3, 0.7, 0.6, 0.4};
  const std::vector<std::size_t> y = {0, 1, 1, 0, 1, 1};
  const std::vector<std::string> keys = {"a", "a", "a", "b", "b", "b"};
  const auto groups = grouped_report(p, y, 2, keys);
  ASSERT_EQ(groups.size(), 2u);
  EXPECT_EQ(groups[0].report.confusion, groups[1].report.confusion);
  EXPECT_DOUBLE_EQ(groups[0].report.f1.macro, groups[1].report.f1.macro);
}

TEST(GroupedReport, PerYearPartitionMatchesSubsetRecomputation) {
  Rng rng(19);
  const std::size_t n = 300;
  std::vector<double> p(n * 2);
  std::vector<std::size_t> y(n);
  std::vector<std::string> years(n);
  for (std::size_t i = 0; i < n; ++i) {
    p[i * 2 + 1] = rng.uniform();
    p[i * 2] = 1.0 - p[i * 2 + 1];
    y[i] = rng.below(2);
    years[i] = std::to_string(2019 + rng.below(3));
  }
  const auto groups = grouped_report(p, y, 2, years);
  ASSERT_EQ(groups.size(), 3u);
  for (const GroupReport& g : groups) {
    std::vector<double> sp;
    std::vector<std::size_t> sy;
    for (std::size_t i = 0; i < n; ++i) {
      if (years[i] != g.group) continue;
      sp.push_back(p[i * 2]);
      sp.push_back(p[i * 2 + 1]);
      sy.push_back(y[i]);
    }
    const MetricsReport want = evaluate(sp, sy, 2);
    EXPECT_EQ(g.report.samples, sy.size());
    EXPECT_EQ(g.report.confusion, want.confusion);
    EXPECT_DOUBLE_EQ(*g.report.kappa, *want.kappa);
    EXPECT_DOUBLE_EQ(*g.report.auc, *want.auc);
  }
}

TEST(GroupedReport, SingleClassGroupsMarkAgreementMeasuresUnavailable) {
  const std::vector<double> p = {0.9, 0.1, 0.4, 0.6, 0.3, 0.7, 0.8, 0.2};
  const std::vector<std::size_t> y = {0, 0, 1, 0};
  const std::vector<std::string> keys = {"only0", "only0", "mixed", "mixed"};
  const auto groups = grouped_report(p, y, 2, keys);
  const GroupReport& single = groups[1].group == "only0" ? groups[1] : groups[0];
  EXPECT_FALSE(single.report.kappa.has_value());
  EXPECT_FALSE(single.report.auc.has_value());
  EXPECT_NEAR(single.report.average_accuracy, 0.5, 1e-12);
  EXPECT_THROW(grouped_report(p, y, 2, std::vector<std::string>{"a"}), MetricError);
}

}  // namespace
}  // namespace mvl
