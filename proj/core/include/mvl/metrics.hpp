#pragma once

// Classification metrics over a confusion matrix (rows = true class, columns =
// predicted class), ranking AUC, label-free uncertainty measures and
// per-group breakdowns.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mvl {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 2) : k_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const { return k_; }
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth * k_ + predicted]; }
  std::uint64_t& at(std::size_t truth, std::size_t predicted) { return counts_[truth * k_ + predicted]; }
  std::uint64_t total() const;

  // One-vs-rest counts for class k.
  std::uint64_t tp(std::size_t k) const;
  std::uint64_t fp(std::size_t k) const;
  std::uint64_t fn(std::size_t k) const;
  std::uint64_t tn(std::size_t k) const;

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

// Throws MetricError on length mismatch or labels outside [0, K).
ConfusionMatrix confusion_matrix(std::span<const std::size_t> y_true, std::span<const std::size_t> y_pred,
                                 std::size_t classes);

// Row-wise argmax of [N x K] probabilities; ties go to the lowest index.
std::vector<std::size_t> argmax_rows(std::span<const double> probs, std::size_t classes);

// Mean over classes of the one-vs-rest accuracy (TP + TN) / total.
double average_accuracy(const ConfusionMatrix& cm);
double overall_accuracy(const ConfusionMatrix& cm);

// Multi-class Cohen's kappa (p_o - p_e) / (1 - p_e). Throws MetricError when
// p_e = 1.
double cohen_kappa(const ConfusionMatrix& cm);
// Two-class closed form 2(TP*TN - FN*FP) / ((TP+FP)(FP+TN) + (TP+FN)(FN+TN)).
double binary_kappa(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn, std::uint64_t tn);

struct F1Scores {
  std::vector<double> precision;
  std::vector<double> recall;
  std::vector<double> f1;
  double macro = 0.0;
  double positive = 0.0;  // F1 of class 1 for binary tasks
};

// 0/0 is taken as 0 for precision, recall and F1.
F1Scores f1_scores(const ConfusionMatrix& cm);

// Mann-Whitney AUC with half credit for ties. Labels are 0/1; throws
// MetricError unless both classes are present.
double auc_roc(std::span<const double> scores, std::span<const std::size_t> y_true);

struct Uncertainty {
  double max_probability = 0.0;
  double entropy = 0.0;  // normalized by ln K unless requested otherwise
};

// Batch means over [N x K] probability rows.
Uncertainty uncertainty(std::span<const double> probs, std::size_t classes, bool normalize = true);

struct MetricsReport {
  std::size_t samples = 0;
  std::size_t classes = 0;
  ConfusionMatrix confusion;
  double average_accuracy = 0.0;
  std::optional<double> kappa;  // absent when undefined
  F1Scores f1;
  std::optional<double> auc;    // binary tasks with both classes present
  Uncertainty uncertainty;
};

// Full report for [N x K] probabilities against labels.
MetricsReport evaluate(std::span<const double> probs, std::span<const std::size_t> y_true, std::size_t classes);

struct GroupReport {
  std::string group;
  MetricsReport report;
};

// One report per distinct key (sorted by key). `keys` holds one grouping key
// per sample.
std::vector<GroupReport> grouped_report(std::span<const double> probs, std::span<const std::size_t> y_true,
                                        std::size_t classes, std::span<const std::string> keys);

}  // namespace mvl
