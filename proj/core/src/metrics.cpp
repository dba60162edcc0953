#include "mvl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "mvl/errors.hpp"

namespace mvl {

std::uint64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }

std::uint64_t ConfusionMatrix::tp(std::size_t k) const { return at(k, k); }

std::uint64_t ConfusionMatrix::fp(std::size_t k) const {
  std::uint64_t s = 0;
  for (std::size_t t = 0; t < k_; ++t)
    if (t != k) s += at(t, k);
  return s;
}

std::uint64_t ConfusionMatrix::fn(std::size_t k) const {
  std::uint64_t s = 0;
  for (std::size_t p = 0; p < k_; ++p)
    if (p != k) s += at(k, p);
  return s;
}

std::uint64_t ConfusionMatrix::tn(std::size_t k) const { return total() - tp(k) - fp(k) - fn(k); }

ConfusionMatrix confusion_matrix(std::span<const std::size_t> y_true, std::span<const std::size_t> y_pred,
                                 std::size_t classes) {
  if (y_true.size() != y_pred.size()) throw MetricError("label and prediction counts differ");
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    if (y_true[i] >= classes || y_pred[i] >= classes) throw MetricError("label outside [0, K)");
    ++cm.at(y_true[i], y_pred[i]);
  }
  return cm;
}

std::vector<std::size_t> argmax_rows(std::span<const double> probs, std::size_t classes) {
  if (classes == 0 || probs.size() % classes != 0) throw MetricError("probabilities are not [N x K]");
  std::vector<std::size_t> out(probs.size() / classes);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < classes; ++k)
      if (probs[i * classes + k] > probs[i * classes + best]) best = k;
    out[i] = best;
  }
  return out;
}

double average_accuracy(const ConfusionMatrix& cm) {
  const auto n = static_cast<double>(cm.total());
  if (n == 0) throw MetricError("average accuracy of zero samples");
  double sum = 0.0;
  for (std::size_t k = 0; k < cm.classes(); ++k) sum += static_cast<double>(cm.tp(k) + cm.tn(k)) / n;
  return sum / static_cast<double>(cm.classes());
}

double overall_accuracy(const ConfusionMatrix& cm) {
  const auto n = static_cast<double>(cm.total());
  if (n == 0) throw MetricError("accuracy of zero samples");
  std::uint64_t hits = 0;
  for (std::size_t k = 0; k < cm.classes(); ++k) hits += cm.tp(k);
  return static_cast<double>(hits) / n;
}

double cohen_kappa(const ConfusionMatrix& cm) {
  const auto n = static_cast<double>(cm.total());
  if (n == 0) throw MetricError("kappa of zero samples");
  double observed = 0.0, chance = 0.0;
  for (std::size_t k = 0; k < cm.classes(); ++k) {
    observed += static_cast<double>(cm.tp(k));
    const double row = static_cast<double>(cm.tp(k) + cm.fn(k));
    const double col = static_cast<double>(cm.tp(k) + cm.fp(k));
    chance += row * col;
  }
  // Integer-exact numerator and denominator scaled by n^2.
  const double num = observed * n - chance;
  const double den = n * n - chance;
  if (den == 0.0) throw MetricError("kappa is undefined when chance agreement is 1");
  return num / den;
}

double binary_kappa(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn, std::uint64_t tn) {
  const double a = static_cast<double>(tp), b = static_cast<double>(fp), c = static_cast<double>(fn),
               d = static_cast<double>(tn);
  const double den = (a + b) * (b + d) + (a + c) * (c + d);
  if (den == 0.0) throw MetricError("kappa is undefined when chance agreement is 1");
  return 2.0 * (a * d - c * b) / den;
}

F1Scores f1_scores(const ConfusionMatrix& cm) {
  const std::size_t k = cm.classes();
  F1Scores out;
  out.precision.resize(k);
  out.recall.resize(k);
  out.f1.resize(k);
  auto ratio = [](double a, double b) { return b == 0.0 ? 0.0 : a / b; };
  for (std::size_t c = 0; c < k; ++c) {
    const double tp = static_cast<double>(cm.tp(c));
    out.precision[c] = ratio(tp, tp + static_cast<double>(cm.fp(c)));
    out.recall[c] = ratio(tp, tp + static_cast<double>(cm.fn(c)));
    out.f1[c] = ratio(2.0 * out.precision[c] * out.recall[c], out.precision[c] + out.recall[c]);
    out.macro += out.f1[c];
  }
  out.macro /= static_cast<double>(k);
  out.positive = k == 2 ? out.f1[1] : 0.0;
  return out;
}

double auc_roc(std::span<const double> scores, std::span<const std::size_t> y_true) {
  if (scores.size() != y_true.size()) throw MetricError("score and label counts differ");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Sum of midranks of the positives.
  double positive_ranks = 0.0;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t r = i; r < j; ++r) {
      const std::size_t y = y_true[order[r]];
      if (y > 1) throw MetricError("AUC requires binary labels");
      if (y == 1) {
        positive_ranks += midrank;
        ++positives;
      }
    }
    i = j;
  }
  const std::size_t negatives = scores.size() - positives;
  if (positives == 0 || negatives == 0) throw MetricError("AUC is undefined with a single class present");
  const double p = static_cast<double>(positives), q = static_cast<double>(negatives);
  return (positive_ranks - p * (p + 1.0) / 2.0) / (p * q);
}

Uncertainty uncertainty(std::span<const double> probs, std::size_t classes, bool normalize) {
  if (classes == 0 || probs.size() % classes != 0) throw MetricError("probabilities are not [N x K]");
  const std::size_t n = probs.size() / classes;
  if (n == 0) return {};
  Uncertainty u;
  const double scale = normalize && classes > 1 ? 1.0 / std::log(static_cast<double>(classes)) : 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    double peak = 0.0, h = 0.0;
    for (std::size_t k = 0; k < classes; ++k) {
      const double p = probs[i * classes + k];
      peak = std::max(peak, p);
      if (p > 0.0) h -= p * std::log(p);
    }
    u.max_probability += peak;
    u.entropy += h * scale;
  }
  u.max_probability /= static_cast<double>(n);
  u.entropy /= static_cast<double>(n);
  return u;
}

MetricsReport evaluate(std::span<const double> probs, std::span<const std::size_t> y_true, std::size_t classes) {
  const std::vector<std::size_t> pred = argmax_rows(probs, classes);
  MetricsReport r;
  r.samples = y_true.size();
  r.classes = classes;
  r.confusion = confusion_matrix(y_true, pred, classes);
  r.average_accuracy = average_accuracy(r.confusion);
  // Agreement measures need at least two true classes.
  std::size_t present = 0;
  for (std::size_t k = 0; k < classes; ++k) present += r.confusion.tp(k) + r.confusion.fn(k) > 0 ? 1 : 0;
  if (present >= 2) r.kappa = cohen_kappa(r.confusion);
  r.f1 = f1_scores(r.confusion);
  if (classes == 2 && present == 2) {
    std::vector<double> scores(y_true.size());
    for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = probs[i * 2 + 1];
    r.auc = auc_roc(scores, y_true);
  }
  r.uncertainty = uncertainty(probs, classes);
  return r;
}

std::vector<GroupReport> grouped_report(std::span<const double> probs, std::span<const std::size_t> y_true,
                                        std::size_t classes, std::span<const std::string> keys) {
  if (keys.size() != y_true.size() || probs.size() != y_true.size() * classes) {
    throw MetricError("grouping keys, labels and probabilities disagree in length");
  }
  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < keys.size(); ++i) members[keys[i]].push_back(i);
  std::vector<GroupReport> out;
  for (const auto& [key, idx] : members) {
    std::vector<double> p;
    std::vector<std::size_t> y;
    p.reserve(idx.size() * classes);
    for (std::size_t i : idx) {
      p.insert(p.end(), probs.begin() + static_cast<std::ptrdiff_t>(i * classes),
               probs.begin() + static_cast<std::ptrdiff_t>((i + 1) * classes));
      y.push_back(y_true[i]);
    }
    out.push_back({key, evaluate(p, y, classes)});
  }
  return out;
}

}  // namespace mvl
