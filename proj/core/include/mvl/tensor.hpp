#pragma once

// Dense float64 tensors with reverse-mode differentiation.
//
// A Tensor is a shared handle to a node. Operations on tensors that require
// gradients record their inputs and a backward rule on the output node; the
// graph is walked in reverse topological order by `backward`. Nodes are freed
// as soon as the last handle to the loss goes away, so a forward pass is the
// unit of graph lifetime.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mvl/rng.hpp"

namespace mvl {

using Shape = std::vector<std::size_t>;

enum class Mode { kTrain, kInfer };

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {
struct Node;
}

// Backward rule: receives the gradient flowing into the output and the
// op's inputs; accumulates into each input that requires a gradient.
using BackwardFn = std::function<void(std::span<const double> grad_out, std::span<const Tensor> inputs)>;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Writes bypass the tape; only use on leaves or for finite-difference probes.
  std::span<double> mutable_data();
  std::vector<double> to_vector() const;
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  // Empty span when no gradient has been accumulated.
  std::span<const double> grad() const;
  // Lazily zero-initialized gradient buffer; used by backward rules.
  std::span<double> grad_buffer();
  void zero_grad();

  // Copy of the values with no history.
  Tensor detach() const;

  bool is_leaf() const;
  const detail::Node* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend Tensor make_op(Shape, std::vector<double>, std::vector<Tensor>, BackwardFn);
  friend class Tape;

  std::shared_ptr<detail::Node> node_;
};

// Builds an op result. When no input requires a gradient the backward rule is
// dropped and the result is a constant.
Tensor make_op(Shape shape, std::vector<double> values, std::vector<Tensor> inputs, BackwardFn backward);

/// Ordered record of differentiable operations reachable from a root.
///
/// Records are in topological order: every record's inputs are leaves or
/// outputs of earlier records.
class Tape {
 public:
  static Tape record(const Tensor& root);

  std::size_t size() const { return records_.size(); }
  // Seeds d(root)/d(root) = 1 and sweeps the records once in reverse.
  void backward();

 private:
  Tensor root_;
  std::vector<detail::Node*> records_;
};

// Reverse sweep from a scalar loss. Gradients accumulate additively into
// every reachable tensor that requires one.
void backward(const Tensor& loss);

// ---- arithmetic ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// x [N x in] * weight [in x out] + bias [out]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// `b` may have the shape of `a` or of a trailing suffix of it, in which case
// it is broadcast over the leading axes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

enum class Activation { kSigmoid, kTanh, kRelu };
Tensor activation(const Tensor& x, Activation kind);
inline Tensor sigmoid(const Tensor& x) { return activation(x, Activation::kSigmoid); }
inline Tensor tanh(const Tensor& x) { return activation(x, Activation::kTanh); }
inline Tensor relu(const Tensor& x) { return activation(x, Activation::kRelu); }

// Max-shifted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);

// ---- structure -----------------------------------------------------------

enum class Reduction { kMean, kSum, kMax };
// Removes `axis`. kMax routes the gradient to the first argmax.
Tensor reduce(const Tensor& x, Reduction op, std::size_t axis);
Tensor sum_all(const Tensor& x);
Tensor concat(std::span<const Tensor> xs, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> xs, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
Tensor reshape(const Tensor& x, Shape shape);
// Collapses every axis into one.
Tensor flatten(const Tensor& x);
// Inserts a new leading axis of extent n and repeats x along it.
Tensor repeat_leading(const Tensor& x, std::size_t n);
// Inserts a new axis at `axis` of extent n and repeats x along it.
Tensor repeat_axis(const Tensor& x, std::size_t axis, std::size_t n);
// Sum of weights[v] * xs[v], accumulated in view order. weights[v] either
// matches xs[v] or is a suffix-broadcastable scalar tensor of shape [1].
Tensor weighted_sum(std::span<const Tensor> xs, std::span<const Tensor> weights);

// Removes `axis`, keeping position `index` along it.
Tensor select(const Tensor& x, std::size_t axis, std::size_t index);
// Inserts a new axis at `axis` holding the equally shaped inputs in order.
Tensor stack(std::span<const Tensor> xs, std::size_t axis);

// ---- layers --------------------------------------------------------------

// x [T x C_in] or [B x T x C_in]; kernels [C_out x C_in x k] with k odd;
// zero padding (k-1)/2 at both ends, stride 1. Output keeps the length T.
Tensor conv1d_same(const Tensor& x, const Tensor& kernels, const Tensor& bias);

struct BatchNormStats {
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

  BatchNormStats() = default;
  explicit BatchNormStats(std::size_t features)
      : running_mean(Tensor::zeros({features})), running_var(Tensor::full({features}, 1.0)) {}

  Tensor running_mean;
  Tensor running_var;
};

// x [N x F]. Train mode normalizes with the batch statistics (biased
// variance) and updates the running estimates with the unbiased variance;
// infer mode uses the running estimates.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats, Mode mode);

// Normalizes over the last axis, eps 1e-5.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
inline constexpr double kLayerNormEps = 1e-5;

// Inverted dropout: survivors are scaled by 1/(1-p) in train mode; identity
// in infer mode. 0 <= p < 1.
Tensor dropout(const Tensor& x, double p, Mode mode, Rng& rng);

// Fused recurrent updates. GRU: xp and hp are the input- and hidden-side
// projections [B x 3H] ordered reset, update, candidate; h is [B x H];
// returns n + z * (h - n) with n = tanh(xn + r * hn).
Tensor gru_update(const Tensor& xp, const Tensor& hp, const Tensor& h);
// LSTM with pre-activation gates [B x 4H] ordered input, forget, cell, output:
// c' = sigmoid(f) * c + sigmoid(i) * tanh(g), and h = sigmoid(o) * tanh(c').
Tensor lstm_cell_state(const Tensor& gates, const Tensor& c);
Tensor lstm_hidden(const Tensor& gates, const Tensor& c);

// q [B x H x dk], k [B x T x H x dk] -> scores [B x H x T] (unscaled dots).
Tensor attention_scores(const Tensor& query, const Tensor& keys);
// alpha [B x H x T], v [B x T x H x dv] -> [B x H x dv].
Tensor attention_combine(const Tensor& alpha, const Tensor& values);

// ---- gradient checking ----------------------------------------------------

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;  // number of probed coordinates
  bool passed = false;
};

// Compares the analytic gradient of the scalar `f()` with respect to each
// leaf against central differences with the given step. The error of one
// coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-3).
// `f` must be deterministic. Throws NumericError on a non-finite value.
GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<Tensor> leaves, double step = 1e-5,
                           double tolerance = 1e-4);

// Keeps freed activation buffers on the heap instead of returning them to the
// OS after every step. Process-wide (glibc only, no-op elsewhere); call once
// from main before training.
void tune_allocator();

}  // namespace mvl
