#include "mvl/tensor.hpp"

#include <Eigen/Core>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "mvl/errors.hpp"

namespace mvl {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<Tensor> inputs;
  BackwardFn backward;
};

}  // namespace detail

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(std::span<const double> data, std::size_t rows, std::size_t cols) {
  return ConstMap(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MutMap as_matrix(std::span<double> data, std::size_t rows, std::size_t cols) {
  return MutMap(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

// Column sums in a fixed row order. Eigen's vectorized colwise reduction picks
// its path by pointer alignment, which breaks bitwise reproducibility.
void add_column_sums(std::span<const double> g, std::size_t rows, std::size_t cols, std::span<double> out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = g.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) out[c] += row[c];
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Number of leading repetitions when `b` broadcasts as a suffix of `a`.
std::size_t suffix_broadcast(const Shape& a, const Shape& b, const char* op) {
  if (b.size() > a.size() || !std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()))) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
  }
  return shape_numel(a) / std::max<std::size_t>(shape_numel(b), 1);
}

void check_finite(std::span<const double> values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// ---- Tensor --------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not hold " + std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->value.size(); }
std::span<const double> Tensor::data() const { return node_->value; }
std::span<double> Tensor::mutable_data() { return node_->value; }
std::vector<double> Tensor::to_vector() const { return node_->value; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ShapeError("index rank mismatch for " + shape_str(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= node_->shape[axis]) throw ShapeError("index out of range for " + shape_str(shape()));
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->value[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool value) { node_->requires_grad = value; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }

std::span<double> Tensor::grad_buffer() {
  if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

bool Tensor::is_leaf() const { return !node_->backward; }

Tensor make_op(Shape shape, std::vector<double> values, std::vector<Tensor> inputs, BackwardFn backward) {
  check_finite(values, "tensor op");
  Tensor out = Tensor::from(std::move(shape), std::move(values), false);
  const bool needs_grad = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (needs_grad) {
    out.node_->requires_grad = true;
    out.node_->inputs = std::move(inputs);
    out.node_->backward = std::move(backward);
  }
  return out;
}

// ---- Tape ----------------------------------------------------------------

Tape Tape::record(const Tensor& root) {
  Tape tape;
  tape.root_ = root;
  std::unordered_set<const detail::Node*> visited;
  // Iterative post-order DFS: a node is emitted after all of its inputs.
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  if (root.node_->backward) stack.emplace_back(root.node_.get(), 0);
  visited.insert(root.node_.get());
  while (!stack.empty()) {
    auto& [node, next_input] = stack.back();
    if (next_input < node->inputs.size()) {
      detail::Node* child = node->inputs[next_input++].node_.get();
      if (child->backward && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    tape.records_.push_back(node);
    stack.pop_back();
  }
  return tape;
}

void Tape::backward() {
  if (root_.numel() != 1) {
    throw ContractError("backward requires a scalar root, got shape " + shape_str(root_.shape()));
  }
  if (!root_.requires_grad()) return;
  root_.grad_buffer()[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    detail::Node* node = *it;
    if (node->grad.empty()) node->grad.assign(node->value.size(), 0.0);
    node->backward(node->grad, node->inputs);
  }
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss");
  }
  Tape::record(loss).backward();
}

// ---- arithmetic ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  as_matrix(std::span<double>(out), m, n).noalias() = as_matrix(a.data(), m, k) * as_matrix(b.data(), k, n);
  return make_op({m, n}, std::move(out), {a, b}, [m, k, n](std::span<const double> g, std::span<const Tensor> in) {
    Tensor x = in[0], y = in[1];
    auto go = as_matrix(g, m, n);
    if (x.requires_grad()) as_matrix(x.grad_buffer(), m, k).noalias() += go * as_matrix(y.data(), k, n).transpose();
    if (y.requires_grad()) as_matrix(y.grad_buffer(), k, n).noalias() += as_matrix(x.data(), m, k).transpose() * go;
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(0) || bias.numel() != weight.dim(1)) {
    throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) + ", " + shape_str(weight.shape()) + ", " +
                     shape_str(bias.shape()));
  }
  const std::size_t m = x.dim(0), k = x.dim(1), n = weight.dim(1);
  std::vector<double> out(m * n);
  auto om = as_matrix(std::span<double>(out), m, n);
  om.noalias() = as_matrix(x.data(), m, k) * as_matrix(weight.data(), k, n);
  om.rowwise() += as_matrix(bias.data(), 1, n).row(0);
  return make_op({m, n}, std::move(out), {x, weight, bias},
                 [m, k, n](std::span<const double> g, std::span<const Tensor> in) {
                   Tensor xi = in[0], w = in[1], b = in[2];
                   auto go = as_matrix(g, m, n);
                   if (xi.requires_grad())
                     as_matrix(xi.grad_buffer(), m, k).noalias() += go * as_matrix(w.data(), k, n).transpose();
                   if (w.requires_grad())
                     as_matrix(w.grad_buffer(), k, n).noalias() += as_matrix(xi.data(), m, k).transpose() * go;
                   if (b.requires_grad()) add_column_sums(g, m, n, b.grad_buffer());
                 });
}

Tensor add(const Tensor& a, const Tensor& b) {
  const std::size_t reps = suffix_broadcast(a.shape(), b.shape(), "add");
  const std::size_t inner = b.numel();
  std::vector<double> out(a.numel());
  auto av = a.data(), bv = b.data();
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t j = 0; j < inner; ++j) out[r * inner + j] = av[r * inner + j] + bv[j];
  return make_op(a.shape(), std::move(out), {a, b}, [reps, inner](std::span<const double> g, std::span<const Tensor> in) {
    Tensor x = in[0], y = in[1];
    if (x.requires_grad()) {
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    }
    if (y.requires_grad()) {
      auto gy = y.grad_buffer();
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < inner; ++j) gy[j] += g[r * inner + j];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  const std::size_t reps = suffix_broadcast(a.shape(), b.shape(), "mul");
  const std::size_t inner = b.numel();
  std::vector<double> out(a.numel());
  auto av = a.data(), bv = b.data();
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t j = 0; j < inner; ++j) out[r * inner + j] = av[r * inner + j] * bv[j];
  return make_op(a.shape(), std::move(out), {a, b}, [reps, inner](std::span<const double> g, std::span<const Tensor> in) {
    Tensor x = in[0], y = in[1];
    auto xv = x.data(), yv = y.data();
    if (x.requires_grad()) {
      auto gx = x.grad_buffer();
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < inner; ++j) gx[r * inner + j] += g[r * inner + j] * yv[j];
    }
    if (y.requires_grad()) {
      auto gy = y.grad_buffer();
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < inner; ++j) gy[j] += g[r * inner + j] * xv[r * inner + j];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  return make_op(a.shape(), std::move(out), {a}, [factor](std::span<const double> g, std::span<const Tensor> in) {
    Tensor x = in[0];
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * factor;
  });
}

Tensor add_scalar(const Tensor& a, double value) {
  std::vector<double> out(a.numel());
  auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + value;
  return make_op(a.shape(), std::move(out), {a}, [](std::span<const double> g, std::span<const Tensor> in) {
    Tensor x = in[0];
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
  });
}

Tensor activation(const Tensor& x, Activation kind) {
  std::vector<double> out(x.numel());
  auto xv = x.data();
  switch (kind) {
    case Activation::kSigmoid:
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = xv[i];
        if (v >= 0) {
          out[i] = 1.0 / (1.0 + std::exp(-v));
        } else {
          const double e = std::exp(v);
          out[i] = e / (1.0 + e);
        }
      }
      break;
    case Activation::kTanh:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
      break;
    case Activation::kRelu:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0 ? xv[i] : 0.0;
      break;
  }
  // The rule reads the op's own output, so it is captured by value.
  std::vector<double> y = out;
  return make_op(x.shape(), std::move(out), {x},
                 [kind, y = std::move(y)](std::span<const double> g, std::span<const Tensor> in) {
                   Tensor xi = in[0];
                   auto gx = xi.grad_buffer();
                   switch (kind) {
                     case Activation::kSigmoid:
                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
                       break;
                     case Activation::kTanh:
                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
                       break;
                     case Activation::kRelu:
                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += y[i] > 0 ? g[i] : 0.0;
                       break;
                   }
                 });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_at(x.shape(), axis);
  std::vector<double> out(x.numel());
  auto xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double mx = xv[base];
      for (std::size_t a = 1; a < s.extent; ++a) mx = std::max(mx, xv[base + a * s.inner]);
      double sum = 0.0;
      for (std::size_t a = 0; a < s.extent; ++a) {
        const double e = std::exp(xv[base + a * s.inner] - mx);
        out[base + a * s.inner] = e;
        sum += e;
      }
      for (std::size_t a = 0; a < s.extent; ++a) out[base + a * s.inner] /= sum;
    }
  }
  std::vector<double> y = out;
  return make_op(x.shape(), std::move(out), {x}, [s, y = std::move(y)](std::span<const double> g, std::span<const Tensor> in) {
    Tensor xi = in[0];
    auto gx = xi.grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        double dot = 0.0;
        for (std::size_t a = 0; a < s.extent; ++a) dot += g[base + a * s.inner] * y[base + a * s.inner];
        for (std::size_t a = 0; a < s.extent; ++a) {
          const std::size_t idx = base + a * s.inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

// ---- structure -----------------------------------------------------------

Tensor reduce(const Tensor& x, Reduction op, std::size_t axis) {
  const AxisSplit s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> out(s.outer * s.inner);
  std::vector<std::size_t> argmax;
  if (op == Reduction::kMax) argmax.resize(out.size());
  auto xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      const std::size_t oi = o * s.inner + i;
      if (op == Reduction::kMax) {
        std::size_t best = 0;
        for (std::size_t a = 1; a < s.extent; ++a)
          if (xv[base + a * s.inner] > xv[base + best * s.inner]) best = a;
        argmax[oi] = best;
        out[oi] = xv[base + best * s.inner];
      } else {
        double acc = 0.0;
        for (std::size_t a = 0; a < s.extent; ++a) acc += xv[base + a * s.inner];
        out[oi] = op == Reduction::kMean ? acc / static_cast<double>(s.extent) : acc;
      }
    }
  }
  return make_op(std::move(out_shape), std::move(out), {x},
                 [s, op, argmax = std::move(argmax)](std::span<const double> g, std::span<const Tensor> in) {
                   Tensor xi = in[0];
                   auto gx = xi.grad_buffer();
                   const double w = op == Reduction::kMean ? 1.0 / static_cast<double>(s.extent) : 1.0;
                   for (std::size_t o = 0; o < s.outer; ++o) {
                     for (std::size_t i = 0; i < s.inner; ++i) {
                       const std::size_t base = o * s.extent * s.inner + i;
                       const std::size_t oi = o * s.inner + i;
                       if (op == Reduction::kMax) {
                         gx[base + argmax[oi] * s.inner] += g[oi];
                       } else {
                         for (std::size_t a = 0; a < s.extent; ++a) gx[base + a * s.inner] += g[oi] * w;
                       }
                     }
                   }
                 });
}

Tensor sum_all(const Tensor& x) { return reduce(reshape(x, {x.numel()}), Reduction::kSum, 0); }

Tensor concat(std::span<const Tensor> xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  const Shape& ref = xs[0].shape();
  if (axis >= ref.size()) throw ShapeError("concat axis out of range for " + shape_str(ref));
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const Tensor& t : xs) {
    const Shape& sh = t.shape();
    bool ok = sh.size() == ref.size();
    for (std::size_t i = 0; ok && i < sh.size(); ++i)
      if (i != axis && sh[i] != ref[i]) ok = false;
    if (!ok) throw ShapeError("concat: ragged inputs " + shape_str(ref) + " vs " + shape_str(sh));
    extents.push_back(sh[axis]);
    total += sh[axis];
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  const AxisSplit s = split_at(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t v = 0; v < xs.size(); ++v) {
    auto xv = xs[v].data();
    const std::size_t block = extents[v] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(o * block), block,
                  out.begin() + static_cast<std::ptrdiff_t>(o * total * s.inner + offset * s.inner));
    offset += extents[v];
  }
  std::vector<Tensor> inputs(xs.begin(), xs.end());
  return make_op(std::move(out_shape), std::move(out), std::move(inputs),
                 [s, total, extents](std::span<const double> g, std::span<const Tensor> in) {
                   std::size_t offset = 0;
                   for (std::size_t v = 0; v < in.size(); ++v) {
                     Tensor t = in[v];
                     const std::size_t block = extents[v] * s.inner;
                     if (t.requires_grad()) {
                       auto gt = t.grad_buffer();
                       for (std::size_t o = 0; o < s.outer; ++o)
                         for (std::size_t j = 0; j < block; ++j)
                           gt[o * block + j] += g[o * total * s.inner + offset * s.inner + j];
                     }
                     offset += extents[v];
                   }
                 });
}

Tensor concat(std::initializer_list<Tensor> xs, std::size_t axis) {
  return concat(std::span<const Tensor>(xs.begin(), xs.size()), axis);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisSplit s = split_at(x.shape(), axis);
  if (length == 0 || start + length > s.extent) {
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(length) + ") out of range on axis " +
                     std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<double> out(s.outer * length * s.inner);
  auto xv = x.data();
  const std::size_t block = length * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(o * s.extent * s.inner + start * s.inner), block,
                out.begin() + static_cast<std::ptrdiff_t>(o * block));
  return make_op(std::move(out_shape), std::move(out), {x},
                 [s, start, block](std::span<const double> g, std::span<const Tensor> in) {
                   Tensor xi = in[0];
                   auto gx = xi.grad_buffer();
                   for (std::size_t o = 0; o < s.outer; ++o)
                     for (std::size_t j = 0; j < block; ++j) gx[o * s.extent * s.inner + start * s.inner + j] += g[o * block + j];
                 });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes the element count");
  }
  return make_op(std::move(shape), x.to_vector(), {x}, [](std::span<const double> g, std::span<const Tensor> in) {
    Tensor xi = in[0];
    auto gx = xi.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
  });
}

Tensor flatten(const Tensor& x) { return reshape(x, {x.numel()}); }

Tensor repeat_axis(const Tensor& x, std::size_t axis, std::size_t n) {
  if (axis > x.rank()) throw ShapeError("repeat axis out of range for " + shape_str(x.shape()));
  if (n == 0) throw ShapeError("repeat count must be positive");
  Shape out_shape = x.shape();
  out_shape.insert(out_shape.begin() + static_cast<std::ptrdiff_t>(axis), n);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (std::size_t i = axis; i < x.rank(); ++i) inner *= x.shape()[i];
  std::vector<double> out(outer * n * inner);
  auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t r = 0; r < n; ++r)
      std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(o * inner), inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * n + r) * inner));
  return make_op(std::move(out_shape), std::move(out), {x}, [outer, n, inner](std::span<const double> g, std::span<const Tensor> in) {
    Tensor xi = in[0];
    auto gx = xi.grad_buffer();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < inner; ++j) gx[o * inner + j] += g[(o * n + r) * inner + j];
  });
}

Tensor repeat_leading(const Tensor& x, std::size_t n) { return repeat_axis(x, 0, n); }

Tensor weighted_sum(std::span<const Tensor> xs, std::span<const Tensor> weights) {
  if (xs.empty() || xs.size() != weights.size()) throw ShapeError("weighted_sum: need one weight per input");
  const Shape& ref = xs[0].shape();
  for (std::size_t v = 0; v < xs.size(); ++v) {
    if (xs[v].shape() != ref) throw ShapeError("weighted_sum: input shapes differ");
    if (weights[v].shape() != ref && weights[v].numel() != 1) throw ShapeError("weighted_sum: weight shape mismatch");
  }
  const std::size_t n = xs[0].numel();
  std::vector<double> out(n, 0.0);
  for (std::size_t v = 0; v < xs.size(); ++v) {
    auto xv = xs[v].data();
    auto wv = weights[v].data();
    const bool scalar = wv.size() == 1 && n != 1;
    if (v == 0) {
      for (std::size_t i = 0; i < n; ++i) out[i] = (scalar ? wv[0] : wv[i]) * xv[i];
    } else {
      for (std::size_t i = 0; i < n; ++i) out[i] = out[i] + (scalar ? wv[0] : wv[i]) * xv[i];
    }
  }
  std::vector<Tensor> inputs(xs.begin(), xs.end());
  inputs.insert(inputs.end(), weights.begin(), weights.end());
  const std::size_t views = xs.size();
  return make_op(ref, std::move(out), std::move(inputs), [views, n](std::span<const double> g, std::span<const Tensor> in) {
    for (std::size_t v = 0; v < views; ++v) {
      Tensor x = in[v], w = in[views + v];
      auto xv = x.data();
      auto wv = w.data();
      const bool scalar = wv.size() == 1 && n != 1;
      if (x.requires_grad()) {
        auto gx = x.grad_buffer();
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * (scalar ? wv[0] : wv[i]);
      }
      if (w.requires_grad()) {
        auto gw = w.grad_buffer();
        for (std::size_t i = 0; i < n; ++i) gw[scalar ? 0 : i] += g[i] * xv[i];
      }
    }
  });
}

// ---- layers --------------------------------------------------------------

Tensor conv1d_same(const Tensor& x, const Tensor& kernels, const Tensor& bias) {
  if (kernels.rank() != 3) throw ShapeError("conv1d kernels must be [C_out x C_in x k]");
  const std::size_t c_out = kernels.dim(0), c_in = kernels.dim(1), k = kernels.dim(2);
  if (k % 2 == 0) throw ConfigError("conv1d_same requires an odd kernel size, got " + std::to_string(k));
  const bool batched = x.rank() == 3;
  if (!(x.rank() == 2 || batched) || x.shape().back() != c_in || bias.numel() != c_out) {
    throw ShapeError("conv1d_same: input " + shape_str(x.shape()) + " incompatible with kernels " +
                     shape_str(kernels.shape()));
  }
  const std::size_t batch = batched ? x.dim(0) : 1;
  const std::size_t steps = batched ? x.dim(1) : x.dim(0);
  const std::size_t pad = (k - 1) / 2;
  const std::size_t rows = batch * steps, width = c_in * k;

  // im2col: cols[b*T + t][c*k + j] = x[b][t + j - pad][c]
  std::vector<double> cols(rows * width, 0.0);
  auto xv = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < steps; ++t)
      for (std::size_t j = 0; j < k; ++j) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(pad);
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(steps)) continue;
        const double* in_row = xv.data() + (b * steps + static_cast<std::size_t>(src)) * c_in;
        double* col_row = cols.data() + (b * steps + t) * width;
        for (std::size_t c = 0; c < c_in; ++c) col_row[c * k + j] = in_row[c];
      }

  std::vector<double> out(rows * c_out);
  auto om = as_matrix(std::span<double>(out), rows, c_out);
  om.noalias() = as_matrix(std::span<const double>(cols), rows, width) * as_matrix(kernels.data(), c_out, width).transpose();
  om.rowwise() += as_matrix(bias.data(), 1, c_out).row(0);

  Shape out_shape = batched ? Shape{batch, steps, c_out} : Shape{steps, c_out};
  return make_op(std::move(out_shape), std::move(out), {x, kernels, bias},
                 [=, cols = std::move(cols)](std::span<const double> g, std::span<const Tensor> in) {
                   Tensor xi = in[0], kern = in[1], b = in[2];
                   auto go = as_matrix(g, rows, c_out);
                   if (kern.requires_grad())
                     as_matrix(kern.grad_buffer(), c_out, width).noalias() +=
                         go.transpose() * as_matrix(std::span<const double>(cols), rows, width);
                   if (b.requires_grad()) add_column_sums(g, rows, c_out, b.grad_buffer());
                   if (xi.requires_grad()) {
                     RowMat gcols = go * as_matrix(kern.data(), c_out, width);
                     auto gx = xi.grad_buffer();
                     for (std::size_t bb = 0; bb < batch; ++bb)
                       for (std::size_t t = 0; t < steps; ++t)
                         for (std::size_t j = 0; j < k; ++j) {
                           const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(pad);
                           if (src < 0 || src >= static_cast<std::ptrdiff_t>(steps)) continue;
                           double* gx_row = gx.data() + (bb * steps + static_cast<std::size_t>(src)) * c_in;
                           const double* gc_row = gcols.data() + (bb * steps + t) * width;
                           for (std::size_t c = 0; c < c_in; ++c) gx_row[c] += gc_row[c * k + j];
                         }
                   }
                 });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats, Mode mode) {
  if (x.rank() != 2) throw ShapeError("batch_norm expects [N x F], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), f = x.dim(1);
  if (gamma.numel() != f || beta.numel() != f || stats.running_mean.numel() != f) {
    throw ShapeError("batch_norm: feature count mismatch for " + shape_str(x.shape()));
  }
  auto xv = x.data();
  std::vector<double> mean(f, 0.0), inv_std(f, 0.0);
  if (mode == Mode::kTrain) {
    if (n < 2) throw DataError("batch_norm in train mode needs at least 2 samples, got " + std::to_string(n));
    std::vector<double> var(f, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < f; ++j) mean[j] += xv[i * f + j];
    for (std::size_t j = 0; j < f; ++j) mean[j] /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < f; ++j) {
        const double d = xv[i * f + j] - mean[j];
        var[j] += d * d;
      }
    auto rm = stats.running_mean.mutable_data();
    auto rv = stats.running_var.mutable_data();
    for (std::size_t j = 0; j < f; ++j) {
      const double biased = var[j] / static_cast<double>(n);
      inv_std[j] = 1.0 / std::sqrt(biased + BatchNormStats::kEps);
      rm[j] = (1.0 - BatchNormStats::kMomentum) * rm[j] + BatchNormStats::kMomentum * mean[j];
      rv[j] = (1.0 - BatchNormStats::kMomentum) * rv[j] +
              BatchNormStats::kMomentum * var[j] / static_cast<double>(n - 1);
    }
  } else {
    auto rm = stats.running_mean.data();
    auto rv = stats.running_var.data();
    for (std::size_t j = 0; j < f; ++j) {
      mean[j] = rm[j];
      inv_std[j] = 1.0 / std::sqrt(rv[j] + BatchNormStats::kEps);
    }
  }
  std::vector<double> xhat(n * f), out(n * f);
  auto gv = gamma.data(), bv = beta.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) {
      const double h = (xv[i * f + j] - mean[j]) * inv_std[j];
      xhat[i * f + j] = h;
      out[i * f + j] = gv[j] * h + bv[j];
    }
  const bool train = mode == Mode::kTrain;
  return make_op(x.shape(), std::move(out), {x, gamma, beta},
                 [n, f, train, inv_std = std::move(inv_std), xhat = std::move(xhat)](std::span<const double> g,
                                                                                     std::span<const Tensor> in) {
                   Tensor xi = in[0], gam = in[1], bet = in[2];
                   std::vector<double> sum_g(f, 0.0), sum_gh(f, 0.0);
                   for (std::size_t i = 0; i < n; ++i)
                     for (std::size_t j = 0; j < f; ++j) {
                       sum_g[j] += g[i * f + j];
                       sum_gh[j] += g[i * f + j] * xhat[i * f + j];
                     }
                   if (gam.requires_grad()) {
                     auto gg = gam.grad_buffer();
                     for (std::size_t j = 0; j < f; ++j) gg[j] += sum_gh[j];
                   }
                   if (bet.requires_grad()) {
                     auto gb = bet.grad_buffer();
                     for (std::size_t j = 0; j < f; ++j) gb[j] += sum_g[j];
                   }
                   if (xi.requires_grad()) {
                     auto gx = xi.grad_buffer();
                     auto gmv = gam.data();
                     const double inv_n = 1.0 / static_cast<double>(n);
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t j = 0; j < f; ++j) {
                         const std::size_t idx = i * f + j;
                         if (train) {
                           gx[idx] += gmv[j] * inv_std[j] * (g[idx] - inv_n * sum_g[j] - xhat[idx] * inv_n * sum_gh[j]);
                         } else {
                           gx[idx] += gmv[j] * inv_std[j] * g[idx];
                         }
                       }
                   }
                 });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  if (x.rank() < 1) throw ShapeError("layer_norm on rank-0 tensor");
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d) throw ShapeError("layer_norm: gain/bias width mismatch");
  const std::size_t rows = x.numel() / d;
  auto xv = x.data();
  auto gv = gain.data(), bv = bias.data();
  std::vector<double> xhat(x.numel()), out(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * inv_std[r];
      xhat[r * d + j] = h;
      out[r * d + j] = gv[j] * h + bv[j];
    }
  }
  return make_op(x.shape(), std::move(out), {x, gain, bias},
                 [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](std::span<const double> g,
                                                                                 std::span<const Tensor> in) {
                   Tensor xi = in[0], gn = in[1], bi = in[2];
                   if (gn.requires_grad()) {
                     auto gg = gn.grad_buffer();
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
                   }
                   if (bi.requires_grad()) {
                     auto gb = bi.grad_buffer();
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
                   }
                   if (xi.requires_grad()) {
                     auto gx = xi.grad_buffer();
                     auto gnv = gn.data();
                     const double inv_d = 1.0 / static_cast<double>(d);
                     for (std::size_t r = 0; r < rows; ++r) {
                       double mean_gh = 0.0, mean_ghx = 0.0;
                       for (std::size_t j = 0; j < d; ++j) {
                         const double gh = g[r * d + j] * gnv[j];
                         mean_gh += gh;
                         mean_ghx += gh * xhat[r * d + j];
                       }
                       mean_gh *= inv_d;
                       mean_ghx *= inv_d;
                       for (std::size_t j = 0; j < d; ++j) {
                         const double gh = g[r * d + j] * gnv[j];
                         gx[r * d + j] += inv_std[r] * (gh - mean_gh - xhat[r * d + j] * mean_ghx);
                       }
                     }
                   }
                 });
}

Tensor dropout(const Tensor& x, double p, Mode mode, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must lie in [0, 1), got " + std::to_string(p));
  if (mode == Mode::kInfer || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = rng.uniform() < p ? 0.0 : keep_scale;
  std::vector<double> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  return make_op(x.shape(), std::move(out), {x}, [mask = std::move(mask)](std::span<const double> g, std::span<const Tensor> in) {
    Tensor xi = in[0];
    auto gx = xi.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * mask[i];
  });
}

Tensor attention_scores(const Tensor& query, const Tensor& keys) {
  if (query.rank() != 3 || keys.rank() != 4 || query.dim(0) != keys.dim(0) || query.dim(1) != keys.dim(2) ||
      query.dim(2) != keys.dim(3)) {
    throw ShapeError("attention_scores: query " + shape_str(query.shape()) + " vs keys " + shape_str(keys.shape()));
  }
  const std::size_t batch = keys.dim(0), steps = keys.dim(1), heads = keys.dim(2), dk = keys.dim(3);
  std::vector<double> out(batch * heads * steps);
  auto qv = query.data(), kv = keys.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < steps; ++t) {
        const double* q = qv.data() + (b * heads + h) * dk;
        const double* kk = kv.data() + ((b * steps + t) * heads + h) * dk;
        double dot = 0.0;
        for (std::size_t d = 0; d < dk; ++d) dot += q[d] * kk[d];
        out[(b * heads + h) * steps + t] = dot;
      }
  return make_op({batch, heads, steps}, std::move(out), {query, keys},
                 [=](std::span<const double> g, std::span<const Tensor> in) {
                   Tensor q = in[0], kt = in[1];
                   auto qd = q.data(), kd = kt.data();
                   std::span<double> gq, gk;
                   if (q.requires_grad()) gq = q.grad_buffer();
                   if (kt.requires_grad()) gk = kt.grad_buffer();
                   for (std::size_t b = 0; b < batch; ++b)
                     for (std::size_t h = 0; h < heads; ++h)
                       for (std::size_t t = 0; t < steps; ++t) {
                         const double go = g[(b * heads + h) * steps + t];
                         const std::size_t qo = (b * heads + h) * dk;
                         const std::size_t ko = ((b * steps + t) * heads + h) * dk;
                         for (std::size_t d = 0; d < dk; ++d) {
                           if (!gq.empty()) gq[qo + d] += go * kd[ko + d];
                           if (!gk.empty()) gk[ko + d] += go * qd[qo + d];
                         }
                       }
                 });
}

Tensor attention_combine(const Tensor& alpha, const Tensor& values) {
  if (alpha.rank() != 3 || values.rank() != 4 || alpha.dim(0) != values.dim(0) || alpha.dim(1) != values.dim(2) ||
      alpha.dim(2) != values.dim(1)) {
    throw ShapeError("attention_combine: weights " + shape_str(alpha.shape()) + " vs values " +
                     shape_str(values.shape()));
  }
  const std::size_t batch = values.dim(0), steps = values.dim(1), heads = values.dim(2), dv = values.dim(3);
  std::vector<double> out(batch * heads * dv, 0.0);
  auto av = alpha.data(), vv = values.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      double* z = out.data() + (b * heads + h) * dv;
      for (std::size_t t = 0; t < steps; ++t) {
        const double a = av[(b * heads + h) * steps + t];
        const double* v = vv.data() + ((b * steps + t) * heads + h) * dv;
        for (std::size_t d = 0; d < dv; ++d) z[d] += a * v[d];
      }
    }
  return make_op({batch, heads, dv}, std::move(out), {alpha, values},
                 [=](std::span<const double> g, std::span<const Tensor> in) {
                   Tensor al = in[0], va = in[1];
                   auto ad = al.data(), vd = va.data();
                   std::span<double> ga, gv;
                   if (al.requires_grad()) ga = al.grad_buffer();
                   if (va.requires_grad()) gv = va.grad_buffer();
                   for (std::size_t b = 0; b < batch; ++b)
                     for (std::size_t h = 0; h < heads; ++h)
                       for (std::size_t t = 0; t < steps; ++t) {
                         const std::size_t ai = (b * heads + h) * steps + t;
                         const std::size_t vo = ((b * steps + t) * heads + h) * dv;
                         const std::size_t go = (b * heads + h) * dv;
                         double acc = 0.0;
                         for (std::size_t d = 0; d < dv; ++d) {
                           acc += g[go + d] * vd[vo + d];
                           if (!gv.empty()) gv[vo + d] += ad[ai] * g[go + d];
                         }
                         if (!ga.empty()) ga[ai] += acc;
                       }
                 });
}


// ---- fused recurrent cells -------------------------------------------------

namespace {

double logistic(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

void check_gates(const Tensor& gates, std::size_t count, const Tensor& state, const char* op) {
  if (gates.rank() != 2 || state.rank() != 2 || gates.dim(0) != state.dim(0) || gates.dim(1) != count * state.dim(1)) {
    throw ShapeError(std::string(op) + ": gates " + shape_str(gates.shape()) + " do not match state " +
                     shape_str(state.shape()));
  }
}

}  // namespace

Tensor gru_update(const Tensor& xp, const Tensor& hp, const Tensor& h) {
  check_gates(xp, 3, h, "gru_update");
  if (hp.shape() != xp.shape()) throw ShapeError("gru_update: projection shapes differ");
  const std::size_t rows = h.dim(0), hidden = h.dim(1), width = 3 * hidden;
  auto xv = xp.data(), hv = hp.data(), sv = h.data();
  std::vector<double> out(rows * hidden);
  std::vector<double> cache(rows * width);  // r, z, n per row
  for (std::size_t b = 0; b < rows; ++b) {
    const double* x = xv.data() + b * width;
    const double* q = hv.data() + b * width;
    double* c = cache.data() + b * width;
    for (std::size_t j = 0; j < hidden; ++j) {
      const double r = logistic(x[j] + q[j]);
      const double z = logistic(x[hidden + j] + q[hidden + j]);
      const double n = std::tanh(x[2 * hidden + j] + r * q[2 * hidden + j]);
      c[j] = r;
      c[hidden + j] = z;
      c[2 * hidden + j] = n;
      out[b * hidden + j] = n + z * (sv[b * hidden + j] - n);
    }
  }
  return make_op(h.shape(), std::move(out), {xp, hp, h},
                 [rows, hidden, width, cache = std::move(cache)](std::span<const double> g, std::span<const Tensor> in) {
                   Tensor x = in[0], q = in[1], prev = in[2];
                   auto qv = q.data(), pv = prev.data();
                   std::span<double> gx, gq, gh;
                   if (x.requires_grad()) gx = x.grad_buffer();
                   if (q.requires_grad()) gq = q.grad_buffer();
                   if (prev.requires_grad()) gh = prev.grad_buffer();
                   for (std::size_t b = 0; b < rows; ++b) {
                     const double* c = cache.data() + b * width;
                     for (std::size_t j = 0; j < hidden; ++j) {
                       const double r = c[j], z = c[hidden + j], n = c[2 * hidden + j];
                       const double go = g[b * hidden + j];
                       const double dz = go * (pv[b * hidden + j] - n) * z * (1.0 - z);
                       const double dn = go * (1.0 - z) * (1.0 - n * n);
                       const double dr = dn * qv[b * width + 2 * hidden + j] * r * (1.0 - r);
                       if (!gh.empty()) gh[b * hidden + j] += go * z;
                       if (!gx.empty()) {
                         gx[b * width + j] += dr;
                         gx[b * width + hidden + j] += dz;
                         gx[b * width + 2 * hidden + j] += dn;
                       }
                       if (!gq.empty()) {
                         gq[b * width + j] += dr;
                         gq[b * width + hidden + j] += dz;
                         gq[b * width + 2 * hidden + j] += dn * r;
                       }
                     }
                   }
                 });
}

Tensor lstm_cell_state(const Tensor& gates, const Tensor& c) {
  check_gates(gates, 4, c, "lstm_cell_state");
  const std::size_t rows = c.dim(0), hidden = c.dim(1), width = 4 * hidden;
  auto gv = gates.data(), cv = c.data();
  std::vector<double> out(rows * hidden);
  std::vector<double> cache(rows * 3 * hidden);  // i, f, g per row
  for (std::size_t b = 0; b < rows; ++b) {
    for (std::size_t j = 0; j < hidden; ++j) {
      const double i = logistic(gv[b * width + j]);
      const double f = logistic(gv[b * width + hidden + j]);
      const double u = std::tanh(gv[b * width + 2 * hidden + j]);
      cache[b * 3 * hidden + j] = i;
      cache[b * 3 * hidden + hidden + j] = f;
      cache[b * 3 * hidden + 2 * hidden + j] = u;
      out[b * hidden + j] = f * cv[b * hidden + j] + i * u;
    }
  }
  return make_op(c.shape(), std::move(out), {gates, c},
                 [rows, hidden, width, cache = std::move(cache)](std::span<const double> g, std::span<const Tensor> in) {
                   Tensor gt = in[0], prev = in[1];
                   auto pv = prev.data();
                   std::span<double> gg, gc;
                   if (gt.requires_grad()) gg = gt.grad_buffer();
                   if (prev.requires_grad()) gc = prev.grad_buffer();
                   for (std::size_t b = 0; b < rows; ++b) {
                     const double* k = cache.data() + b * 3 * hidden;
                     for (std::size_t j = 0; j < hidden; ++j) {
                       const double i = k[j], f = k[hidden + j], u = k[2 * hidden + j];
                       const double go = g[b * hidden + j];
                       if (!gc.empty()) gc[b * hidden + j] += go * f;
                       if (!gg.empty()) {
                         gg[b * width + j] += go * u * i * (1.0 - i);
                         gg[b * width + hidden + j] += go * pv[b * hidden + j] * f * (1.0 - f);
                         gg[b * width + 2 * hidden + j] += go * i * (1.0 - u * u);
                       }
                     }
                   }
                 });
}

Tensor lstm_hidden(const Tensor& gates, const Tensor& c) {
  check_gates(gates, 4, c, "lstm_hidden");
  const std::size_t rows = c.dim(0), hidden = c.dim(1), width = 4 * hidden;
  auto gv = gates.data(), cv = c.data();
  std::vector<double> out(rows * hidden);
  std::vector<double> cache(rows * 2 * hidden);  // o, tanh(c) per row
  for (std::size_t b = 0; b < rows; ++b) {
    for (std::size_t j = 0; j < hidden; ++j) {
      const double o = logistic(gv[b * width + 3 * hidden + j]);
      const double t = std::tanh(cv[b * hidden + j]);
      cache[b * 2 * hidden + j] = o;
      cache[b * 2 * hidden + hidden + j] = t;
      out[b * hidden + j] = o * t;
    }
  }
  return make_op(c.shape(), std::move(out), {gates, c},
                 [rows, hidden, width, cache = std::move(cache)](std::span<const double> g, std::span<const Tensor> in) {
                   Tensor gt = in[0], cell = in[1];
                   std::span<double> gg, gc;
                   if (gt.requires_grad()) gg = gt.grad_buffer();
                   if (cell.requires_grad()) gc = cell.grad_buffer();
                   for (std::size_t b = 0; b < rows; ++b) {
                     for (std::size_t j = 0; j < hidden; ++j) {
                       const double o = cache[b * 2 * hidden + j], t = cache[b * 2 * hidden + hidden + j];
                       const double go = g[b * hidden + j];
                       if (!gg.empty()) gg[b * width + 3 * hidden + j] += go * t * o * (1.0 - o);
                       if (!gc.empty()) gc[b * hidden + j] += go * o * (1.0 - t * t);
                     }
                   }
                 });
}

Tensor select(const Tensor& x, std::size_t axis, std::size_t index) {
  const AxisSplit s = split_at(x.shape(), axis);
  if (index >= s.extent) {
    throw ShapeError("select index " + std::to_string(index) + " out of range on axis " + std::to_string(axis) + " of " +
                     shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> out(s.outer * s.inner);
  auto xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * s.extent + index) * s.inner), s.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * s.inner));
  return make_op(std::move(out_shape), std::move(out), {x}, [s, index](std::span<const double> g, std::span<const Tensor> in) {
    Tensor xi = in[0];
    auto gx = xi.grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t j = 0; j < s.inner; ++j) gx[(o * s.extent + index) * s.inner + j] += g[o * s.inner + j];
  });
}

Tensor stack(std::span<const Tensor> xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("stack of zero tensors");
  const Shape& ref = xs[0].shape();
  if (axis > ref.size()) throw ShapeError("stack axis out of range for " + shape_str(ref));
  for (const Tensor& t : xs)
    if (t.shape() != ref) throw ShapeError("stack: shapes differ, " + shape_str(ref) + " vs " + shape_str(t.shape()));
  Shape out_shape = ref;
  out_shape.insert(out_shape.begin() + static_cast<std::ptrdiff_t>(axis), xs.size());
  const AxisSplit s = split_at(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  for (std::size_t v = 0; v < xs.size(); ++v) {
    auto xv = xs[v].data();
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(o * s.inner), s.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * s.extent + v) * s.inner));
  }
  std::vector<Tensor> inputs(xs.begin(), xs.end());
  return make_op(std::move(out_shape), std::move(out), std::move(inputs), [s](std::span<const double> g, std::span<const Tensor> in) {
    for (std::size_t v = 0; v < in.size(); ++v) {
      Tensor t = in[v];
      if (!t.requires_grad()) continue;
      auto gt = t.grad_buffer();
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t j = 0; j < s.inner; ++j) gt[o * s.inner + j] += g[(o * s.extent + v) * s.inner + j];
    }
  });
}

// ---- gradient checking -------------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<Tensor> leaves, double step, double tolerance) {
  if (!(step > 0.0)) throw ConfigError("grad_check step must be positive");
  for (Tensor& leaf : leaves) {
    if (!leaf.requires_grad()) throw ContractError("grad_check leaves must require gradients");
    leaf.zero_grad();
  }
  auto evaluate = [&] {
    const Tensor out = f();
    if (out.numel() != 1) throw ContractError("grad_check needs a scalar function, got " + shape_str(out.shape()));
    const double v = out.item();
    if (!std::isfinite(v)) throw NumericError("grad_check: function value is not finite");
    return out;
  };
  backward(evaluate());
  std::vector<std::vector<double>> analytic;
  for (const Tensor& leaf : leaves) {
    auto g = leaf.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(leaf.numel(), 0.0);
  }
  GradCheckReport report;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto values = leaves[l].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = evaluate().item();
      values[i] = saved - step;
      const double down = evaluate().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[l][i];
      if (!std::isfinite(a)) throw NumericError("grad_check: analytic gradient is not finite");
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-3});
      report.max_relative_error = std::max(report.max_relative_error, err);
      ++report.checked;
    }
  }
  report.passed = report.max_relative_error < tolerance;
  return report;
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace mvl
