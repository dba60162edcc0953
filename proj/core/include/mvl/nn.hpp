#pragma once

// Parameterized building blocks shared by encoders and fusion heads.
//
// Every layer knows its hierarchical path ("encoder.optical.gru.l0") and
// seeds its initializer from (model seed, path), so two models built with
// the same seed and the same paths start from identical weights regardless
// of which other modules they contain.

#include <cstdint>
#include <string>
#include <vector>

#include "mvl/rng.hpp"
#include "mvl/tensor.hpp"

namespace mvl {

struct Parameter {
  std::string name;
  Tensor tensor;
};

class Module {
 public:
  virtual ~Module() = default;
  virtual void collect_parameters(std::vector<Parameter>& out) const = 0;
  // Non-learnable state that a checkpoint must carry (batch-norm statistics).
  virtual void collect_buffers(std::vector<Parameter>& /*out*/) const {}

  std::vector<Parameter> parameters() const;
  std::vector<Parameter> buffers() const;
  std::size_t param_count() const;
};

std::string join_path(const std::string& prefix, const std::string& name);

// Fan-in scaled uniform initializer U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor init_uniform(Shape shape, std::size_t fan_in, std::uint64_t seed, const std::string& name);

class Linear : public Module {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, std::string path, std::uint64_t seed, bool zero_init = false);

  // x [N x in] -> [N x out]
  Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }
  void collect_parameters(std::vector<Parameter>& out) const override;

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  std::string path;
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
};

class Conv1d : public Module {
 public:
  Conv1d() = default;
  Conv1d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::string path, std::uint64_t seed);

  Tensor forward(const Tensor& x) const { return conv1d_same(x, kernels, bias); }
  void collect_parameters(std::vector<Parameter>& out) const override;

  std::string path;
  Tensor kernels;  // [C_out x C_in x k]
  Tensor bias;     // [C_out]
};

class BatchNorm : public Module {
 public:
  BatchNorm() = default;
  BatchNorm(std::size_t features, std::string path);

  // x [N x F]
  Tensor forward(const Tensor& x, Mode mode) { return batch_norm(x, gamma, beta, stats, mode); }
  void collect_parameters(std::vector<Parameter>& out) const override;
  void collect_buffers(std::vector<Parameter>& out) const override;

  std::string path;
  Tensor gamma;
  Tensor beta;
  BatchNormStats stats;
};

class LayerNorm : public Module {
 public:
  LayerNorm() = default;
  LayerNorm(std::size_t features, std::string path);

  Tensor forward(const Tensor& x) const { return layer_norm(x, gain, bias); }
  void collect_parameters(std::vector<Parameter>& out) const override;

  std::string path;
  Tensor gain;
  Tensor bias;
};

// Owns a private random stream so dropout masks never depend on other modules.
class Dropout {
 public:
  Dropout() = default;
  Dropout(double p, const std::string& path, std::uint64_t seed) : p_(p), rng_(Rng::derive(seed, path + ".dropout")) {}

  Tensor forward(const Tensor& x, Mode mode) { return dropout(x, p_, mode, rng_); }
  double rate() const { return p_; }

 private:
  double p_ = 0.0;
  Rng rng_;
};

}  // namespace mvl
