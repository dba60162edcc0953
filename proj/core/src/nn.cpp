#include "mvl/nn.hpp"

#include <cmath>

namespace mvl {

std::vector<Parameter> Module::parameters() const {
  std::vector<Parameter> out;
  collect_parameters(out);
  return out;
}

std::vector<Parameter> Module::buffers() const {
  std::vector<Parameter> out;
  collect_buffers(out);
  return out;
}

std::size_t Module::param_count() const {
  std::size_t total = 0;
  for (const Parameter& p : parameters()) total += p.tensor.numel();
  return total;
}

std::string join_path(const std::string& prefix, const std::string& name) {
  if (prefix.empty()) return name;
  if (name.empty()) return prefix;
  return prefix + "." + name;
}

Tensor init_uniform(Shape shape, std::size_t fan_in, std::uint64_t seed, const std::string& name) {
  Rng rng = Rng::derive(seed, name);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(values), true);
}

Linear::Linear(std::size_t in, std::size_t out, std::string path_, std::uint64_t seed, bool zero_init)
    : path(std::move(path_)) {
  weight = zero_init ? Tensor::zeros({in, out}, true) : init_uniform({in, out}, in, seed, path + ".weight");
  bias = Tensor::zeros({out}, true);
}

void Linear::collect_parameters(std::vector<Parameter>& out) const {
  out.push_back({path + ".weight", weight});
  out.push_back({path + ".bias", bias});
}

Conv1d::Conv1d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::string path_,
               std::uint64_t seed)
    : path(std::move(path_)) {
  kernels = init_uniform({out_channels, in_channels, kernel}, in_channels * kernel, seed, path + ".kernels");
  bias = Tensor::zeros({out_channels}, true);
}

void Conv1d::collect_parameters(std::vector<Parameter>& out) const {
  out.push_back({path + ".kernels", kernels});
  out.push_back({path + ".bias", bias});
}

BatchNorm::BatchNorm(std::size_t features, std::string path_)
    : path(std::move(path_)),
      gamma(Tensor::full({features}, 1.0, true)),
      beta(Tensor::zeros({features}, true)),
      stats(features) {}

void BatchNorm::collect_parameters(std::vector<Parameter>& out) const {
  out.push_back({path + ".gamma", gamma});
  out.push_back({path + ".beta", beta});
}

void BatchNorm::collect_buffers(std::vector<Parameter>& out) const {
  out.push_back({path + ".running_mean", stats.running_mean});
  out.push_back({path + ".running_var", stats.running_var});
}

LayerNorm::LayerNorm(std::size_t features, std::string path_)
    : path(std::move(path_)), gain(Tensor::full({features}, 1.0, true)), bias(Tensor::zeros({features}, true)) {}

void LayerNorm::collect_parameters(std::vector<Parameter>& out) const {
  out.push_back({path + ".gain", gain});
  out.push_back({path + ".bias", bias});
}

}  // namespace mvl
