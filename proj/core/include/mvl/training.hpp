#pragma once

// Optimization protocol: class-weighted cross-entropy (optionally with
// per-view auxiliary terms), Adam, mini-batching, a seeded validation split
// and early stopping with best-weight restoration.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mvl/data.hpp"
#include "mvl/fusion.hpp"

namespace mvl {

// w_k = K * (1/f_k) / sum_j (1/f_j). Throws DataError if a class is absent.
std::vector<double> class_weights(std::span<const std::uint32_t> labels, std::size_t classes);

inline constexpr double kProbabilityFloor = 1e-12;

// mean_i w[y_i] * -log(max(p[i, y_i], 1e-12)) over probabilities [B x K].
Tensor weighted_cross_entropy(const Tensor& probs, std::span<const std::size_t> labels, std::span<const double> weights);

// fused + gamma * sum_v per-view loss. Throws ConfigError when the forward
// pass produced no per-view predictions.
Tensor multi_loss(const ForwardOutput& out, std::span<const std::size_t> labels, std::span<const double> weights,
                  double gamma);

// Training objective of a model: the fused loss, plus the auxiliary terms
// when the Multi-Loss component is attached.
Tensor model_loss(const MvlModel& model, const ForwardOutput& out, std::span<const std::size_t> labels,
                  std::span<const double> weights);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Parameter> params, AdamConfig config = {});

  // Parameters without an accumulated gradient are skipped. Throws
  // NumericError naming the parameter if a gradient is not finite.
  void step();
  void zero_grad();
  std::size_t steps() const { return step_; }
  const AdamConfig& config() const { return config_; }

 private:
  std::vector<Parameter> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t step_ = 0;
};

// Stops after `patience` consecutive epochs without a strict improvement of
// more than `min_delta` over the best validation loss.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience = 5, double min_delta = 0.0);

  // Returns true when `loss` is a new best.
  bool update(double loss);
  bool should_stop() const { return stale_ >= patience_; }
  std::size_t best_epoch() const { return best_epoch_; }  // 1-based, 0 before any update
  double best_loss() const { return best_; }
  std::size_t epochs_seen() const { return seen_; }

 private:
  std::size_t patience_;
  double min_delta_;
  double best_;
  std::size_t best_epoch_ = 0;
  std::size_t stale_ = 0;
  std::size_t seen_ = 0;
};

struct TrainConfig {
  std::size_t batch_size = 256;
  std::size_t max_epochs = 100;
  std::size_t patience = 5;
  double min_delta = 0.0;
  double validation_fraction = 0.1;
  AdamConfig adam;
  std::uint64_t seed = 0;  // drives the validation split and shuffling

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_validation_loss = 0.0;
  bool stopped_early = false;
  double seconds = 0.0;
  std::uint64_t seed = 0;
  // Ensembles: one history per member, in view order.
  std::vector<TrainHistory> members;
};

// Seeded uniform split without replacement; at least one sample per part.
std::pair<Dataset, Dataset> validation_split(const Dataset& data, double fraction, std::uint64_t seed);

// Trains in place and restores the best-validation parameters and buffers.
// Ensembles train each member alone on its own view with the member seed
// derived from config.seed.
TrainHistory train(MvlModel& model, const Dataset& data, const TrainConfig& config);

// Inference-mode probabilities, row-major [N x K].
std::vector<double> predict(MvlModel& model, const Dataset& data, std::size_t batch_size = 256);

// Mean fused loss over a dataset in inference mode.
double evaluate_loss(MvlModel& model, const Dataset& data, std::span<const double> weights,
                     std::size_t batch_size = 256);

// ---- checkpoints ------------------------------------------------------------------------
//
// "MVLC" | u32 version | u64 manifest bytes | manifest (JSON: name, kind and
// shape per tensor, in order) | little-endian float64 values.

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Module& model, const std::filesystem::path& path);
// Throws FormatError when names or shapes differ from the model's.
void load_checkpoint(Module& model, const std::filesystem::path& path);

// Copies parameter and buffer values between structurally identical modules.
void copy_state(const Module& from, Module& to);

}  // namespace mvl
