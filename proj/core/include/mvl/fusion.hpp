#pragma once

// Multi-view models: five fusion strategies over view-dedicated encoders,
// plus the gated-merge (G-Fusion) and auxiliary-loss (Multi-Loss) components.
//
//   Input     align views on a shared time axis, concatenate channels, one
//             encoder + one head.
//   Feature   one encoder per view, merge embeddings, one head.
//   Decision  one encoder + head per view, merge the per-view probabilities.
//   Hybrid    shared per-view encoders feeding a feature branch and a
//             decision branch; the final output averages the two branches.
//   Ensemble  independently trained single-view models averaged at inference.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mvl/encoders.hpp"
#include "mvl/nn.hpp"

namespace mvl {

enum class Strategy { kInput, kFeature, kDecision, kHybrid, kEnsemble };
enum class Component { kNone, kGFusion, kMultiLoss };
enum class MergeKind { kConcat, kAverage, kGated };

std::string_view to_string(Strategy s);
std::string_view to_string(Component c);
std::string_view to_string(MergeKind m);
Strategy parse_strategy(std::string_view name);
Component parse_component(std::string_view name);
MergeKind parse_merge(std::string_view name);
const std::vector<Strategy>& all_strategies();

// G-Fusion and Multi-Loss attach to Feature, Decision and Hybrid only.
bool component_allowed(Strategy strategy, Component component);

// One mini-batch: one tensor per view (in model view order) and the labels.
struct Batch {
  std::vector<Tensor> views;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
};

/// Single-hidden-layer MLP head: linear(in, 64), batch-norm, ReLU, dropout,
/// linear(64, K), softmax. Parameters: in*64 + 64 + 128 + 64*K + K.
class PredictionHead : public Module {
 public:
  PredictionHead() = default;
  PredictionHead(std::size_t input_width, std::size_t num_classes, double dropout_rate, const std::string& path,
                 std::uint64_t seed, std::size_t hidden = 64);

  Tensor forward(const Tensor& z, Mode mode);
  void collect_parameters(std::vector<Parameter>& out) const override;
  void collect_buffers(std::vector<Parameter>& out) const override;

  Linear hidden;
  BatchNorm norm;
  Linear output;

 private:
  Dropout dropout_;
};

/// Produces per-sample, per-position view weights: a linear map from the
/// concatenated gate inputs to |V| * width logits, softmax across views at
/// every position. Zero-initialized, so it starts as the plain average.
class GatedUnit : public Module {
 public:
  GatedUnit() = default;
  GatedUnit(std::size_t input_width, std::size_t views, std::size_t width, const std::string& path);

  // gate_input [B x input_width] -> alpha [B x |V| x width]
  Tensor weights(const Tensor& gate_input) const;
  void collect_parameters(std::vector<Parameter>& out) const override;

  std::size_t views() const { return views_; }
  std::size_t width() const { return width_; }

  Linear gate;

 private:
  std::size_t views_ = 0;
  std::size_t width_ = 0;
};

// Mean of equally shaped tensors, accumulated in view order as
// sum_v (1/|V|) * x_v.
Tensor average_merge(std::span<const Tensor> xs);
Tensor concat_merge(std::span<const Tensor> xs);
// sum_v alpha_v * x_v with alpha from the unit; the gate reads the
// concatenation of `gate_inputs` (the view representations).
// `alpha_out`, when given, receives the [B x |V| x width] weights.
Tensor gated_merge(std::span<const Tensor> xs, std::span<const Tensor> gate_inputs, const GatedUnit& unit,
                   Tensor* alpha_out = nullptr);

// Aligns the views of one batch for Input fusion: static [B x D] views are
// repeated across the time axis and everything is concatenated on the channel
// axis. A single view passes through unchanged.
Tensor align_and_merge_input(std::span<const Tensor> views);
// Schema of the aligned input (temporal unless every view is static).
ViewSchema aligned_schema(std::span<const ViewSchema> views);

struct ModelSpec {
  Strategy strategy = Strategy::kFeature;
  Component component = Component::kNone;
  std::vector<ViewSchema> views;
  EncoderConfig encoder;
  std::size_t num_classes = 2;
  // Defaults: concat for Feature, average elsewhere; G-Fusion forces gated.
  std::optional<MergeKind> merge;
  double gamma = 0.3;  // Multi-Loss weight
  std::uint64_t seed = 0;

  MergeKind resolved_merge() const;
  // Throws ConfigError on illegal combinations.
  void validate() const;
};

struct ForwardOutput {
  Tensor probs;                     // [B x K]
  std::vector<Tensor> view_probs;   // per-view predictions used by Multi-Loss
  Tensor feature_probs;             // Hybrid only
  Tensor decision_probs;            // Hybrid only
};

class MvlModel : public Module {
 public:
  explicit MvlModel(ModelSpec spec) : spec_(std::move(spec)) {}

  virtual ForwardOutput forward(const Batch& batch, Mode mode) = 0;
  const ModelSpec& spec() const { return spec_; }
  std::vector<std::string> view_names() const;

 protected:
  void check_batch(const Batch& batch) const;
  ModelSpec spec_;
};

class InputFusionModel : public MvlModel {
 public:
  explicit InputFusionModel(ModelSpec spec);
  ForwardOutput forward(const Batch& batch, Mode mode) override;
  void collect_parameters(std::vector<Parameter>& out) const override;
  void collect_buffers(std::vector<Parameter>& out) const override;

  std::unique_ptr<Encoder> encoder;
  PredictionHead head;
};

class FeatureFusionModel : public MvlModel {
 public:
  explicit FeatureFusionModel(ModelSpec spec);
  ForwardOutput forward(const Batch& batch, Mode mode) override;
  void collect_parameters(std::vector<Parameter>& out) const override;
  void collect_buffers(std::vector<Parameter>& out) const override;

  std::vector<std::unique_ptr<Encoder>> encoders;
  std::unique_ptr<GatedUnit> gate;
  PredictionHead head;
  std::vector<PredictionHead> auxiliary_heads;  // Multi-Loss only
};

class DecisionFusionModel : public MvlModel {
 public:
  explicit DecisionFusionModel(ModelSpec spec);
  ForwardOutput forward(const Batch& batch, Mode mode) override;
  void collect_parameters(std::vector<Parameter>& out) const override;
  void collect_buffers(std::vector<Parameter>& out) const override;

  std::vector<std::unique_ptr<Encoder>> encoders;
  std::vector<PredictionHead> heads;
  std::unique_ptr<GatedUnit> gate;
};

class HybridFusionModel : public MvlModel {
 public:
  explicit HybridFusionModel(ModelSpec spec);
  ForwardOutput forward(const Batch& batch, Mode mode) override;
  void collect_parameters(std::vector<Parameter>& out) const override;
  void collect_buffers(std::vector<Parameter>& out) const override;

  std::vector<std::unique_ptr<Encoder>> encoders;  // shared by both branches
  PredictionHead feature_head;
  std::vector<PredictionHead> decision_heads;
  std::unique_ptr<GatedUnit> feature_gate;
  std::unique_ptr<GatedUnit> decision_gate;
};

// Seed of the single-view member for `view` in an ensemble seeded with `seed`.
std::uint64_t ensemble_member_seed(std::uint64_t seed, std::string_view view);

class EnsembleModel : public MvlModel {
 public:
  explicit EnsembleModel(ModelSpec spec);
  // Inference-time average of the member probabilities. Throws DataError if
  // any member is missing.
  ForwardOutput forward(const Batch& batch, Mode mode) override;
  void collect_parameters(std::vector<Parameter>& out) const override;
  void collect_buffers(std::vector<Parameter>& out) const override;

  // Single-view Input-fusion models, one per view, each with its own seed.
  std::vector<std::unique_ptr<InputFusionModel>> members;
};

std::unique_ptr<MvlModel> build_model(const ModelSpec& spec);

// Single-view baseline: an encoder and a head on one view.
std::unique_ptr<MvlModel> build_single_view_model(const ViewSchema& view, const EncoderConfig& encoder,
                                                  std::size_t num_classes, std::uint64_t seed);

// Parameter totals for homogeneous encoders (n_E each) and heads (n_P each)
// under a pooling merge.
std::size_t formula_count(Strategy strategy, std::size_t encoder_params, std::size_t head_params, std::size_t views);

}  // namespace mvl
