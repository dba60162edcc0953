#include "mvl/fusion.hpp"

#include "mvl/errors.hpp"

namespace mvl {

namespace {

constexpr std::string_view kStrategyNames[] = {"Input", "Feature", "Decision", "Hybrid", "Ensemble"};
constexpr std::string_view kComponentNames[] = {"none", "gfusion", "multiloss"};
constexpr std::string_view kMergeNames[] = {"concat", "average", "gated"};

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Rows of a nonnegative [B x K] tensor divided by their sums.
Tensor normalize_rows(const Tensor& s) {
  const std::size_t rows = s.dim(0), cols = s.dim(1);
  auto sv = s.data();
  std::vector<double> out(s.numel()), sums(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) sums[r] += sv[r * cols + c];
    if (!(sums[r] > 0.0)) throw NumericError("cannot renormalize a row with zero mass");
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = sv[r * cols + c] / sums[r];
  }
  return make_op(s.shape(), std::move(out), {s}, [rows, cols, sums](std::span<const double> g, std::span<const Tensor> in) {
    Tensor x = in[0];
    auto xv = x.data();
    auto gx = x.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * xv[r * cols + c];
      const double inv = 1.0 / sums[r];
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[r * cols + c] * inv - dot * inv * inv;
    }
  });
}

std::vector<Tensor> split_views(const Tensor& alpha) {
  const std::size_t batch = alpha.dim(0), views = alpha.dim(1), width = alpha.dim(2);
  std::vector<Tensor> out;
  out.reserve(views);
  for (std::size_t v = 0; v < views; ++v) out.push_back(reshape(slice(alpha, 1, v, 1), {batch, width}));
  return out;
}

std::vector<std::unique_ptr<Encoder>> make_view_encoders(const ModelSpec& spec) {
  std::vector<std::unique_ptr<Encoder>> encoders;
  for (const ViewSchema& view : spec.views) {
    encoders.push_back(make_encoder(spec.encoder, view, "encoder." + view.name, spec.seed));
  }
  return encoders;
}

std::vector<Tensor> encode_views(std::vector<std::unique_ptr<Encoder>>& encoders, const Batch& batch, Mode mode) {
  std::vector<Tensor> z;
  z.reserve(encoders.size());
  for (std::size_t v = 0; v < encoders.size(); ++v) z.push_back(encoders[v]->forward(batch.views[v], mode));
  return z;
}

}  // namespace

std::string_view to_string(Strategy s) { return kStrategyNames[static_cast<int>(s)]; }
std::string_view to_string(Component c) { return kComponentNames[static_cast<int>(c)]; }
std::string_view to_string(MergeKind m) { return kMergeNames[static_cast<int>(m)]; }

Strategy parse_strategy(std::string_view name) {
  for (int i = 0; i < 5; ++i)
    if (lower(name) == lower(kStrategyNames[i])) return static_cast<Strategy>(i);
  throw ConfigError("unknown fusion strategy '" + std::string(name) + "'");
}

Component parse_component(std::string_view name) {
  const std::string n = lower(name);
  if (n.empty()) return Component::kNone;
  if (n == "g-fusion") return Component::kGFusion;
  if (n == "multi-loss") return Component::kMultiLoss;
  for (int i = 0; i < 3; ++i)
    if (n == kComponentNames[i]) return static_cast<Component>(i);
  throw ConfigError("unknown component '" + std::string(name) + "'");
}

MergeKind parse_merge(std::string_view name) {
  for (int i = 0; i < 3; ++i)
    if (lower(name) == kMergeNames[i]) return static_cast<MergeKind>(i);
  throw ConfigError("unknown merge function '" + std::string(name) + "'");
}

const std::vector<Strategy>& all_strategies() {
  static const std::vector<Strategy> s = {Strategy::kInput, Strategy::kFeature, Strategy::kDecision, Strategy::kHybrid,
                                          Strategy::kEnsemble};
  return s;
}

bool component_allowed(Strategy strategy, Component component) {
  if (component == Component::kNone) return true;
  return strategy == Strategy::kFeature || strategy == Strategy::kDecision || strategy == Strategy::kHybrid;
}

// ---- heads and merges ----------------------------------------------------------

PredictionHead::PredictionHead(std::size_t input_width, std::size_t num_classes, double dropout_rate,
                               const std::string& path, std::uint64_t seed, std::size_t hidden_width)
    : hidden(input_width, hidden_width, join_path(path, "hidden"), seed),
      norm(hidden_width, join_path(path, "norm")),
      output(hidden_width, num_classes, join_path(path, "output"), seed),
      dropout_(dropout_rate, path, seed) {}

Tensor PredictionHead::forward(const Tensor& z, Mode mode) {
  Tensor h = dropout_.forward(relu(norm.forward(hidden.forward(z), mode)), mode);
  return softmax(output.forward(h), 1);
}

void PredictionHead::collect_parameters(std::vector<Parameter>& out) const {
  hidden.collect_parameters(out);
  norm.collect_parameters(out);
  output.collect_parameters(out);
}

void PredictionHead::collect_buffers(std::vector<Parameter>& out) const { norm.collect_buffers(out); }

GatedUnit::GatedUnit(std::size_t input_width, std::size_t views, std::size_t width, const std::string& path)
    : gate(input_width, views * width, path, 0, /*zero_init=*/true), views_(views), width_(width) {}

Tensor GatedUnit::weights(const Tensor& gate_input) const {
  if (gate_input.rank() != 2 || gate_input.dim(1) != gate.in_features()) {
    throw ShapeError("gated unit expects [B x " + std::to_string(gate.in_features()) + "], got " +
                     shape_str(gate_input.shape()));
  }
  Tensor logits = reshape(gate.forward(gate_input), {gate_input.dim(0), views_, width_});
  return softmax(logits, 1);
}

void GatedUnit::collect_parameters(std::vector<Parameter>& out) const { gate.collect_parameters(out); }

Tensor average_merge(std::span<const Tensor> xs) {
  if (xs.empty()) throw ShapeError("merge of zero views");
  for (const Tensor& x : xs)
    if (x.shape() != xs[0].shape()) throw ShapeError("average merge requires equal shapes");
  std::vector<Tensor> weights(xs.size(), Tensor::scalar(1.0 / static_cast<double>(xs.size())));
  return weighted_sum(xs, weights);
}

Tensor concat_merge(std::span<const Tensor> xs) {
  if (xs.empty()) throw ShapeError("merge of zero views");
  return concat(xs, xs[0].rank() - 1);
}

Tensor gated_merge(std::span<const Tensor> xs, std::span<const Tensor> gate_inputs, const GatedUnit& unit,
                   Tensor* alpha_out) {
  if (xs.size() != unit.views()) throw ShapeError("gated merge: view count differs from the gated unit");
  for (const Tensor& x : xs) {
    if (x.rank() != 2 || x.dim(1) != unit.width() || x.shape() != xs[0].shape()) {
      throw ShapeError("gated merge: representation width mismatch, expected [B x " + std::to_string(unit.width()) +
                       "], got " + shape_str(x.shape()));
    }
  }
  Tensor alpha = unit.weights(concat(gate_inputs, 1));
  if (alpha_out != nullptr) *alpha_out = alpha;
  return weighted_sum(xs, split_views(alpha));
}

ViewSchema aligned_schema(std::span<const ViewSchema> views) {
  if (views.empty()) throw SchemaError("no views to align");
  if (views.size() == 1) return views[0];
  ViewSchema out{"input", false, 0, 0};
  for (const ViewSchema& v : views) {
    out.channels += v.channels;
    if (!v.temporal) continue;
    if (out.temporal && out.steps != v.steps) {
      throw SchemaError("cannot align temporal views with " + std::to_string(out.steps) + " and " +
                        std::to_string(v.steps) + " steps");
    }
    out.temporal = true;
    out.steps = v.steps;
  }
  return out;
}

Tensor align_and_merge_input(std::span<const Tensor> views) {
  if (views.empty()) throw SchemaError("no views to align");
  if (views.size() == 1) return views[0];
  std::size_t steps = 0;
  for (const Tensor& v : views) {
    if (v.rank() != 3) continue;
    if (steps != 0 && v.dim(1) != steps) {
      throw SchemaError("temporal views disagree on length: " + std::to_string(steps) + " vs " +
                        std::to_string(v.dim(1)));
    }
    steps = v.dim(1);
  }
  if (steps == 0) return concat(views, 1);
  std::vector<Tensor> aligned;
  for (const Tensor& v : views) {
    if (v.rank() == 2) {
      aligned.push_back(repeat_axis(v, 1, steps));
    } else if (v.rank() == 3) {
      aligned.push_back(v);
    } else {
      throw SchemaError("view tensors must be [B x D] or [B x T x D], got " + shape_str(v.shape()));
    }
  }
  return concat(std::span<const Tensor>(aligned), 2);
}

// ---- model spec ------------------------------------------------------------------------

MergeKind ModelSpec::resolved_merge() const {
  if (component == Component::kGFusion) return MergeKind::kGated;
  if (merge) return *merge;
  return strategy == Strategy::kFeature ? MergeKind::kConcat : MergeKind::kAverage;
}

void ModelSpec::validate() const {
  if (views.empty()) throw ConfigError("a model needs at least one view");
  if (num_classes < 2) throw ConfigError("a model needs at least two classes");
  if (!(gamma >= 0.0)) throw ConfigError("multi-loss weight must be nonnegative");
  if (!component_allowed(strategy, component)) {
    throw ConfigError(std::string(to_string(component)) + " can only be used with Feature, Decision or Hybrid fusion, not " +
                      std::string(to_string(strategy)));
  }
  encoder.validate();
  if (merge) {
    if (*merge == MergeKind::kGated && component != Component::kGFusion) {
      throw ConfigError("the gated merge is selected through the gfusion component");
    }
    if (component == Component::kGFusion && *merge != MergeKind::kGated) {
      throw ConfigError("gfusion requires the gated merge");
    }
    const bool concat_ok = strategy == Strategy::kFeature || strategy == Strategy::kInput;
    if (*merge == MergeKind::kConcat && !concat_ok) {
      throw ConfigError("concatenation is only a valid merge for Feature or Input fusion");
    }
  }
  for (std::size_t i = 0; i < views.size(); ++i)
    for (std::size_t j = i + 1; j < views.size(); ++j)
      if (views[i].name == views[j].name) throw ConfigError("duplicate view '" + views[i].name + "'");
}

std::vector<std::string> MvlModel::view_names() const {
  std::vector<std::string> names;
  for (const ViewSchema& v : spec_.views) names.push_back(v.name);
  return names;
}

void MvlModel::check_batch(const Batch& batch) const {
  if (batch.views.size() != spec_.views.size()) {
    throw SchemaError("batch carries " + std::to_string(batch.views.size()) + " views, model expects " +
                      std::to_string(spec_.views.size()));
  }
  for (const Tensor& v : batch.views) {
    if (v.dim(0) != batch.size()) throw ShapeError("batch view and label counts differ");
  }
}

// ---- Input ---------------------------------------------------------------------------------

InputFusionModel::InputFusionModel(ModelSpec spec) : MvlModel(std::move(spec)) {
  spec_.validate();
  encoder = make_encoder(spec_.encoder, aligned_schema(spec_.views), "encoder", spec_.seed);
  head = PredictionHead(spec_.encoder.embedding_dim, spec_.num_classes, spec_.encoder.dropout, "head", spec_.seed);
}

ForwardOutput InputFusionModel::forward(const Batch& batch, Mode mode) {
  check_batch(batch);
  Tensor fused = align_and_merge_input(batch.views);
  return {head.forward(encoder->forward(fused, mode), mode), {}, {}, {}};
}

void InputFusionModel::collect_parameters(std::vector<Parameter>& out) const {
  encoder->collect_parameters(out);
  head.collect_parameters(out);
}

void InputFusionModel::collect_buffers(std::vector<Parameter>& out) const {
  encoder->collect_buffers(out);
  head.collect_buffers(out);
}

// ---- Feature -------------------------------------------------------------------------------

FeatureFusionModel::FeatureFusionModel(ModelSpec spec) : MvlModel(std::move(spec)) {
  spec_.validate();
  encoders = make_view_encoders(spec_);
  const std::size_t width = spec_.encoder.embedding_dim, views = spec_.views.size();
  const MergeKind merge = spec_.resolved_merge();
  if (merge == MergeKind::kGated) gate = std::make_unique<GatedUnit>(views * width, views, width, "gate");
  const std::size_t head_in = merge == MergeKind::kConcat ? views * width : width;
  head = PredictionHead(head_in, spec_.num_classes, spec_.encoder.dropout, "head", spec_.seed);
  if (spec_.component == Component::kMultiLoss) {
    for (const ViewSchema& v : spec_.views) {
      auxiliary_heads.emplace_back(width, spec_.num_classes, spec_.encoder.dropout, "aux." + v.name, spec_.seed);
    }
  }
}

ForwardOutput FeatureFusionModel::forward(const Batch& batch, Mode mode) {
  check_batch(batch);
  std::vector<Tensor> z = encode_views(encoders, batch, mode);
  Tensor fused;
  switch (spec_.resolved_merge()) {
    case MergeKind::kConcat:
      fused = concat_merge(z);
      break;
    case MergeKind::kAverage:
      fused = average_merge(z);
      break;
    case MergeKind::kGated:
      fused = gated_merge(z, z, *gate);
      break;
  }
  ForwardOutput out;
  out.probs = head.forward(fused, mode);
  for (std::size_t v = 0; v < auxiliary_heads.size(); ++v) out.view_probs.push_back(auxiliary_heads[v].forward(z[v], mode));
  return out;
}

void FeatureFusionModel::collect_parameters(std::vector<Parameter>& out) const {
  for (const auto& e : encoders) e->collect_parameters(out);
  if (gate) gate->collect_parameters(out);
  head.collect_parameters(out);
  for (const auto& h : auxiliary_heads) h.collect_parameters(out);
}

void FeatureFusionModel::collect_buffers(std::vector<Parameter>& out) const {
  for (const auto& e : encoders) e->collect_buffers(out);
  head.collect_buffers(out);
  for (const auto& h : auxiliary_heads) h.collect_buffers(out);
}

// ---- Decision ------------------------------------------------------------------------------

DecisionFusionModel::DecisionFusionModel(ModelSpec spec) : MvlModel(std::move(spec)) {
  spec_.validate();
  encoders = make_view_encoders(spec_);
  const std::size_t width = spec_.encoder.embedding_dim, views = spec_.views.size();
  for (const ViewSchema& v : spec_.views) {
    heads.emplace_back(width, spec_.num_classes, spec_.encoder.dropout, "head." + v.name, spec_.seed);
  }
  if (spec_.resolved_merge() == MergeKind::kGated) {
    gate = std::make_unique<GatedUnit>(views * width, views, spec_.num_classes, "gate");
  }
}

ForwardOutput DecisionFusionModel::forward(const Batch& batch, Mode mode) {
  check_batch(batch);
  std::vector<Tensor> z = encode_views(encoders, batch, mode);
  ForwardOutput out;
  for (std::size_t v = 0; v < heads.size(); ++v) out.view_probs.push_back(heads[v].forward(z[v], mode));
  // Per-class gate weights need not keep rows on the simplex; renormalize.
  out.probs = gate ? normalize_rows(gated_merge(out.view_probs, z, *gate)) : average_merge(out.view_probs);
  return out;
}

void DecisionFusionModel::collect_parameters(std::vector<Parameter>& out) const {
  for (std::size_t v = 0; v < encoders.size(); ++v) {
    encoders[v]->collect_parameters(out);
    heads[v].collect_parameters(out);
  }
  if (gate) gate->collect_parameters(out);
}

void DecisionFusionModel::collect_buffers(std::vector<Parameter>& out) const {
  for (std::size_t v = 0; v < encoders.size(); ++v) {
    encoders[v]->collect_buffers(out);
    heads[v].collect_buffers(out);
  }
}

// ---- Hybrid --------------------------------------------------------------------------------

HybridFusionModel::HybridFusionModel(ModelSpec spec) : MvlModel(std::move(spec)) {
  spec_.validate();
  encoders = make_view_encoders(spec_);
  const std::size_t width = spec_.encoder.embedding_dim, views = spec_.views.size();
  feature_head = PredictionHead(width, spec_.num_classes, spec_.encoder.dropout, "feature_head", spec_.seed);
  for (const ViewSchema& v : spec_.views) {
    decision_heads.emplace_back(width, spec_.num_classes, spec_.encoder.dropout, "decision_head." + v.name,
                                spec_.seed);
  }
  if (spec_.resolved_merge() == MergeKind::kGated) {
    feature_gate = std::make_unique<GatedUnit>(views * width, views, width, "gate.feature");
    decision_gate = std::make_unique<GatedUnit>(views * width, views, spec_.num_classes, "gate.decision");
  }
}

ForwardOutput HybridFusionModel::forward(const Batch& batch, Mode mode) {
  check_batch(batch);
  std::vector<Tensor> z = encode_views(encoders, batch, mode);
  ForwardOutput out;
  Tensor merged = feature_gate ? gated_merge(z, z, *feature_gate) : average_merge(z);
  out.feature_probs = feature_head.forward(merged, mode);
  for (std::size_t v = 0; v < decision_heads.size(); ++v) out.view_probs.push_back(decision_heads[v].forward(z[v], mode));
  out.decision_probs =
      decision_gate ? normalize_rows(gated_merge(out.view_probs, z, *decision_gate)) : average_merge(out.view_probs);
  const Tensor branches[] = {out.feature_probs, out.decision_probs};
  out.probs = average_merge(branches);
  return out;
}

void HybridFusionModel::collect_parameters(std::vector<Parameter>& out) const {
  for (const auto& e : encoders) e->collect_parameters(out);
  feature_head.collect_parameters(out);
  for (const auto& h : decision_heads) h.collect_parameters(out);
  if (feature_gate) feature_gate->collect_parameters(out);
  if (decision_gate) decision_gate->collect_parameters(out);
}

void HybridFusionModel::collect_buffers(std::vector<Parameter>& out) const {
  for (const auto& e : encoders) e->collect_buffers(out);
  feature_head.collect_buffers(out);
  for (const auto& h : decision_heads) h.collect_buffers(out);
}

// ---- Ensemble ------------------------------------------------------------------------------

std::uint64_t ensemble_member_seed(std::uint64_t seed, std::string_view view) {
  return Rng::mix(seed ^ Rng::hash("member." + std::string(view)));
}

EnsembleModel::EnsembleModel(ModelSpec spec) : MvlModel(std::move(spec)) {
  spec_.validate();
  if (spec_.resolved_merge() != MergeKind::kAverage) throw ConfigError("ensembles aggregate by averaging");
  for (const ViewSchema& v : spec_.views) {
    ModelSpec member = spec_;
    member.strategy = Strategy::kInput;
    member.component = Component::kNone;
    member.merge.reset();
    member.views = {v};
    member.seed = ensemble_member_seed(spec_.seed, v.name);
    members.push_back(std::make_unique<InputFusionModel>(std::move(member)));
  }
}

ForwardOutput EnsembleModel::forward(const Batch& batch, Mode mode) {
  check_batch(batch);
  if (members.size() != spec_.views.size()) throw DataError("incomplete ensemble: missing member models");
  ForwardOutput out;
  for (std::size_t v = 0; v < members.size(); ++v) {
    if (!members[v]) throw DataError("incomplete ensemble: member '" + spec_.views[v].name + "' is missing");
    Batch single{{batch.views[v]}, batch.labels};
    out.view_probs.push_back(members[v]->forward(single, mode).probs);
  }
  out.probs = average_merge(out.view_probs);
  return out;
}

void EnsembleModel::collect_parameters(std::vector<Parameter>& out) const {
  for (std::size_t v = 0; v < members.size(); ++v) {
    for (Parameter p : members[v]->parameters()) {
      p.name = "member." + spec_.views[v].name + "." + p.name;
      out.push_back(std::move(p));
    }
  }
}

void EnsembleModel::collect_buffers(std::vector<Parameter>& out) const {
  for (std::size_t v = 0; v < members.size(); ++v) {
    for (Parameter p : members[v]->buffers()) {
      p.name = "member." + spec_.views[v].name + "." + p.name;
      out.push_back(std::move(p));
    }
  }
}

// ---- factories -----------------------------------------------------------------------------

std::unique_ptr<MvlModel> build_model(const ModelSpec& spec) {
  switch (spec.strategy) {
    case Strategy::kInput:
      return std::make_unique<InputFusionModel>(spec);
    case Strategy::kFeature:
      return std::make_unique<FeatureFusionModel>(spec);
    case Strategy::kDecision:
      return std::make_unique<DecisionFusionModel>(spec);
    case Strategy::kHybrid:
      return std::make_unique<HybridFusionModel>(spec);
    case Strategy::kEnsemble:
      return std::make_unique<EnsembleModel>(spec);
  }
  throw ConfigError("unknown strategy");
}

std::unique_ptr<MvlModel> build_single_view_model(const ViewSchema& view, const EncoderConfig& encoder,
                                                  std::size_t num_classes, std::uint64_t seed) {
  ModelSpec spec;
  spec.strategy = Strategy::kInput;
  spec.views = {view};
  spec.encoder = encoder;
  spec.num_classes = num_classes;
  spec.seed = seed;
  return std::make_unique<InputFusionModel>(std::move(spec));
}

std::size_t formula_count(Strategy strategy, std::size_t encoder_params, std::size_t head_params, std::size_t views) {
  switch (strategy) {
    case Strategy::kInput:
      return encoder_params + head_params;
    case Strategy::kFeature:
      return views * encoder_params + head_params;
    case Strategy::kDecision:
    case Strategy::kEnsemble:
      return views * (encoder_params + head_params);
    case Strategy::kHybrid:
      return views * (encoder_params + head_params) + head_params;
  }
  return 0;
}

}  // namespace mvl
