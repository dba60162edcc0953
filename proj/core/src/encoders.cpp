#include "mvl/encoders.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "mvl/errors.hpp"

namespace mvl {

namespace {

constexpr std::string_view kArchitectureNames[] = {"LSTM", "GRU", "TempCNN", "TAE", "LTAE", "MLP"};

Tensor zeros_state(std::size_t batch, std::size_t width) { return Tensor::zeros({batch, width}); }

// [B x T x D] -> per-step input projections [B x T x G] with one GEMM.
Tensor project_sequence(const Tensor& seq, const Linear& layer) {
  const std::size_t batch = seq.dim(0), steps = seq.dim(1), width = seq.dim(2);
  Tensor flat = reshape(seq, {batch * steps, width});
  return reshape(layer.forward(flat), {batch, steps, layer.out_features()});
}

Tensor step_of(const Tensor& projected, std::size_t t) { return select(projected, 1, t); }

Tensor stack_steps(const std::vector<Tensor>& steps) { return stack(steps, 1); }

Tensor gru_step(const Tensor& xp, const Tensor& h, const Linear& hidden_to_hidden) {
  return gru_update(xp, hidden_to_hidden.forward(h), h);
}

LstmState lstm_step(const Tensor& xp, const LstmState& state, const Linear& hidden_to_hidden) {
  Tensor gates = add(xp, hidden_to_hidden.forward(state.h));
  Tensor c = lstm_cell_state(gates, state.c);
  return {lstm_hidden(gates, c), c};
}

}  // namespace

std::string_view to_string(Architecture arch) { return kArchitectureNames[static_cast<int>(arch)]; }

Architecture parse_architecture(std::string_view name) {
  auto same = [](std::string_view a, std::string_view b) {
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
             return std::tolower(static_cast<unsigned char>(x)) == std::tolower(static_cast<unsigned char>(y));
           });
  };
  for (int i = 0; i < 6; ++i) {
    if (same(name, kArchitectureNames[i])) return static_cast<Architecture>(i);
  }
  if (same(name, "L-TAE")) return Architecture::kLtae;
  throw ConfigError("unknown encoder architecture '" + std::string(name) + "'");
}

const std::vector<Architecture>& temporal_architectures() {
  static const std::vector<Architecture> archs = {Architecture::kLstm, Architecture::kGru, Architecture::kTae,
                                                  Architecture::kLtae, Architecture::kTempCnn};
  return archs;
}

Shape ViewSchema::sample_shape() const { return temporal ? Shape{steps, channels} : Shape{channels}; }

const std::vector<ViewSchema>& canonical_views() {
  static const std::vector<ViewSchema> views = {
      {"optical", true, 12, 11}, {"radar", true, 12, 2},       {"weather", true, 12, 2},
      {"ndvi", true, 12, 1},     {"topography", false, 0, 2},
  };
  return views;
}

std::optional<ViewSchema> canonical_view(std::string_view name) {
  for (const ViewSchema& v : canonical_views())
    if (v.name == name) return v;
  return std::nullopt;
}

void EncoderConfig::validate() const {
  if (hidden == 0 || layers == 0 || embedding_dim == 0) throw ConfigError("encoder widths and depth must be positive");
  if (kernel % 2 == 0) throw ConfigError("TempCNN kernel must be odd, got " + std::to_string(kernel));
  if (conv_filters == 0 || conv_blocks == 0 || dense == 0) throw ConfigError("TempCNN widths must be positive");
  if (heads == 0 || key_dim == 0 || model_dim == 0) throw ConfigError("attention widths must be positive");
  if (model_dim % heads != 0) {
    throw ConfigError("attention width " + std::to_string(model_dim) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
}

void Encoder::check_input(const Tensor& x) const {
  const Shape expected = schema_.sample_shape();
  const bool rank_ok = x.rank() == expected.size() + 1;
  bool ok = rank_ok;
  for (std::size_t i = 0; ok && i < expected.size(); ++i) {
    // Recurrent and attention encoders accept any length; TempCNN checks its own.
    if (schema_.temporal && i == 0) continue;
    ok = x.dim(i + 1) == expected[i];
  }
  if (!ok) {
    throw SchemaError("view '" + schema_.name + "' expects samples of shape " + shape_str(expected) + ", got batch " +
                      shape_str(x.shape()));
  }
}

std::unique_ptr<Encoder> make_encoder(const EncoderConfig& config, const ViewSchema& schema, const std::string& path,
                                      std::uint64_t seed) {
  config.validate();
  if (schema.channels == 0) throw SchemaError("view '" + schema.name + "' has no channels");
  if (!schema.temporal) return std::make_unique<MlpEncoder>(config, schema, path, seed);
  if (schema.steps == 0) throw DataError("view '" + schema.name + "' is an empty series");
  switch (config.architecture) {
    case Architecture::kGru:
      return std::make_unique<GruEncoder>(config, schema, path, seed);
    case Architecture::kLstm:
      return std::make_unique<LstmEncoder>(config, schema, path, seed);
    case Architecture::kTempCnn:
      return std::make_unique<TempCnnEncoder>(config, schema, path, seed);
    case Architecture::kTae:
      return std::make_unique<AttentionEncoder>(config, schema, path, seed, false);
    case Architecture::kLtae:
      return std::make_unique<AttentionEncoder>(config, schema, path, seed, true);
    case Architecture::kMlp:
      break;
  }
  throw SchemaError("the MLP encoder only accepts static views; '" + schema.name + "' is temporal");
}

// ---- MLP -------------------------------------------------------------------

MlpEncoder::MlpEncoder(const EncoderConfig& config, const ViewSchema& schema, const std::string& path,
                       std::uint64_t seed)
    : Encoder(config, schema, path),
      input(schema.channels, config.hidden, join_path(path, "mlp.l0"), seed),
      output(config.hidden, config.embedding_dim, join_path(path, "mlp.l1"), seed),
      dropout_(config.dropout, path, seed) {
  if (schema.temporal) throw SchemaError("MLP encoder requires a static view, '" + schema.name + "' is temporal");
}

Tensor MlpEncoder::forward(const Tensor& x, Mode mode) {
  if (x.rank() != 2) throw SchemaError("MLP encoder expects [B x D] static input, got " + shape_str(x.shape()));
  check_input(x);
  return dropout_.forward(output.forward(relu(input.forward(x))), mode);
}

void MlpEncoder::collect_parameters(std::vector<Parameter>& out) const {
  input.collect_parameters(out);
  output.collect_parameters(out);
}

// ---- recurrent ---------------------------------------------------------------

Tensor gru_cell(const Tensor& x, const Tensor& h, const Linear& input_to_hidden, const Linear& hidden_to_hidden) {
  return gru_step(input_to_hidden.forward(x), h, hidden_to_hidden);
}

LstmState lstm_cell(const Tensor& x, const LstmState& state, const Linear& input_to_hidden,
                    const Linear& hidden_to_hidden) {
  return lstm_step(input_to_hidden.forward(x), state, hidden_to_hidden);
}

GruEncoder::GruEncoder(const EncoderConfig& config, const ViewSchema& schema, const std::string& path,
                       std::uint64_t seed)
    : Encoder(config, schema, path),
      projection(config.hidden, config.embedding_dim, join_path(path, "gru.projection"), seed),
      dropout_(config.dropout, path, seed) {
  std::size_t in = schema.channels;
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string lp = join_path(path, "gru.l" + std::to_string(l));
    layers.push_back({Linear(in, 3 * config.hidden, lp + ".ih", seed), Linear(config.hidden, 3 * config.hidden, lp + ".hh", seed)});
    in = config.hidden;
  }
}

Tensor GruEncoder::forward(const Tensor& x, Mode mode) {
  if (x.rank() != 3) throw SchemaError("GRU encoder expects [B x T x D], got " + shape_str(x.shape()));
  check_input(x);
  const std::size_t batch = x.dim(0), steps = x.dim(1);
  Tensor seq = x;
  Tensor h;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Tensor projected = project_sequence(seq, layers[l].input_to_hidden);
    h = zeros_state(batch, config_.hidden);
    std::vector<Tensor> outputs;
    const bool keep = l + 1 < layers.size();
    for (std::size_t t = 0; t < steps; ++t) {
      h = gru_step(step_of(projected, t), h, layers[l].hidden_to_hidden);
      if (keep) outputs.push_back(h);
    }
    if (keep) seq = stack_steps(outputs);
  }
  return dropout_.forward(projection.forward(h), mode);
}

void GruEncoder::collect_parameters(std::vector<Parameter>& out) const {
  for (const Layer& layer : layers) {
    layer.input_to_hidden.collect_parameters(out);
    layer.hidden_to_hidden.collect_parameters(out);
  }
  projection.collect_parameters(out);
}

LstmEncoder::LstmEncoder(const EncoderConfig& config, const ViewSchema& schema, const std::string& path,
                         std::uint64_t seed)
    : Encoder(config, schema, path),
      projection(config.hidden, config.embedding_dim, join_path(path, "lstm.projection"), seed),
      dropout_(config.dropout, path, seed) {
  std::size_t in = schema.channels;
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string lp = join_path(path, "lstm.l" + std::to_string(l));
    layers.push_back({Linear(in, 4 * config.hidden, lp + ".ih", seed), Linear(config.hidden, 4 * config.hidden, lp + ".hh", seed)});
    in = config.hidden;
  }
}

Tensor LstmEncoder::forward(const Tensor& x, Mode mode) {
  if (x.rank() != 3) throw SchemaError("LSTM encoder expects [B x T x D], got " + shape_str(x.shape()));
  check_input(x);
  const std::size_t batch = x.dim(0), steps = x.dim(1);
  Tensor seq = x;
  LstmState state;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Tensor projected = project_sequence(seq, layers[l].input_to_hidden);
    state = {zeros_state(batch, config_.hidden), zeros_state(batch, config_.hidden)};
    std::vector<Tensor> outputs;
    const bool keep = l + 1 < layers.size();
    for (std::size_t t = 0; t < steps; ++t) {
      state = lstm_step(step_of(projected, t), state, layers[l].hidden_to_hidden);
      if (keep) outputs.push_back(state.h);
    }
    if (keep) seq = stack_steps(outputs);
  }
  return dropout_.forward(projection.forward(state.h), mode);
}

void LstmEncoder::collect_parameters(std::vector<Parameter>& out) const {
  for (const Layer& layer : layers) {
    layer.input_to_hidden.collect_parameters(out);
    layer.hidden_to_hidden.collect_parameters(out);
  }
  projection.collect_parameters(out);
}

// ---- TempCNN -------------------------------------------------------------------

TempCnnEncoder::TempCnnEncoder(const EncoderConfig& config, const ViewSchema& schema, const std::string& path,
                               std::uint64_t seed)
    : Encoder(config, schema, path),
      dense(schema.steps * config.conv_filters, config.dense, join_path(path, "tempcnn.dense"), seed),
      dense_norm(config.dense, join_path(path, "tempcnn.dense_norm")),
      projection(config.dense, config.embedding_dim, join_path(path, "tempcnn.projection"), seed),
      dropout_(config.dropout, path, seed) {
  std::size_t in = schema.channels;
  for (std::size_t b = 0; b < config.conv_blocks; ++b) {
    const std::string bp = join_path(path, "tempcnn.block" + std::to_string(b));
    blocks.push_back({Conv1d(in, config.conv_filters, config.kernel, bp + ".conv", seed),
                      BatchNorm(config.conv_filters, bp + ".norm")});
    in = config.conv_filters;
  }
}

Tensor TempCnnEncoder::forward(const Tensor& x, Mode mode) {
  if (x.rank() != 3) throw SchemaError("TempCNN encoder expects [B x T x D], got " + shape_str(x.shape()));
  check_input(x);
  if (x.dim(1) != schema_.steps) {
    throw ShapeError("TempCNN was built for " + std::to_string(schema_.steps) + " steps, got " +
                     std::to_string(x.dim(1)));
  }
  const std::size_t batch = x.dim(0), steps = x.dim(1), filters = config_.conv_filters;
  Tensor h = x;
  for (Block& block : blocks) {
    Tensor conv = reshape(block.conv.forward(h), {batch * steps, filters});
    h = reshape(relu(block.norm.forward(conv, mode)), {batch, steps, filters});
  }
  Tensor flat = reshape(h, {batch, steps * filters});
  Tensor hidden = relu(dense_norm.forward(dense.forward(flat), mode));
  return dropout_.forward(projection.forward(hidden), mode);
}

void TempCnnEncoder::collect_parameters(std::vector<Parameter>& out) const {
  for (const Block& block : blocks) {
    block.conv.collect_parameters(out);
    block.norm.collect_parameters(out);
  }
  dense.collect_parameters(out);
  dense_norm.collect_parameters(out);
  projection.collect_parameters(out);
}

void TempCnnEncoder::collect_buffers(std::vector<Parameter>& out) const {
  for (const Block& block : blocks) block.norm.collect_buffers(out);
  dense_norm.collect_buffers(out);
}

// ---- attention -------------------------------------------------------------------

Tensor positional_encoding(std::size_t steps, std::size_t width) {
  std::vector<double> table(steps * width);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t j = 0; j < width; ++j) {
      const double exponent = static_cast<double>(2 * (j / 2)) / static_cast<double>(width);
      const double angle = static_cast<double>(t) / std::pow(10000.0, exponent);
      table[t * width + j] = j % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor::from({steps, width}, std::move(table));
}

Tensor master_query_attention(const Tensor& query, const Tensor& keys, const Tensor& values, Tensor* weights) {
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(keys.dim(3)));
  Tensor alpha = softmax(scale(attention_scores(query, keys), inv_sqrt), 2);
  if (weights != nullptr) *weights = alpha;
  return attention_combine(alpha, values);
}

AttentionEncoder::AttentionEncoder(const EncoderConfig& config, const ViewSchema& schema, const std::string& path,
                                   std::uint64_t seed, bool lightweight)
    : Encoder(config, schema, path), lightweight_(lightweight), dropout_(config.dropout, path, seed) {
  const std::string prefix = join_path(path, lightweight ? "ltae" : "tae");
  const std::size_t width = config.model_dim, qk = config.heads * config.key_dim;
  input_norm = BatchNorm(schema.channels, prefix + ".input_norm");
  stem = Linear(schema.channels, width, prefix + ".stem", seed);
  positions = positional_encoding(schema.steps, width);
  if (lightweight) {
    master_query = init_uniform({config.heads, config.key_dim}, config.key_dim, seed, prefix + ".master_query");
  } else {
    query = Linear(width, qk, prefix + ".query", seed);
  }
  key = Linear(width, qk, prefix + ".key", seed);
  if (splits_values()) {
    output = Linear(width, config.embedding_dim, prefix + ".output", seed);
  } else {
    value = Linear(width, config.heads * width, prefix + ".value", seed);
    output = Linear(config.heads * width, config.embedding_dim, prefix + ".output", seed);
  }
}

Tensor AttentionEncoder::embed(const Tensor& x, Mode mode) {
  const std::size_t batch = x.dim(0), steps = x.dim(1), channels = x.dim(2);
  if (steps != positions.dim(0)) {
    throw ShapeError("attention encoder was built for " + std::to_string(positions.dim(0)) + " steps, got " +
                     std::to_string(steps));
  }
  // Per-channel statistics over batch and time keep per-sample amplitude.
  Tensor normed = input_norm.forward(reshape(x, {batch * steps, channels}), mode);
  Tensor stemmed = reshape(stem.forward(normed), {batch, steps, config_.model_dim});
  return add(stemmed, positions);
}

Tensor AttentionEncoder::step_queries(const Tensor& x, Mode mode) {
  if (lightweight_) throw ContractError("L-TAE has no per-step queries");
  check_input(x);
  Tensor e = embed(x, mode);
  const std::size_t batch = x.dim(0), steps = x.dim(1);
  Tensor flat = reshape(e, {batch * steps, config_.model_dim});
  return reshape(query.forward(flat), {batch, steps, config_.heads, config_.key_dim});
}

Tensor AttentionEncoder::forward(const Tensor& x, Mode mode) {
  if (x.rank() != 3) throw SchemaError("attention encoder expects [B x T x D], got " + shape_str(x.shape()));
  check_input(x);
  const std::size_t batch = x.dim(0), steps = x.dim(1);
  const std::size_t heads = config_.heads, dk = config_.key_dim, width = config_.model_dim;
  Tensor e = embed(x, mode);
  Tensor flat = reshape(e, {batch * steps, width});
  Tensor keys = reshape(key.forward(flat), {batch, steps, heads, dk});
  Tensor q;
  if (lightweight_) {
    q = repeat_leading(master_query, batch);
  } else {
    q = reduce(reshape(query.forward(flat), {batch, steps, heads, dk}), Reduction::kMean, 1);
  }
  Tensor values = splits_values() ? reshape(e, {batch, steps, heads, width / heads})
                                  : reshape(value.forward(flat), {batch, steps, heads, width});
  Tensor alpha;
  Tensor pooled = master_query_attention(q, keys, values, &alpha);
  last_attention_ = alpha.detach();
  Tensor z = output.forward(reshape(pooled, {batch, pooled.numel() / batch}));
  return dropout_.forward(z, mode);
}

void AttentionEncoder::collect_parameters(std::vector<Parameter>& out) const {
  input_norm.collect_parameters(out);
  stem.collect_parameters(out);
  if (lightweight_) {
    out.push_back({join_path(path_, "ltae.master_query"), master_query});
  } else {
    query.collect_parameters(out);
  }
  key.collect_parameters(out);
  if (!splits_values()) value.collect_parameters(out);
  output.collect_parameters(out);
}

void AttentionEncoder::collect_buffers(std::vector<Parameter>& out) const { input_norm.collect_buffers(out); }

// ---- accounting ----------------------------------------------------------------------

std::size_t encoder_param_formula(const EncoderConfig& c, const ViewSchema& schema) {
  const std::size_t d = schema.channels, e = c.embedding_dim, h = c.hidden;
  if (!schema.temporal) return d * h + h + h * e + e;
  auto recurrent = [&](std::size_t gates) {
    std::size_t total = 0, in = d;
    for (std::size_t l = 0; l < c.layers; ++l) {
      total += gates * h * (in + h) + 2 * gates * h;
      in = h;
    }
    return total + h * e + e;
  };
  switch (c.architecture) {
    case Architecture::kGru:
      return recurrent(3);
    case Architecture::kLstm:
      return recurrent(4);
    case Architecture::kTempCnn: {
      const std::size_t f = c.conv_filters, k = c.kernel;
      std::size_t total = d * f * k + f + 2 * f;
      total += (c.conv_blocks - 1) * (f * f * k + f + 2 * f);
      total += schema.steps * f * c.dense + c.dense + 2 * c.dense;
      return total + c.dense * e + e;
    }
    case Architecture::kTae:
    case Architecture::kLtae: {
      const std::size_t m = c.model_dim, qk = c.heads * c.key_dim;
      const bool light = c.architecture == Architecture::kLtae;
      std::size_t total = 2 * d + d * m + m;    // input norm + stem
      total += light ? qk : m * qk + qk;        // master query or query projection
      total += m * qk + qk;                     // keys
      if (light && c.ltae_split_values) return total + m * e + e;
      total += m * c.heads * m + c.heads * m;   // values
      return total + c.heads * m * e + e;
    }
    case Architecture::kMlp:
      break;
  }
  throw SchemaError("the MLP encoder only accepts static views");
}

std::size_t head_param_formula(std::size_t input_width, std::size_t num_classes, std::size_t hidden) {
  return input_width * hidden + hidden + 2 * hidden + hidden * num_classes + num_classes;
}

}  // namespace mvl
