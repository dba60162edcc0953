#pragma once

// View encoders: each maps one view of a batch to a [B x embedding_dim]
// representation.
//
//   LSTM / GRU  stacked unidirectional recurrences with dual (input-side and
//               hidden-side) gate biases; the last hidden state of the top
//               layer is projected to the embedding.
//   TempCNN     three conv(k=5, 64) + batch-norm + ReLU blocks, flatten,
//               dense 256 + batch-norm + ReLU, linear to the embedding.
//   TAE         batch-norm + linear input stem, sinusoidal positions,
//               per-head key/query/value projections, master query = mean of
//               the per-step queries, output linear layer.
//   L-TAE       as TAE with one learnable master query per head; by default
//               the values are the stem channels split across heads.
//   MLP         static views only: linear, ReLU, linear.
//
// Every encoder applies dropout to its final embedding.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mvl/nn.hpp"
#include "mvl/tensor.hpp"

namespace mvl {

enum class Architecture { kLstm, kGru, kTempCnn, kTae, kLtae, kMlp };

std::string_view to_string(Architecture arch);
Architecture parse_architecture(std::string_view name);  // case-insensitive; throws ConfigError
// The five temporal architectures in the order used by the experiment grid.
const std::vector<Architecture>& temporal_architectures();

struct ViewSchema {
  std::string name;
  bool temporal = true;
  std::size_t steps = 12;  // ignored for static views
  std::size_t channels = 1;

  // Extents of one sample: {steps, channels} or {channels}.
  Shape sample_shape() const;
  std::size_t sample_size() const { return shape_numel(sample_shape()); }
  bool operator==(const ViewSchema&) const = default;
};

// optical 11, radar 2, weather 2 and ndvi 1 channels over 12 monthly steps;
// topography (elevation, slope) is static with 2 channels.
const std::vector<ViewSchema>& canonical_views();
std::optional<ViewSchema> canonical_view(std::string_view name);

struct EncoderConfig {
  Architecture architecture = Architecture::kGru;
  std::size_t hidden = 64;
  std::size_t layers = 2;
  std::size_t embedding_dim = 64;
  // TempCNN
  std::size_t kernel = 5;
  std::size_t conv_filters = 64;
  std::size_t conv_blocks = 3;
  std::size_t dense = 256;
  // TAE / L-TAE
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t key_dim = 32;
  bool ltae_split_values = true;

  double dropout = 0.2;

  // Throws ConfigError on inconsistent settings.
  void validate() const;
};

class Encoder : public Module {
 public:
  Encoder(EncoderConfig config, ViewSchema schema, std::string path)
      : config_(std::move(config)), schema_(std::move(schema)), path_(std::move(path)) {}

  // x is [B x T x D] for temporal schemas and [B x D] for static ones.
  virtual Tensor forward(const Tensor& x, Mode mode) = 0;

  const EncoderConfig& config() const { return config_; }
  const ViewSchema& schema() const { return schema_; }
  const std::string& path() const { return path_; }

 protected:
  // Throws SchemaError if x does not match the schema.
  void check_input(const Tensor& x) const;

  EncoderConfig config_;
  ViewSchema schema_;
  std::string path_;
};

// Static views always get the MLP encoder; temporal views get
// `config.architecture` (which must not be MLP).
std::unique_ptr<Encoder> make_encoder(const EncoderConfig& config, const ViewSchema& schema, const std::string& path,
                                      std::uint64_t seed);

// ---- individual encoders (exposed for tests and inspection) --------------

class MlpEncoder : public Encoder {
 public:
  MlpEncoder(const EncoderConfig& config, const ViewSchema& schema, const std::string& path, std::uint64_t seed);
  Tensor forward(const Tensor& x, Mode mode) override;
  void collect_parameters(std::vector<Parameter>& out) const override;

  Linear input;
  Linear output;

 private:
  Dropout dropout_;
};

class GruEncoder : public Encoder {
 public:
  GruEncoder(const EncoderConfig& config, const ViewSchema& schema, const std::string& path, std::uint64_t seed);
  Tensor forward(const Tensor& x, Mode mode) override;
  void collect_parameters(std::vector<Parameter>& out) const override;

  struct Layer {
    Linear input_to_hidden;   // [D_in x 3H], gates ordered reset, update, candidate
    Linear hidden_to_hidden;  // [H x 3H]
  };
  std::vector<Layer> layers;
  Linear projection;

 private:
  Dropout dropout_;
};

class LstmEncoder : public Encoder {
 public:
  LstmEncoder(const EncoderConfig& config, const ViewSchema& schema, const std::string& path, std::uint64_t seed);
  Tensor forward(const Tensor& x, Mode mode) override;
  void collect_parameters(std::vector<Parameter>& out) const override;

  struct Layer {
    Linear input_to_hidden;   // [D_in x 4H], gates ordered input, forget, cell, output
    Linear hidden_to_hidden;  // [H x 4H]
  };
  std::vector<Layer> layers;
  Linear projection;

 private:
  Dropout dropout_;
};

// One recurrent step on [B x D] / [B x H] tensors; shared by the encoders and
// exposed so the cell equations can be tested in isolation.
Tensor gru_cell(const Tensor& x, const Tensor& h, const Linear& input_to_hidden, const Linear& hidden_to_hidden);
struct LstmState {
  Tensor h;
  Tensor c;
};
LstmState lstm_cell(const Tensor& x, const LstmState& state, const Linear& input_to_hidden,
                    const Linear& hidden_to_hidden);

class TempCnnEncoder : public Encoder {
 public:
  TempCnnEncoder(const EncoderConfig& config, const ViewSchema& schema, const std::string& path, std::uint64_t seed);
  Tensor forward(const Tensor& x, Mode mode) override;
  void collect_parameters(std::vector<Parameter>& out) const override;
  void collect_buffers(std::vector<Parameter>& out) const override;

  struct Block {
    Conv1d conv;
    BatchNorm norm;
  };
  std::vector<Block> blocks;
  Linear dense;
  BatchNorm dense_norm;
  Linear projection;

 private:
  Dropout dropout_;
};

// Sinusoidal table [steps x width]:
// pe[t][2i] = sin(t / 10000^(2i/width)), pe[t][2i+1] = cos(same angle).
Tensor positional_encoding(std::size_t steps, std::size_t width);

// Multi-head master-query attention pooling.
// query [B x H x dk], keys [B x T x H x dk], values [B x T x H x dv];
// returns pooled [B x H x dv] and writes the softmax weights [B x H x T].
Tensor master_query_attention(const Tensor& query, const Tensor& keys, const Tensor& values, Tensor* weights = nullptr);

class AttentionEncoder : public Encoder {
 public:
  // `lightweight` selects L-TAE (learnable master query).
  AttentionEncoder(const EncoderConfig& config, const ViewSchema& schema, const std::string& path, std::uint64_t seed,
                   bool lightweight);
  Tensor forward(const Tensor& x, Mode mode) override;
  void collect_parameters(std::vector<Parameter>& out) const override;
  void collect_buffers(std::vector<Parameter>& out) const override;

  bool lightweight() const { return lightweight_; }
  bool splits_values() const { return lightweight_ && config_.ltae_split_values; }
  // Per-step queries (TAE) for a batch, [B x T x H x dk]; used to derive the
  // master query of a batch.
  Tensor step_queries(const Tensor& x, Mode mode);
  // Attention weights [B x H x T] of the most recent forward call (detached).
  const Tensor& last_attention() const { return last_attention_; }

  BatchNorm input_norm;  // per channel, statistics over batch and time
  Linear stem;
  Tensor positions;       // [T x model_dim], constant
  Linear query;           // TAE only
  Tensor master_query;    // L-TAE only, [H x dk]
  Linear key;
  Linear value;           // absent when values are split
  Linear output;

 private:
  Tensor embed(const Tensor& x, Mode mode);  // [B x T x model_dim]

  bool lightweight_;
  Tensor last_attention_;
  Dropout dropout_;
};

// ---- parameter accounting --------------------------------------------------

// Closed-form parameter count of an encoder, computed without building it.
std::size_t encoder_param_formula(const EncoderConfig& config, const ViewSchema& schema);
// in*hidden + hidden + 2*hidden (batch-norm) + hidden*K + K
std::size_t head_param_formula(std::size_t input_width, std::size_t num_classes, std::size_t hidden = 64);

}  // namespace mvl
