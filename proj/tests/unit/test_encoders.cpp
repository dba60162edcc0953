#include <gtest/gtest.h>

#include <cmath>

#include "mvl/encoders.hpp"
#include "mvl/errors.hpp"
#include "test_support.hpp"

namespace mvl {
namespace {

using testing::max_abs_diff;
using testing::probe;
using testing::random_tensor;

ViewSchema view(const std::string& name) { return *canonical_view(name); }

ViewSchema small_temporal(std::size_t steps = 4, std::size_t channels = 3) {
  return ViewSchema{"small", true, steps, channels};
}

// Narrow widths keep the finite-difference sweep short.
EncoderConfig small_config(Architecture a) {
  EncoderConfig c;
  c.architecture = a;
  c.hidden = 4;
  c.embedding_dim = 3;
  c.conv_filters = 3;
  c.kernel = 3;
  c.dense = 5;
  c.model_dim = 4;
  c.heads = 2;
  c.key_dim = 3;
  c.dropout = 0.0;
  return c;
}

void zero_all(const Module& m) {
  for (const Parameter& p : m.parameters()) {
    Tensor t = p.tensor;
    for (double& v : t.mutable_data()) v = 0.0;
  }
}

void fill_all(const Module& m, double value) {
  for (const Parameter& p : m.parameters()) {
    Tensor t = p.tensor;
    for (double& v : t.mutable_data()) v = value;
  }
}

// ---- parameter counts ---------------------------------------------------------

struct CountCase {
  Architecture arch;
  const char* view;
  std::size_t expected;
};

class ReferenceCounts : public ::testing::TestWithParam<CountCase> {};

TEST_P(ReferenceCounts, BuiltEncoderAndFormulaAgreeWithTable) {
  const CountCase& c = GetParam();
  EncoderConfig config;
  config.architecture = c.arch;
  auto enc = make_encoder(config, view(c.view), "enc", 1);
  EXPECT_EQ(enc->param_count(), c.expected);
  EXPECT_EQ(encoder_param_formula(config, view(c.view)), c.expected);
}

INSTANTIATE_TEST_SUITE_P(
    Table, ReferenceCounts,
    ::testing::Values(CountCase{Architecture::kGru, "optical", 43904}, CountCase{Architecture::kGru, "radar", 42176},
                      CountCase{Architecture::kGru, "weather", 42176}, CountCase{Architecture::kGru, "ndvi", 41984},
                      CountCase{Architecture::kLstm, "optical", 57152},
                      CountCase{Architecture::kTempCnn, "optical", 258880},
                      CountCase{Architecture::kTempCnn, "radar", 256000},
                      CountCase{Architecture::kTempCnn, "weather", 256000},
                      CountCase{Architecture::kTempCnn, "ndvi", 255680},
                      CountCase{Architecture::kMlp, "topography", 4352}));

// The reference LSTM row cannot come from one architecture: optical minus
// radar is 2560, which is not a multiple of the 9-channel difference, while
// every count is affine in the channel count. The optical cell is matched;
// two-channel views follow the same formula.
TEST(ParamCount, LstmNarrowViewsFollowTheSharedFormula) {
  EncoderConfig config;
  config.architecture = Architecture::kLstm;
  auto count = [&](const char* v) { return make_encoder(config, view(v), "enc", 1)->param_count(); };
  EXPECT_EQ(count("radar"), 54848u);
  EXPECT_EQ(count("weather"), 54848u);
  EXPECT_EQ(count("ndvi"), 54592u);
  EXPECT_EQ(count("optical") - count("radar"), 9u * 4 * 64);
  EXPECT_NE((57152u - 54592u) % 9u, 0u);
}

TEST(ParamCount, AttentionInterViewDeltas) {
  for (Architecture a : {Architecture::kTae, Architecture::kLtae}) {
    EncoderConfig config;
    config.architecture = a;
    auto count = [&](const char* v) { return make_encoder(config, view(v), "enc", 1)->param_count(); };
    EXPECT_EQ(count("optical") - count("radar"), 594u);
    EXPECT_EQ(count("radar") - count("ndvi"), 66u);
    EXPECT_EQ(count("optical"), encoder_param_formula(config, view("optical")));
  }
}

TEST(ParamCount, LtaeIsSmallerThanTaeAtEqualWidths) {
  for (bool split : {true, false}) {
    EncoderConfig tae, ltae;
    tae.architecture = Architecture::kTae;
    ltae.architecture = Architecture::kLtae;
    ltae.ltae_split_values = split;
    EXPECT_LT(make_encoder(ltae, view("optical"), "e", 1)->param_count(),
              make_encoder(tae, view("optical"), "e", 1)->param_count());
  }
}

TEST(ParamCount, PredictionHead) { EXPECT_EQ(head_param_formula(320, 2), 20802u); }

TEST(ParamCount, DeterministicGivenConfigAndSchema) {
  for (Architecture a : temporal_architectures()) {
    EncoderConfig config;
    config.architecture = a;
    EXPECT_EQ(make_encoder(config, view("radar"), "x", 1)->param_count(),
              make_encoder(config, view("radar"), "y", 99)->param_count());
  }
}

// ---- hand-evaluated cells --------------------------------------------------------

TEST(Gru, ScalarStepByHand) {
  Linear ih(1, 3, "ih", 0), hh(1, 3, "hh", 0);
  fill_all(ih, 0.0);
  fill_all(hh, 0.0);
  for (double& v : ih.weight.mutable_data()) v = 1.0;
  for (double& v : hh.weight.mutable_data()) v = 1.0;
  const double h = gru_cell(Tensor::from({1, 1}, {1}), Tensor::zeros({1, 1}), ih, hh).item();
  const double s1 = 1.0 / (1.0 + std::exp(-1.0));
  EXPECT_NEAR(h, (1 - s1) * std::tanh(1.0), 1e-15);
  EXPECT_NEAR(h, 0.2048, 1e-4);
}

TEST(Lstm, ScalarStepByHand) {
  Linear ih(1, 4, "ih", 0), hh(1, 4, "hh", 0);
  fill_all(ih, 0.0);
  fill_all(hh, 0.0);
  for (double& v : ih.weight.mutable_data()) v = 1.0;
  for (double& v : hh.weight.mutable_data()) v = 1.0;
  const LstmState s = lstm_cell(Tensor::from({1, 1}, {1}), {Tensor::zeros({1, 1}), Tensor::zeros({1, 1})}, ih, hh);
  const double s1 = 1.0 / (1.0 + std::exp(-1.0));
  EXPECT_NEAR(s.c.item(), s1 * std::tanh(1.0), 1e-15);
  EXPECT_NEAR(s.h.item(), s1 * std::tanh(s1 * std::tanh(1.0)), 1e-15);
  EXPECT_NEAR(s.c.item(), 0.5569, 5e-4);
  EXPECT_NEAR(s.h.item(), 0.3695, 5e-4);
}

TEST(Attention, TwoStepSingleHeadByHand) {
  Tensor alpha;
  Tensor z = master_query_attention(Tensor::from({1, 1, 1}, {1}), Tensor::from({1, 2, 1, 1}, {1, 0}),
                                    Tensor::from({1, 2, 1, 1}, {2, 4}), &alpha);
  EXPECT_NEAR(alpha.at({0, 0, 0}), 0.7310585786300049, 1e-12);
  EXPECT_NEAR(alpha.at({0, 0, 1}), 0.2689414213699951, 1e-12);
  EXPECT_NEAR(z.item(), 2.538, 1e-3);
}

TEST(Attention, UniformKeysAverageTheValues) {
  Tensor z = master_query_attention(Tensor::from({1, 1, 2}, {0.3, -1}), Tensor::full({1, 3, 1, 2}, 0.5),
                                    Tensor::from({1, 3, 1, 1}, {1, 2, 6}));
  EXPECT_NEAR(z.item(), 3.0, 1e-12);
}

TEST(PositionalEncoding, SinusoidalTable) {
  Tensor pe = positional_encoding(12, 4);
  EXPECT_EQ(pe.shape(), (Shape{12, 4}));
  EXPECT_EQ(pe.at({0, 0}), 0.0);
  EXPECT_EQ(pe.at({0, 1}), 1.0);
  EXPECT_NEAR(pe.at({3, 0}), std::sin(3.0), 1e-15);
  EXPECT_NEAR(pe.at({3, 3}), std::cos(3.0 / 100.0), 1e-15);
  EXPECT_FALSE(pe.requires_grad());
  EXPECT_EQ(positional_encoding(12, 4).to_vector(), pe.to_vector());
}

// ---- fixed points ------------------------------------------------------------------

TEST(Encoders, ZeroParametersGiveZeroEmbedding) {
  for (Architecture a : {Architecture::kGru, Architecture::kLstm}) {
    EncoderConfig config;
    config.architecture = a;
    auto enc = make_encoder(config, view("optical"), "enc", 1);
    zero_all(*enc);
    Tensor y = enc->forward(random_tensor({3, 12, 11}, 5, false), Mode::kInfer);
    for (double v : y.data()) EXPECT_EQ(v, 0.0);
  }
  EncoderConfig mlp;
  auto enc = make_encoder(mlp, view("topography"), "enc", 1);
  zero_all(*enc);
  Tensor y = enc->forward(random_tensor({3, 2}, 5, false), Mode::kInfer);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(TempCnn, IdentityKernelPreservesInputBeforeNormalization) {
  Conv1d conv(1, 1, 5, "c", 0);
  for (double& v : conv.kernels.mutable_data()) v = 0.0;
  conv.kernels.mutable_data()[2] = 1.0;
  for (double& v : conv.bias.mutable_data()) v = 0.0;
  Tensor x = random_tensor({2, 12, 1}, 3, false);
  EXPECT_EQ(conv.forward(x).to_vector(), x.to_vector());
}

// ---- shapes, errors, determinism -------------------------------------------------------

TEST(Encoders, EveryArchitectureEmbedsTo64) {
  for (Architecture a : temporal_architectures()) {
    EncoderConfig config;
    config.architecture = a;
    for (const ViewSchema& v : canonical_views()) {
      auto enc = make_encoder(config, v, "enc", 2);
      Tensor x = random_tensor(v.temporal ? Shape{3, 12, v.channels} : Shape{3, v.channels}, 4, false);
      EXPECT_EQ(enc->forward(x, Mode::kTrain).shape(), (Shape{3, 64})) << to_string(a) << "/" << v.name;
    }
  }
}

TEST(Encoders, InferModeIsBitDeterministic) {
  for (Architecture a : temporal_architectures()) {
    EncoderConfig config;
    config.architecture = a;
    auto enc = make_encoder(config, view("radar"), "enc", 2);
    Tensor x = random_tensor({4, 12, 2}, 8, false);
    EXPECT_EQ(enc->forward(x, Mode::kInfer).to_vector(), enc->forward(x, Mode::kInfer).to_vector());
  }
}

TEST(Encoders, PermutingTheBatchPermutesTheOutputs) {
  for (Architecture a : temporal_architectures()) {
    EncoderConfig config;
    config.architecture = a;
    auto enc = make_encoder(config, view("radar"), "enc", 2);
    Tensor x = random_tensor({3, 12, 2}, 9, false);
    Tensor perm = concat({slice(x, 0, 2, 1), slice(x, 0, 0, 2)}, 0);
    Tensor y = enc->forward(x, Mode::kInfer), yp = enc->forward(perm, Mode::kInfer);
    EXPECT_LE(max_abs_diff(slice(yp, 0, 1, 2).data(), slice(y, 0, 0, 2).data()), 1e-12) << to_string(a);
    EXPECT_LE(max_abs_diff(slice(yp, 0, 0, 1).data(), slice(y, 0, 2, 1).data()), 1e-12) << to_string(a);
  }
}

TEST(Encoders, AttentionWeightsAreDistributions) {
  for (Architecture a : {Architecture::kTae, Architecture::kLtae}) {
    EncoderConfig config;
    config.architecture = a;
    AttentionEncoder enc(config, view("optical"), "enc", 3, a == Architecture::kLtae);
    enc.forward(random_tensor({5, 12, 11}, 10, false), Mode::kTrain);
    const Tensor& alpha = enc.last_attention();
    EXPECT_EQ(alpha.shape(), (Shape{5, 4, 12}));
    for (std::size_t b = 0; b < 5; ++b)
      for (std::size_t h = 0; h < 4; ++h) {
        double s = 0;
        for (std::size_t t = 0; t < 12; ++t) {
          EXPECT_GE(alpha.at({b, h, t}), 0.0);
          s += alpha.at({b, h, t});
        }
        EXPECT_NEAR(s, 1.0, 1e-9);
      }
  }
}

TEST(Encoders, LtaeWithFrozenMeanQueryMatchesTae) {
  EncoderConfig config = small_config(Architecture::kTae);
  config.ltae_split_values = false;
  const ViewSchema schema = small_temporal();
  AttentionEncoder tae(config, schema, "enc", 4, false);
  AttentionEncoder ltae(config, schema, "enc", 5, true);
  ltae.input_norm = tae.input_norm;
  ltae.stem = tae.stem;
  ltae.key = tae.key;
  ltae.value = tae.value;
  ltae.output = tae.output;
  // Identical samples share one master query.
  Tensor one = random_tensor({1, 4, 3}, 11, false);
  Tensor batch = repeat_axis(reshape(one, {4, 3}), 0, 3);
  Tensor q = reduce(tae.step_queries(batch, Mode::kInfer), Reduction::kMean, 1);  // [B x H x dk]
  ltae.master_query = Tensor::from({2, 3}, std::vector<double>(q.data().begin(), q.data().begin() + 6));
  EXPECT_LE(max_abs_diff(ltae.forward(batch, Mode::kInfer).data(), tae.forward(batch, Mode::kInfer).data()), 1e-12);
}

TEST(Encoders, MlpRejectsTemporalInput) {
  auto enc = make_encoder(EncoderConfig{}, view("topography"), "enc", 1);
  EXPECT_THROW(enc->forward(Tensor::zeros({2, 12, 2}), Mode::kInfer), SchemaError);
}

TEST(Encoders, MlpArchitectureOnTemporalViewIsSchemaError) {
  EncoderConfig c;
  c.architecture = Architecture::kMlp;
  EXPECT_THROW(make_encoder(c, view("optical"), "enc", 1), SchemaError);
}

TEST(Encoders, ChannelMismatchIsSchemaError) {
  for (Architecture a : temporal_architectures()) {
    EncoderConfig c;
    c.architecture = a;
    auto enc = make_encoder(c, view("optical"), "enc", 1);
    EXPECT_THROW(enc->forward(Tensor::zeros({2, 12, 2}), Mode::kInfer), SchemaError) << to_string(a);
  }
}

TEST(Encoders, EmptySeriesIsRejected) {
  EXPECT_THROW(make_encoder(EncoderConfig{}, ViewSchema{"empty", true, 0, 2}, "enc", 1), DataError);
}

TEST(TempCnn, WrongLengthIsShapeError) {
  EncoderConfig c;
  c.architecture = Architecture::kTempCnn;
  auto enc = make_encoder(c, view("radar"), "enc", 1);
  EXPECT_THROW(enc->forward(Tensor::zeros({2, 10, 2}), Mode::kInfer), ShapeError);
}

TEST(EncoderConfig, InconsistentSettingsAreConfigErrors) {
  EncoderConfig even;
  even.kernel = 4;
  EXPECT_THROW(even.validate(), ConfigError);
  EncoderConfig heads;
  heads.heads = 5;  // 64 % 5 != 0
  EXPECT_THROW(heads.validate(), ConfigError);
  EncoderConfig drop;
  drop.dropout = 1.0;
  EXPECT_THROW(drop.validate(), ConfigError);
}

TEST(Architecture, NamesRoundTripCaseInsensitively) {
  for (Architecture a : {Architecture::kLstm, Architecture::kGru, Architecture::kTempCnn, Architecture::kTae,
                         Architecture::kLtae, Architecture::kMlp}) {
    EXPECT_EQ(parse_architecture(to_string(a)), a);
  }
  EXPECT_EQ(parse_architecture("tempcnn"), Architecture::kTempCnn);
  EXPECT_EQ(parse_architecture("L-TAE"), Architecture::kLtae);
  EXPECT_THROW(parse_architecture("transformer"), ConfigError);
  EXPECT_EQ(temporal_architectures().size(), 5u);
}

// ---- gradients -------------------------------------------------------------------------

class EncoderGradients : public ::testing::TestWithParam<Architecture> {};

TEST_P(EncoderGradients, MatchFiniteDifferencesOnTenBatches) {
  const Architecture a = GetParam();
  const ViewSchema schema = a == Architecture::kMlp ? ViewSchema{"static", false, 12, 3} : small_temporal();
  for (std::uint64_t i = 0; i < 10; ++i) {
    auto enc = make_encoder(small_config(a), schema, "enc", 20 + i);
    Tensor x = random_tensor(schema.temporal ? Shape{3, 4, 3} : Shape{3, 3}, 30 + i);
    std::vector<Tensor> leaves{x};
    for (const Parameter& p : enc->parameters()) leaves.push_back(p.tensor);
    const GradCheckReport r = grad_check([&] { return probe(enc->forward(x, Mode::kTrain)); }, leaves);
    EXPECT_TRUE(r.passed) << to_string(a) << " instance " << i << ": " << r.max_relative_error;
  }
}

INSTANTIATE_TEST_SUITE_P(All, EncoderGradients,
                         ::testing::Values(Architecture::kGru, Architecture::kLstm, Architecture::kTempCnn,
                                           Architecture::kTae, Architecture::kLtae, Architecture::kMlp),
                         [](const auto& info) { return std::string(to_string(info.param)); });

}  // namespace
}  // namespace mvl
