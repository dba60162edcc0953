#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "mvl/errors.hpp"
#include "mvl/metrics.hpp"
#include "mvl/training.hpp"
#include "test_support.hpp"

namespace mvl {
namespace {

using testing::random_tensor;
using testing::tiny_dataset;

EncoderConfig narrow(Architecture a = Architecture::kGru) {
  EncoderConfig c;
  c.architecture = a;
  c.hidden = 6;
  c.embedding_dim = 4;
  c.conv_filters = 4;
  c.dense = 8;
  c.model_dim = 8;
  c.heads = 2;
  c.key_dim = 4;
  return c;
}

ModelSpec spec_for(const Dataset& d, Strategy s, Component c = Component::kNone, std::uint64_t seed = 3) {
  ModelSpec spec;
  spec.strategy = s;
  spec.component = c;
  spec.views = d.schemas();
  spec.encoder = narrow();
  spec.num_classes = d.num_classes();
  spec.seed = seed;
  return spec;
}

TrainConfig quick(std::uint64_t seed = 5, std::size_t epochs = 3) {
  TrainConfig c;
  c.batch_size = 16;
  c.max_epochs = epochs;
  c.seed = seed;
  return c;
}

// Label is the sign of the mean of view "a"; view "b" is a noisy copy.
Dataset separable(std::size_t n, std::uint64_t seed) {
  std::vector<ViewSchema> schemas = {ViewSchema{"a", true, 6, 2}, ViewSchema{"b", true, 6, 1}};
  Dataset d(Task::kBinary, schemas);
  Rng rng = Rng::derive(seed, "separable");
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t y = static_cast<std::uint32_t>(i % 2);
    const double level = y ? 1.0 : -1.0;
    std::vector<float> a(12), b(6);
    for (float& v : a) v = static_cast<float>(level + 0.3 * rng.normal());
    for (float& v : b) v = static_cast<float>(level + 0.5 * rng.normal());
    const std::vector<float> views[] = {a, b};
    SampleMeta meta;
    meta.id = "x" + std::to_string(i);
    d.add(views, y, meta);
  }
  return d;
}

// ---- class weights and loss -------------------------------------------------------------

TEST(ClassWeights, ReferenceExamples) {
  std::vector<std::uint32_t> skewed(1000, 0);
  std::fill(skewed.begin() + 900, skewed.end(), 1u);
  const auto w = class_weights(skewed, 2);
  EXPECT_NEAR(w[0], 0.2, 1e-12);
  EXPECT_NEAR(w[1], 1.8, 1e-12);
  const std::vector<std::uint32_t> balanced = {0, 1, 2, 0, 1, 2};
  for (double v : class_weights(balanced, 3)) EXPECT_DOUBLE_EQ(v, 1.0);
  const std::vector<std::uint32_t> small = {0, 1, 2, 2};
  const auto w3 = class_weights(small, 3);
  EXPECT_NEAR(w3[0], 1.2, 1e-12);
  EXPECT_NEAR(w3[1], 1.2, 1e-12);
  EXPECT_NEAR(w3[2], 0.6, 1e-12);
}

TEST(ClassWeights, SumToKAndRejectEmptyClasses) {
  const std::vector<std::uint32_t> labels = {0, 0, 0, 1, 2, 2, 3};
  const auto w = class_weights(labels, 4);
  double s = 0;
  for (double v : w) {
    EXPECT_GT(v, 0.0);
    s += v;
  }
  EXPECT_NEAR(s, 4.0, 1e-12);
  const std::vector<std::uint32_t> missing = {0, 0, 2};
  EXPECT_THROW(class_weights(missing, 3), DataError);
}

TEST(CrossEntropy, ReferenceExamples) {
  const std::size_t labels[] = {0, 1};
  const double unit[] = {1.0, 1.0};
  EXPECT_EQ(weighted_cross_entropy(Tensor::from({2, 2}, {1, 0, 0, 1}), labels, unit).item(), 0.0);
  EXPECT_NEAR(weighted_cross_entropy(Tensor::full({2, 2}, 0.5), labels, unit).item(), std::log(2.0), 1e-15);
  const double skew[] = {0.2, 1.8};
  EXPECT_NEAR(weighted_cross_entropy(Tensor::full({2, 2}, 0.5), labels, skew).item(), std::log(2.0), 1e-15);
}

TEST(CrossEntropy, UnitWeightsEqualThePlainLoss) {
  Tensor logits = random_tensor({5, 3}, 4, false, -2, 2);
  Tensor p = softmax(logits, 1);
  const std::size_t labels[] = {0, 2, 1, 1, 0};
  const double unit[] = {1.0, 1.0, 1.0};
  double plain = 0;
  for (std::size_t i = 0; i < 5; ++i) plain += -std::log(p.at({i, labels[i]}));
  EXPECT_DOUBLE_EQ(weighted_cross_entropy(p, labels, unit).item(), plain / 5);
}

TEST(CrossEntropy, ClampsZeroProbabilityAndRejectsBadLabels) {
  const std::size_t labels[] = {1};
  const double unit[] = {1.0, 1.0};
  EXPECT_NEAR(weighted_cross_entropy(Tensor::from({1, 2}, {1, 0}), labels, unit).item(), -std::log(1e-12), 1e-9);
  const std::size_t bad[] = {2};
  EXPECT_THROW(weighted_cross_entropy(Tensor::from({1, 2}, {1, 0}), bad, unit), DataError);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  for (std::uint64_t i = 0; i < 10; ++i) {
    Tensor logits = random_tensor({4, 3}, 100 + i, true, -2, 2);
    const std::size_t labels[] = {0, 1, 2, 1};
    const double w[] = {0.5, 1.0, 1.5};
    const GradCheckReport r =
        grad_check([&] { return weighted_cross_entropy(softmax(logits, 1), labels, w); }, std::span(&logits, 1));
    EXPECT_TRUE(r.passed) << r.max_relative_error;
  }
}

// ---- Adam ---------------------------------------------------------------------------------

TEST(Adam, FirstStepClosedForm) {
  Tensor theta = Tensor::scalar(0.0, true);
  Adam opt({{"theta", theta}});
  theta.grad_buffer()[0] = 1.0;
  opt.step();
  EXPECT_NEAR(theta.item(), -1e-3 / (1.0 + 1e-8), 1e-18);
  EXPECT_NEAR(theta.item(), -9.99999995e-4, 1e-11);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Tensor theta = Tensor::from({3}, {1, 2, 3}, true);
  Adam opt({{"theta", theta}});
  theta.grad_buffer();
  opt.step();
  EXPECT_EQ(theta.to_vector(), (std::vector<double>{1, 2, 3}));
}

TEST(Adam, ConstantGradientMovesMonotonically) {
  Tensor theta = Tensor::from({2}, {0, 0}, true);
  Adam opt({{"theta", theta}});
  std::vector<double> prev = theta.to_vector();
  for (int s = 0; s < 2; ++s) {
    opt.zero_grad();
    theta.grad_buffer()[0] = 0.7;
    theta.grad_buffer()[1] = -0.2;
    opt.step();
    EXPECT_LT(theta.data()[0], prev[0]);
    EXPECT_GT(theta.data()[1], prev[1]);
    prev = theta.to_vector();
  }
}

TEST(Adam, NonFiniteGradientNamesTheParameter) {
  Tensor theta = Tensor::scalar(0.0, true);
  Adam opt({{"encoder.weight", theta}});
  theta.grad_buffer()[0] = std::nan("");
  try {
    opt.step();
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.weight"), std::string::npos);
  }
}

// ---- early stopping ----------------------------------------------------------------------

TEST(EarlyStopping, PatienceFiveOnReferenceSequence) {
  EarlyStopping stop(5);
  const double losses[] = {1.0, 0.9, 0.95, 0.96, 0.97, 0.98, 0.99};
  std::size_t stopped_after = 0;
  for (std::size_t i = 0; i < 7; ++i) {
    stop.update(losses[i]);
    if (stop.should_stop()) {
      stopped_after = i + 1;
      break;
    }
  }
  EXPECT_EQ(stopped_after, 7u);
  EXPECT_EQ(stop.best_epoch(), 2u);
  EXPECT_EQ(stop.best_loss(), 0.9);
}

TEST(EarlyStopping, EqualLossIsNotAnImprovement) {
  EarlyStopping stop(2);
  EXPECT_TRUE(stop.update(1.0));
  EXPECT_FALSE(stop.update(1.0));
  EXPECT_FALSE(stop.update(1.0));
  EXPECT_TRUE(stop.should_stop());
}

TEST(EarlyStopping, MinDeltaRequiresAMargin) {
  EarlyStopping stop(5, 0.1);
  stop.update(1.0);
  EXPECT_FALSE(stop.update(0.95));
  EXPECT_TRUE(stop.update(0.85));
  EXPECT_THROW(EarlyStopping(0), ConfigError);
}

// ---- split ---------------------------------------------------------------------------------

TEST(ValidationSplit, CountsDisjointExhaustiveDeterministic) {
  const Dataset d = tiny_dataset(100, 1);
  auto [train_a, val_a] = validation_split(d, 0.1, 7);
  auto [train_b, val_b] = validation_split(d, 0.1, 7);
  EXPECT_EQ(train_a.size(), 90u);
  EXPECT_EQ(val_a.size(), 10u);
  EXPECT_TRUE(val_a == val_b);
  EXPECT_TRUE(train_a == train_b);
  std::multiset<std::string> ids;
  for (const auto& m : train_a.metas()) ids.insert(m.id);
  for (const auto& m : val_a.metas()) {
    EXPECT_EQ(ids.count(m.id), 0u);
    ids.insert(m.id);
  }
  std::multiset<std::string> all;
  for (const auto& m : d.metas()) all.insert(m.id);
  EXPECT_EQ(ids, all);
  EXPECT_THROW(validation_split(d, 1.0, 7), ConfigError);
  EXPECT_THROW(validation_split(d, 0.0, 7), ConfigError);
}

// ---- training loop --------------------------------------------------------------------------

TEST(Train, FirstStepDescendsOnTheTrainingBatch) {
  const Dataset d = tiny_dataset(32, 2);
  int descended = 0;
  const int trials = 20;
  for (int t = 0; t < trials; ++t) {
    ModelSpec spec = spec_for(d, Strategy::kFeature, Component::kNone, 100 + t);
    spec.encoder.dropout = 0.0;
    auto model = build_model(spec);
    std::vector<std::size_t> idx(d.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const Batch batch = make_batch(d, idx, spec.views);
    const std::vector<double> w = class_weights(d.labels(), 2);
    AdamConfig cfg;
    cfg.learning_rate = 1e-3;
    Adam opt(model->parameters(), cfg);
    Tensor before = model_loss(*model, model->forward(batch, Mode::kTrain), batch.labels, w);
    backward(before);
    opt.step();
    const double after = model_loss(*model, model->forward(batch, Mode::kTrain), batch.labels, w).item();
    if (after < before.item()) ++descended;
  }
  EXPECT_GE(descended, 19);  // at least 95% of trials
}

TEST(Train, HistoryIsBitReproducible) {
  const Dataset d = tiny_dataset(60, 3);
  auto run = [&] {
    auto model = build_model(spec_for(d, Strategy::kHybrid));
    TrainHistory h = train(*model, d, quick());
    return std::make_pair(h, predict(*model, d));
  };
  const auto [h1, p1] = run();
  const auto [h2, p2] = run();
  ASSERT_EQ(h1.epochs.size(), h2.epochs.size());
  for (std::size_t e = 0; e < h1.epochs.size(); ++e) {
    EXPECT_EQ(h1.epochs[e].train_loss, h2.epochs[e].train_loss);
    EXPECT_EQ(h1.epochs[e].validation_loss, h2.epochs[e].validation_loss);
  }
  EXPECT_EQ(p1, p2);
  EXPECT_EQ(h1.seed, 5u);
}

TEST(Train, RestoresTheBestValidationWeights) {
  const Dataset d = tiny_dataset(80, 4);
  auto model = build_model(spec_for(d, Strategy::kFeature));
  TrainConfig cfg = quick(9, 12);
  cfg.patience = 2;
  const TrainHistory h = train(*model, d, cfg);
  double min_loss = h.epochs.front().validation_loss;
  for (const auto& e : h.epochs) min_loss = std::min(min_loss, e.validation_loss);
  EXPECT_EQ(h.best_validation_loss, min_loss);
  EXPECT_EQ(h.epochs[h.best_epoch - 1].validation_loss, min_loss);
  // Re-evaluating the restored model on the same validation part reproduces the best loss.
  auto [train_part, val_part] = validation_split(d, cfg.validation_fraction, cfg.seed);
  const std::vector<double> w = class_weights(train_part.labels(), 2);
  EXPECT_DOUBLE_EQ(evaluate_loss(*model, val_part, w, cfg.batch_size), min_loss);
}

TEST(Train, SingleClassTrainingSetIsRejected) {
  Dataset d(Task::kBinary, {ViewSchema{"a", true, 4, 1}});
  for (int i = 0; i < 10; ++i) {
    const std::vector<float> v[] = {std::vector<float>(4, static_cast<float>(i))};
    d.add(v, 0, SampleMeta{});
  }
  ModelSpec spec = spec_for(d, Strategy::kInput);
  auto model = build_model(spec);
  EXPECT_THROW(train(*model, d, quick()), DataError);
}

TEST(Train, InvalidConfigurationIsRejected) {
  TrainConfig c;
  c.validation_fraction = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.patience = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Train, GammaZeroMultiLossReproducesThePlainRun) {
  const Dataset d = tiny_dataset(60, 5);
  for (Strategy s : {Strategy::kFeature, Strategy::kDecision, Strategy::kHybrid}) {
    auto plain = build_model(spec_for(d, s));
    ModelSpec ml = spec_for(d, s, Component::kMultiLoss);
    ml.gamma = 0.0;
    auto zero = build_model(ml);
    const TrainHistory a = train(*plain, d, quick());
    const TrainHistory b = train(*zero, d, quick());
    ASSERT_EQ(a.epochs.size(), b.epochs.size());
    for (std::size_t e = 0; e < a.epochs.size(); ++e) EXPECT_EQ(a.epochs[e].validation_loss, b.epochs[e].validation_loss);
    EXPECT_EQ(predict(*plain, d), predict(*zero, d)) << to_string(s);
  }
}

TEST(Train, EnsembleMembersTrainAsIsolatedSingleViewModels) {
  const Dataset d = tiny_dataset(60, 6);
  ModelSpec spec = spec_for(d, Strategy::kEnsemble, Component::kNone, 11);
  auto ensemble = build_model(spec);
  const TrainConfig cfg = quick(13);
  const TrainHistory h = train(*ensemble, d, cfg);
  ASSERT_EQ(h.members.size(), d.schemas().size());
  auto& ens = dynamic_cast<EnsembleModel&>(*ensemble);
  for (std::size_t v = 0; v < d.schemas().size(); ++v) {
    const ViewSchema& view = d.schemas()[v];
    auto alone = build_single_view_model(view, spec.encoder, 2, ensemble_member_seed(spec.seed, view.name));
    TrainConfig member = cfg;
    member.seed = ensemble_member_seed(cfg.seed, view.name);
    const std::string name = view.name;
    const Dataset single = d.select_views(std::span(&name, 1));
    train(*alone, single, member);
    EXPECT_EQ(predict(*alone, single), predict(*ens.members[v], single)) << view.name;
  }
}

TEST(Train, SeparableTwoViewDataReachesNinetyFivePercent) {
  const Dataset train_set = separable(400, 1), held_out = separable(200, 2);
  ModelSpec spec = spec_for(train_set, Strategy::kFeature);
  auto model = build_model(spec);
  TrainConfig cfg = quick(1, 50);
  cfg.batch_size = 64;
  train(*model, train_set, cfg);
  const auto probs = predict(*model, held_out);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < held_out.size(); ++i)
    correct += (probs[2 * i + 1] > probs[2 * i]) == (held_out.label(i) == 1);
  EXPECT_GE(static_cast<double>(correct) / held_out.size(), 0.95);
}

TEST(Predict, RowsAreProbabilityDistributions) {
  const Dataset d = tiny_dataset(20, 7);
  for (Strategy s : all_strategies()) {
    auto model = build_model(spec_for(d, s));
    const auto p = predict(*model, d, 7);
    ASSERT_EQ(p.size(), 40u);
    for (std::size_t i = 0; i < 20; ++i) EXPECT_NEAR(p[2 * i] + p[2 * i + 1], 1.0, 1e-9);
  }
}

// ---- checkpoints --------------------------------------------------------------------------

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() /
           ("mvl_ckpt_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    std::filesystem::create_directories(dir_);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }
  std::filesystem::path dir_;
};

TEST_F(CheckpointTest, RoundTripIsBitExact) {
  const Dataset d = tiny_dataset(40, 8);
  auto model = build_model(spec_for(d, Strategy::kHybrid));
  train(*model, d, quick());
  save_checkpoint(*model, dir_ / "m.mvlc");
  auto fresh = build_model(spec_for(d, Strategy::kHybrid, Component::kNone, 77));
  load_checkpoint(*fresh, dir_ / "m.mvlc");
  EXPECT_EQ(predict(*model, d), predict(*fresh, d));
}

TEST_F(CheckpointTest, StructuralMismatchAndCorruptionAreReported) {
  const Dataset d = tiny_dataset(20, 9);
  auto feature = build_model(spec_for(d, Strategy::kFeature));
  save_checkpoint(*feature, dir_ / "f.mvlc");
  auto decision = build_model(spec_for(d, Strategy::kDecision));
  EXPECT_THROW(load_checkpoint(*decision, dir_ / "f.mvlc"), FormatError);

  const auto size = std::filesystem::file_size(dir_ / "f.mvlc");
  std::filesystem::copy_file(dir_ / "f.mvlc", dir_ / "t.mvlc");
  std::filesystem::resize_file(dir_ / "t.mvlc", size - 8);
  EXPECT_THROW(load_checkpoint(*feature, dir_ / "t.mvlc"), TruncationError);

  std::ofstream(dir_ / "junk.mvlc") << "not a checkpoint at all";
  EXPECT_THROW(load_checkpoint(*feature, dir_ / "junk.mvlc"), FormatError);
}

TEST(CopyState, CopiesValuesBetweenIdenticalStructures) {
  const Dataset d = tiny_dataset(20, 10);
  auto a = build_model(spec_for(d, Strategy::kFeature, Component::kNone, 1));
  auto b = build_model(spec_for(d, Strategy::kFeature, Component::kNone, 2));
  EXPECT_NE(predict(*a, d), predict(*b, d));
  copy_state(*a, *b);
  EXPECT_EQ(predict(*a, d), predict(*b, d));
  auto c = build_model(spec_for(d, Strategy::kDecision));
  EXPECT_THROW(copy_state(*a, *c), ContractError);
}

}  // namespace
}  // namespace mvl
