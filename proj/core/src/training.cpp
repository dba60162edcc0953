#include "mvl/training.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "mvl/errors.hpp"

namespace mvl {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// Batch boundaries over n samples; a trailing batch of one sample joins the
// previous batch because batch normalization needs two samples.
std::vector<std::pair<std::size_t, std::size_t>> batch_bounds(std::size_t n, std::size_t batch_size) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) out.emplace_back(start, std::min(n, start + batch_size));
  if (out.size() > 1 && out.back().second - out.back().first == 1) {
    out[out.size() - 2].second = out.back().second;
    out.pop_back();
  }
  return out;
}

std::vector<Parameter> state_tensors(const Module& m) {
  std::vector<Parameter> all = m.parameters();
  for (Parameter& b : m.buffers()) all.push_back(std::move(b));
  return all;
}

std::vector<std::vector<double>> snapshot(const std::vector<Parameter>& state) {
  std::vector<std::vector<double>> out;
  out.reserve(state.size());
  for (const Parameter& p : state) out.push_back(p.tensor.to_vector());
  return out;
}

void restore(std::vector<Parameter>& state, const std::vector<std::vector<double>>& values) {
  for (std::size_t i = 0; i < state.size(); ++i) {
    auto dst = state[i].tensor.mutable_data();
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

TrainHistory train_single(MvlModel& model, const Dataset& data, const TrainConfig& config) {
  const auto start = Clock::now();
  const std::size_t k = model.spec().num_classes;
  if (data.num_classes() != k) throw ConfigError("model and dataset disagree on the number of classes");
  const auto counts = data.class_counts();
  if (std::count_if(counts.begin(), counts.end(), [](std::size_t c) { return c > 0; }) < 2) {
    throw DataError("training set holds a single class");
  }

  auto [train_part, val_part] = validation_split(data, config.validation_fraction, config.seed);
  if (train_part.size() < 2) throw DataError("training needs at least two samples after the validation split");
  const std::vector<double> weights = class_weights(train_part.labels(), k);

  const std::vector<ViewSchema>& views = model.spec().views;
  Adam optimizer(model.parameters(), config.adam);
  EarlyStopping stopper(config.patience, config.min_delta);
  std::vector<Parameter> state = state_tensors(model);
  std::vector<std::vector<double>> best = snapshot(state);

  TrainHistory history;
  history.seed = config.seed;
  Rng shuffler = Rng::derive(config.seed, "train.shuffle");
  std::vector<std::size_t> order(train_part.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto epoch_start = Clock::now();
    shuffle(order, shuffler);
    double loss_sum = 0.0;
    for (auto [lo, hi] : batch_bounds(order.size(), config.batch_size)) {
      std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      Batch batch = make_batch(train_part, idx, views);
      ForwardOutput out = model.forward(batch, Mode::kTrain);
      Tensor loss = model_loss(model, out, batch.labels, weights);
      backward(loss);
      optimizer.step();
      optimizer.zero_grad();
      loss_sum += loss.item() * static_cast<double>(hi - lo);
    }
    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = loss_sum / static_cast<double>(order.size());
    record.validation_loss = evaluate_loss(model, val_part, weights, config.batch_size);
    record.seconds = seconds_since(epoch_start);
    history.epochs.push_back(record);
    if (stopper.update(record.validation_loss)) best = snapshot(state);
    if (stopper.should_stop()) {
      history.stopped_early = true;
      break;
    }
  }
  restore(state, best);
  history.best_epoch = stopper.best_epoch();
  history.best_validation_loss = stopper.best_loss();
  history.seconds = seconds_since(start);
  return history;
}

}  // namespace

std::vector<double> class_weights(std::span<const std::uint32_t> labels, std::size_t classes) {
  std::vector<double> counts(classes, 0.0);
  for (std::uint32_t y : labels) {
    if (y >= classes) throw DataError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    counts[y] += 1.0;
  }
  double inverse_sum = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    if (counts[c] == 0.0) throw DataError("class " + std::to_string(c) + " has no training samples");
    inverse_sum += 1.0 / counts[c];
  }
  // Frequencies share the denominator N, which cancels.
  std::vector<double> w(classes);
  for (std::size_t c = 0; c < classes; ++c) w[c] = static_cast<double>(classes) * (1.0 / counts[c]) / inverse_sum;
  return w;
}

Tensor weighted_cross_entropy(const Tensor& probs, std::span<const std::size_t> labels, std::span<const double> weights) {
  if (probs.rank() != 2 || probs.dim(0) != labels.size()) {
    throw ShapeError("cross-entropy expects [B x K] probabilities and B labels, got " + shape_str(probs.shape()));
  }
  const std::size_t b = probs.dim(0), k = probs.dim(1);
  if (weights.size() != k) throw ShapeError("class weight count differs from K");
  if (b == 0) throw DataError("cross-entropy of an empty batch");
  auto p = probs.data();
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= k) throw DataError("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(k) + ")");
    total += weights[labels[i]] * -std::log(std::max(p[i * k + labels[i]], kProbabilityFloor));
  }
  std::vector<std::size_t> y(labels.begin(), labels.end());
  std::vector<double> w(weights.begin(), weights.end());
  return make_op({1}, {total / static_cast<double>(b)}, {probs},
                 [b, k, y = std::move(y), w = std::move(w)](std::span<const double> g, std::span<const Tensor> in) {
                   Tensor p = in[0];
                   auto pv = p.data();
                   auto gp = p.grad_buffer();
                   for (std::size_t i = 0; i < b; ++i) {
                     const double q = pv[i * k + y[i]];
                     if (q > kProbabilityFloor) gp[i * k + y[i]] -= g[0] * w[y[i]] / (static_cast<double>(b) * q);
                   }
                 });
}

Tensor multi_loss(const ForwardOutput& out, std::span<const std::size_t> labels, std::span<const double> weights,
                  double gamma) {
  if (out.view_probs.empty()) throw ConfigError("multi-loss needs per-view predictions");
  if (!(gamma >= 0.0)) throw ConfigError("multi-loss weight must be nonnegative");
  std::vector<Tensor> terms;
  for (const Tensor& p : out.view_probs) terms.push_back(weighted_cross_entropy(p, labels, weights));
  Tensor auxiliary = terms[0];
  for (std::size_t v = 1; v < terms.size(); ++v) auxiliary = add(auxiliary, terms[v]);
  return add(weighted_cross_entropy(out.probs, labels, weights), scale(auxiliary, gamma));
}

Tensor model_loss(const MvlModel& model, const ForwardOutput& out, std::span<const std::size_t> labels,
                  std::span<const double> weights) {
  if (model.spec().component == Component::kMultiLoss) return multi_loss(out, labels, weights, model.spec().gamma);
  return weighted_cross_entropy(out.probs, labels, weights);
}

// ---- Adam ------------------------------------------------------------------------------

Adam::Adam(std::vector<Parameter> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  for (const Parameter& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void Adam::step() {
  for (const Parameter& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + p.name + "'");
    }
  }
  ++step_;
  const double t = static_cast<double>(step_);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& tensor = params_[i].tensor;
    if (!tensor.has_grad()) continue;
    auto g = tensor.grad();
    auto w = tensor.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
      w[j] -= config_.learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (Parameter& p : params_) p.tensor.zero_grad();
}

// ---- early stopping ------------------------------------------------------------------------

EarlyStopping::EarlyStopping(std::size_t patience, double min_delta)
    : patience_(patience), min_delta_(min_delta), best_(std::numeric_limits<double>::infinity()) {
  if (patience == 0) throw ConfigError("patience must be at least 1");
  if (!(min_delta >= 0.0)) throw ConfigError("min_delta must be nonnegative");
}

bool EarlyStopping::update(double loss) {
  ++seen_;
  if (loss < best_ - min_delta_) {
    best_ = loss;
    best_epoch_ = seen_;
    stale_ = 0;
    return true;
  }
  ++stale_;
  return false;
}

// ---- training ------------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (batch_size < 2) throw ConfigError("batch size must be at least 2");
  if (max_epochs == 0) throw ConfigError("max_epochs must be at least 1");
  if (patience == 0) throw ConfigError("patience must be at least 1");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) throw ConfigError("validation fraction must lie in (0, 1)");
  if (!(min_delta >= 0.0)) throw ConfigError("min_delta must be nonnegative");
  if (!(adam.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
}

std::pair<Dataset, Dataset> validation_split(const Dataset& data, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("validation fraction must lie in (0, 1)");
  if (data.size() < 2) throw DataError("cannot split fewer than two samples");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::derive(seed, "train.validation");
  shuffle(order, rng);
  auto held = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(data.size())));
  held = std::clamp<std::size_t>(held, 1, data.size() - 1);
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(held));
  std::vector<std::size_t> rest(order.begin() + static_cast<std::ptrdiff_t>(held), order.end());
  std::sort(val.begin(), val.end());
  std::sort(rest.begin(), rest.end());
  return {data.subset(rest), data.subset(val)};
}

TrainHistory train(MvlModel& model, const Dataset& data, const TrainConfig& config) {
  config.validate();
  auto* ensemble = dynamic_cast<EnsembleModel*>(&model);
  if (ensemble == nullptr) return train_single(model, data, config);

  const auto start = Clock::now();
  TrainHistory history;
  history.seed = config.seed;
  for (std::size_t v = 0; v < ensemble->members.size(); ++v) {
    const std::string& view = model.spec().views[v].name;
    TrainConfig member = config;
    member.seed = ensemble_member_seed(config.seed, view);
    const std::string names[] = {view};
    history.members.push_back(train_single(*ensemble->members[v], data.select_views(names), member));
  }
  history.seconds = seconds_since(start);
  return history;
}

std::vector<double> predict(MvlModel& model, const Dataset& data, std::size_t batch_size) {
  std::vector<double> probs;
  probs.reserve(data.size() * model.spec().num_classes);
  std::vector<std::size_t> idx;
  for (std::size_t lo = 0; lo < data.size(); lo += batch_size) {
    const std::size_t hi = std::min(data.size(), lo + batch_size);
    idx.resize(hi - lo);
    std::iota(idx.begin(), idx.end(), lo);
    Batch batch = make_batch(data, idx, model.spec().views);
    Tensor p = model.forward(batch, Mode::kInfer).probs;
    probs.insert(probs.end(), p.data().begin(), p.data().end());
  }
  return probs;
}

double evaluate_loss(MvlModel& model, const Dataset& data, std::span<const double> weights, std::size_t batch_size) {
  if (data.empty()) throw DataError("loss of an empty dataset");
  double total = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t lo = 0; lo < data.size(); lo += batch_size) {
    const std::size_t hi = std::min(data.size(), lo + batch_size);
    idx.resize(hi - lo);
    std::iota(idx.begin(), idx.end(), lo);
    Batch batch = make_batch(data, idx, model.spec().views);
    Tensor p = model.forward(batch, Mode::kInfer).probs;
    total += weighted_cross_entropy(p, batch.labels, weights).item() * static_cast<double>(hi - lo);
  }
  return total / static_cast<double>(data.size());
}

// ---- checkpoints ---------------------------------------------------------------------------

void save_checkpoint(const Module& model, const std::filesystem::path& path) {
  json tensors = json::array();
  std::string payload;
  auto emit = [&](const std::vector<Parameter>& list, const char* kind) {
    for (const Parameter& p : list) {
      tensors.push_back({{"name", p.name}, {"kind", kind}, {"shape", p.tensor.shape()}});
      for (double x : p.tensor.data()) {
        const auto bits = std::bit_cast<std::uint64_t>(x);
        for (int i = 0; i < 8; ++i) payload.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
      }
    }
  };
  emit(model.parameters(), "parameter");
  emit(model.buffers(), "buffer");
  const std::string manifest = json{{"tensors", tensors}}.dump();

  std::string out = "MVLC";
  auto put = [&](std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  put(kCheckpointVersion, 4);
  put(manifest.size(), 8);
  out += manifest;
  out += payload;
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw DataError("cannot write '" + path.string() + "'");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
}

void load_checkpoint(Module& model, const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  auto get = [&](std::size_t at, int n) {
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
    return v;
  };
  if (bytes.size() < 16 || bytes.compare(0, 4, "MVLC") != 0) throw FormatError("'" + path.string() + "' is not an MVLC checkpoint");
  if (get(4, 4) != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
  const std::uint64_t manifest_bytes = get(8, 8);
  if (bytes.size() - 16 < manifest_bytes) throw TruncationError("checkpoint manifest is truncated");
  json manifest;
  try {
    manifest = json::parse(bytes.substr(16, manifest_bytes));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint manifest is malformed: ") + e.what());
  }

  std::vector<Parameter> state = state_tensors(model);
  const json& entries = manifest.at("tensors");
  if (entries.size() != state.size()) throw FormatError("checkpoint tensor count differs from the model");
  std::size_t offset = 16 + manifest_bytes;
  for (std::size_t i = 0; i < state.size(); ++i) {
    const json& e = entries[i];
    if (e.at("name").get<std::string>() != state[i].name || e.at("shape").get<Shape>() != state[i].tensor.shape()) {
      throw FormatError("checkpoint entry '" + e.at("name").get<std::string>() + "' does not match '" + state[i].name + "'");
    }
    const std::size_t n = state[i].tensor.numel();
    if (bytes.size() < offset + 8 * n) throw TruncationError("checkpoint payload is truncated");
    auto dst = state[i].tensor.mutable_data();
    for (std::size_t j = 0; j < n; ++j) dst[j] = std::bit_cast<double>(get(offset + 8 * j, 8));
    offset += 8 * n;
  }
  if (offset != bytes.size()) throw FormatError("checkpoint has trailing bytes");
}

void copy_state(const Module& from, Module& to) {
  const std::vector<Parameter> src = state_tensors(from);
  std::vector<Parameter> dst = state_tensors(to);
  if (src.size() != dst.size()) throw ContractError("modules differ in structure");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].tensor.shape() != dst[i].tensor.shape()) {
      throw ContractError("shape mismatch copying '" + src[i].name + "' into '" + dst[i].name + "'");
    }
    auto d = dst[i].tensor.mutable_data();
    std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), d.begin());
  }
}

}  // namespace mvl
