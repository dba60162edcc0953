#pragma once

// Multi-view datasets: in-memory container, the "MVDS" binary format, CSV
// ingestion, derived views, temporal resampling, spectral-entropy diagnostics
// and synthetic generators.
//
// Values are stored as 32-bit floats and widened to 64 bits when a batch is
// assembled, so a save/load round trip is bit-exact.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mvl/encoders.hpp"
#include "mvl/fusion.hpp"

namespace mvl {

enum class Task { kBinary, kMulticrop };

std::string_view to_string(Task task);
Task parse_task(std::string_view name);
// 2 for binary, 10 for multicrop.
std::size_t task_classes(Task task);

struct SampleMeta {
  std::string id;
  std::string country;
  std::string continent;
  int year = 0;
  double latitude = 0.0;
  double longitude = 0.0;
  bool is_test = false;

  bool operator==(const SampleMeta&) const = default;
};

class Dataset {
 public:
  Dataset() = default;
  Dataset(Task task, std::vector<ViewSchema> schemas);

  Task task() const { return task_; }
  std::size_t num_classes() const { return task_classes(task_); }
  const std::vector<ViewSchema>& schemas() const { return schemas_; }
  std::size_t size() const { return labels_.size(); }
  bool empty() const { return labels_.empty(); }

  // Throws SchemaError for an unknown view.
  std::size_t view_index(std::string_view name) const;
  const ViewSchema& schema(std::string_view name) const { return schemas_[view_index(name)]; }

  // Appends one sample; `views` follows schema order, each of sample_size().
  void add(std::span<const std::vector<float>> views, std::uint32_t label, SampleMeta meta);

  std::span<const float> values(std::size_t view, std::size_t sample) const;
  const std::vector<float>& view_block(std::size_t view) const { return values_[view]; }
  std::uint32_t label(std::size_t sample) const { return labels_[sample]; }
  const std::vector<std::uint32_t>& labels() const { return labels_; }
  const SampleMeta& meta(std::size_t sample) const { return meta_[sample]; }
  const std::vector<SampleMeta>& metas() const { return meta_; }

  Dataset subset(std::span<const std::size_t> indices) const;
  // Keeps only the named views, in the given order.
  Dataset select_views(std::span<const std::string> names) const;
  // Partition by the is_test flag.
  std::pair<Dataset, Dataset> by_test_flag() const;
  std::vector<std::size_t> class_counts() const;

  bool operator==(const Dataset&) const = default;

 private:
  friend Dataset load_dataset(const std::filesystem::path& path);

  Task task_ = Task::kBinary;
  std::vector<ViewSchema> schemas_;
  std::vector<std::vector<float>> values_;  // per view, sample-major
  std::vector<std::uint32_t> labels_;
  std::vector<SampleMeta> meta_;
};

// Gathers `indices` into a batch whose views follow `views` (model order).
// Throws SchemaError when a view is missing or its layout differs.
Batch make_batch(const Dataset& data, std::span<const std::size_t> indices, std::span<const ViewSchema> views);

// ---- MVDS container ----------------------------------------------------------

inline constexpr std::uint32_t kDatasetFormatVersion = 1;

void save_dataset(const Dataset& data, const std::filesystem::path& path);
// Throws FormatError on a bad header or inconsistent manifest and
// TruncationError when the file ends before a declared block does.
Dataset load_dataset(const std::filesystem::path& path);

// ---- CSV interchange ---------------------------------------------------------

struct ImportResult {
  Dataset data;
  std::size_t dropped = 0;  // labelled samples missing at least one view
  std::vector<std::string> warnings;
};

// Reads a JSON manifest naming the task, the views (with their CSV files) and
// the label file; relative file names resolve against the manifest directory.
ImportResult import_csv(const std::filesystem::path& manifest);

// ---- derived views and diagnostics -------------------------------------------

// Band positions of red and near-infrared in the 11-band optical view.
inline constexpr std::size_t kRedBand = 2;
inline constexpr std::size_t kNirBand = 6;

// optical is [T x channels] row-major; returns T values of
// (NIR - RED) / (NIR + RED), 0 where the denominator is 0.
std::vector<double> compute_ndvi(std::span<const double> optical, std::size_t channels,
                                 std::size_t red_index = kRedBand, std::size_t nir_index = kNirBand);

// series is [T_raw x D] row-major with one timestamp per row, in days since
// the start of the season year, [0, 365]. Returns [12 x D]: per-month means,
// gaps filled by linear interpolation between the nearest observed months,
// leading/trailing gaps by the nearest observed month.
std::vector<double> resample_monthly(std::span<const double> series, std::size_t width,
                                     std::span<const double> days);

// Normalized Shannon entropy of the power spectrum of the demeaned series over
// the positive-frequency bins 1..floor(T/2). T >= 4. Constant series give 0.
double spectral_entropy(std::span<const double> series);

struct EntropyReport {
  struct Row {
    std::string view;
    std::size_t feature;
    double mean;
    double stddev;
    double median;
  };
  std::vector<Row> rows;  // one per (temporal view, feature)
  std::vector<std::pair<std::string, double>> view_means;
};

// Per-sample, per-feature spectral entropy summarized per (view, feature).
EntropyReport entropy_report(const Dataset& data);

// ---- synthetic generators ----------------------------------------------------

enum class SynthKind { kComplementary, kRedundant, kNoisyView };

std::string_view to_string(SynthKind kind);
SynthKind parse_synth_kind(std::string_view name);

struct SynthSpec {
  SynthKind kind = SynthKind::kComplementary;
  std::size_t train_samples = 2000;
  std::size_t test_samples = 600;
  std::size_t steps = 12;
  double noise = 0.3;

  void validate() const;
};

// Deterministic given the seed. Samples carry is_test flags and metadata
// (three years, several continents and countries, coordinates).
//   complementary  optical encodes bit 1 as sinusoid phase, radar encodes
//                  bit 2 as amplitude, label = bit1 XOR bit2.
//   redundant      every canonical view carries the label.
//   noisy-view     optical and radar carry the label, weather is pure noise.
Dataset synth_generate(const SynthSpec& spec, std::uint64_t seed);

// Seeded split stratified by class; every class with at least two samples
// lands in both parts.
std::pair<Dataset, Dataset> split(const Dataset& data, double test_fraction, std::uint64_t seed);

}  // namespace mvl
