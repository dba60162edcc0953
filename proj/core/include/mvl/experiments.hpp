#pragma once

// Configuration-driven experiment runner: single cells, the full
// encoder x strategy grid with component variants, the reduced
// encoder-search protocol, single-view baselines and report emission.
//
// Run directory layout:
//   manifest.json     canonical config, fingerprint, planned cells
//   records.csv       one row per (cell, repetition); deterministic
//   timings.csv       wall-clock seconds per (cell, repetition)
//   checkpoints/      one MVLC file per (cell, repetition)
//   predictions/      test-set probabilities and metadata per (cell, repetition)
//   reports/          Markdown + CSV tables

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mvl/data.hpp"
#include "mvl/fusion.hpp"
#include "mvl/metrics.hpp"
#include "mvl/training.hpp"

namespace mvl {

enum class SelectionMetric { kKappa, kAverageAccuracy, kF1Macro };

std::string_view to_string(SelectionMetric m);
SelectionMetric parse_selection_metric(std::string_view name);

struct SyntheticSource {
  SynthSpec spec;
  std::uint64_t seed = 0;
};

struct ExperimentConfig {
  // Exactly one data source: an MVDS file or a synthetic generator.
  std::filesystem::path dataset;
  std::optional<SyntheticSource> synthetic;
  std::optional<Task> task;        // checked against the dataset when given
  std::vector<std::string> views;  // empty = every view of the dataset
  double test_fraction = 0.3;      // used only when no sample is flagged as test

  std::optional<Architecture> encoder;  // absent = "search"
  Strategy strategy = Strategy::kFeature;
  Component component = Component::kNone;
  std::optional<MergeKind> merge;
  double gamma = 0.3;
  EncoderConfig encoder_settings;

  std::size_t repetitions = 20;
  std::uint64_t seed_base = 0;
  TrainConfig train;
  SelectionMetric selection = SelectionMetric::kKappa;
  bool baselines = false;  // also run single-view baselines in grid/search
  std::vector<std::string> group_by = {"year", "continent"};
  std::size_t jobs = 1;
  std::filesystem::path output = "runs/default";

  // Throws ValidationError on illegal values or combinations.
  void validate() const;
};

// Parses the JSON document; unknown keys and ill-typed values raise
// ValidationError naming the offending key.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
// Canonical JSON (sorted keys, every field explicit). Round-trips through
// parse_config.
std::string canonical_config(const ExperimentConfig& config);
// FNV-1a 64 of the canonical form without the fields that cannot change a
// result ("output", "jobs"), as 16 hex digits.
std::string config_fingerprint(const ExperimentConfig& config);

struct Cell {
  Architecture encoder = Architecture::kGru;
  Strategy strategy = Strategy::kFeature;
  Component component = Component::kNone;

  std::string id() const;  // e.g. "gru-feature-gfusion"
  bool operator==(const Cell&) const = default;
};

// Component cells: G-Fusion and Multi-Loss on Feature, Decision and Hybrid.
std::vector<std::pair<Strategy, Component>> component_slots();

inline constexpr std::size_t kGridCells = 31;
inline constexpr std::size_t kSearchCells = 16;

// Planned cell counts; the runners assert these before training anything.
std::size_t planned_grid_cells();
std::size_t planned_search_cells();

struct RunRecord {
  std::string cell;
  std::string view;  // single-view baselines only
  std::string encoder;
  std::string strategy;
  std::string component;
  std::string fingerprint;
  std::size_t repetition = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::size_t parameters = 0;
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;
  double average_accuracy = 0.0;
  std::optional<double> kappa;
  double f1_macro = 0.0;
  std::optional<double> auc;
  double max_probability = 0.0;
  double entropy = 0.0;
  std::string checkpoint;   // relative to the run directory
  std::string predictions;  // relative to the run directory
  double train_seconds = 0.0;
  double infer_seconds = 0.0;
};

// Train/test parts restricted to the configured views.
struct PreparedData {
  Dataset train;
  Dataset test;
};
PreparedData prepare_data(const ExperimentConfig& config);

// Single-cell model specification derived from the config.
ModelSpec cell_spec(const ExperimentConfig& config, const Cell& cell, const std::vector<ViewSchema>& views,
                    std::size_t classes, std::uint64_t seed);

struct CellSummary {
  std::string cell;
  std::string encoder;
  std::string strategy;
  std::string component;
  std::size_t parameters = 0;
  std::size_t runs = 0;
  std::size_t failures = 0;
  double aa_mean = 0.0, aa_std = 0.0;
  std::optional<double> kappa_mean, kappa_std;
  double f1_mean = 0.0, f1_std = 0.0;
  std::optional<double> auc_mean, auc_std;
  double max_probability_mean = 0.0, max_probability_std = 0.0;
  double entropy_mean = 0.0, entropy_std = 0.0;
  double train_seconds_mean = 0.0;
  double infer_seconds_mean = 0.0;
};

// Mean and sample standard deviation over the successful repetitions of each
// cell, in first-appearance order; a single repetition has std 0.
std::vector<CellSummary> summarize(const std::vector<RunRecord>& records);
// Selection score of a summary (NaN when unavailable).
double selection_score(const CellSummary& summary, SelectionMetric metric);

struct RunResult {
  std::vector<Cell> cells;  // executed (or reused) cells in plan order
  std::vector<RunRecord> records;
  std::vector<RunRecord> baselines;
  std::optional<Architecture> selected_encoder;  // search protocol
  std::filesystem::path directory;
};

using ProgressFn = std::function<void(const std::string&)>;

// Trains and evaluates each cell `repetitions` times with seeds
// seed_base + r. A failing repetition is recorded and does not stop the rest.
std::vector<RunRecord> run_cells(const ExperimentConfig& config, const PreparedData& data,
                                 const std::vector<Cell>& cells, const std::filesystem::path& run_dir,
                                 const ProgressFn& progress = {});

// One cell (config.encoder, strategy, component).
RunResult run_single(const ExperimentConfig& config, const ProgressFn& progress = {});
// 25 encoder x strategy cells, then the 6 component cells with the best
// encoder of their strategy.
RunResult run_grid(const ExperimentConfig& config, const ProgressFn& progress = {});
// Phase 1: the 5 encoders under Input fusion. Phase 2: the other 4
// strategies and the 6 component cells with the selected encoder; the Input
// cell is reused from phase 1.
RunResult run_search(const ExperimentConfig& config, const ProgressFn& progress = {});

// One baseline per view, per encoder (static views: MLP only, once).
std::vector<RunRecord> single_view_baselines(const ExperimentConfig& config, const PreparedData& data,
                                             const std::vector<Architecture>& encoders,
                                             const std::filesystem::path& run_dir, const ProgressFn& progress = {});

// Winner among the summaries of `encoders` (ties: fewer parameters, then
// grid order). Throws DataError when no candidate has a usable score.
Architecture select_encoder(const std::vector<CellSummary>& summaries, SelectionMetric metric);

// ---- persistence and reports ----------------------------------------------

void write_records(const std::vector<RunRecord>& records, const std::filesystem::path& path);
void write_timings(const std::vector<RunRecord>& records, const std::filesystem::path& path);
std::vector<RunRecord> read_records(const std::filesystem::path& path);
// Merges timings.csv into records read from records.csv, when present.
void read_timings(std::vector<RunRecord>& records, const std::filesystem::path& path);

struct PredictionRow {
  SampleMeta meta;
  std::size_t label = 0;
  std::vector<double> probs;
};
void write_predictions(const std::vector<PredictionRow>& rows, const std::filesystem::path& path);
std::vector<PredictionRow> read_predictions(const std::filesystem::path& path);

// Writes reports/ under run_dir from records, their prediction files and the
// baselines. Throws DataError naming the field when a grouping needs metadata
// that some sample lacks.
void emit_reports(const std::filesystem::path& run_dir, const std::vector<RunRecord>& records,
                  const std::vector<RunRecord>& baselines, const std::vector<std::string>& group_by,
                  SelectionMetric metric = SelectionMetric::kKappa);

// Re-emits the reports of an existing run directory.
void rebuild_reports(const std::filesystem::path& run_dir);

// ---- parameter inspection ---------------------------------------------------

struct ParamRow {
  std::string item;                 // e.g. "GRU/optical"
  std::size_t count = 0;
  std::optional<std::size_t> target;  // reference figure, when one is reproduced
  std::string note;
};

// Encoder counts for the five canonical views, head and MLP counts, and the
// attention encoders' inter-view deltas, each with its reference target.
std::vector<ParamRow> parameter_table(const EncoderConfig& base = {});

}  // namespace mvl
