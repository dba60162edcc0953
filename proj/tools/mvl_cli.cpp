// mvl: command-line front end for dataset preparation, parameter inspection,
// training and the experiment protocols.
//
// Exit codes: 0 success, 1 rejected input (validation, configuration or
// schema errors, bad usage), 2 runtime failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "mvl/data.hpp"
#include "mvl/errors.hpp"
#include "mvl/experiments.hpp"

namespace {

using namespace mvl;

struct RunFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> reps;
  std::optional<std::size_t> jobs;
  std::string out;
  bool quiet = false;
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--config", f.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "Seed base (overrides the config)");
  cmd->add_option("--reps", f.reps, "Repetitions per cell (overrides the config)")->check(CLI::PositiveNumber);
  cmd->add_option("--jobs", f.jobs, "Parallel workers (overrides the config)")->check(CLI::PositiveNumber);
  cmd->add_option("--out", f.out, "Run directory (overrides the config)");
  cmd->add_flag("--quiet", f.quiet, "Do not print per-run progress");
}

ExperimentConfig resolve(const RunFlags& f) {
  ExperimentConfig c = load_config(f.config);
  if (f.seed) c.seed_base = *f.seed;
  if (f.reps) c.repetitions = *f.reps;
  if (f.jobs) c.jobs = *f.jobs;
  if (!f.out.empty()) c.output = f.out;
  c.validate();
  return c;
}

ProgressFn progress_printer(bool quiet) {
  if (quiet) return {};
  return [](const std::string& line) {
    std::cerr << line << "\n";
    std::cerr.flush();
  };
}

void print_summary(const RunResult& r) {
  std::printf("%-32s %5s %18s %18s %18s\n", "cell", "runs", "AA", "kappa", "F1 macro");
  for (const CellSummary& s : summarize(r.records)) {
    auto col = [&](double m, double sd) {
      char buf[48];
      std::snprintf(buf, sizeof buf, "%.4f +- %.4f", m, sd);
      return std::string(buf);
    };
    std::printf("%-32s %5zu %18s %18s %18s%s\n", s.cell.c_str(), s.runs, s.runs ? col(s.aa_mean, s.aa_std).c_str() : "-",
                s.kappa_mean ? col(*s.kappa_mean, s.kappa_std.value_or(0)).c_str() : "n/a",
                s.runs ? col(s.f1_mean, s.f1_std).c_str() : "-", s.failures ? "  (failures)" : "");
  }
  if (r.selected_encoder) std::printf("selected encoder: %s\n", std::string(to_string(*r.selected_encoder)).c_str());
  std::printf("run directory: %s\n", r.directory.string().c_str());
}

int print_params() {
  bool all_match = true;
  std::printf("%-36s %10s %10s  %s\n", "item", "count", "target", "status");
  for (const ParamRow& row : parameter_table()) {
    std::string status = "-";
    if (row.target) {
      status = *row.target == row.count ? "match" : "MISMATCH";
      all_match = all_match && *row.target == row.count;
    }
    if (!row.note.empty()) status += "  " + row.note;
    std::printf("%-36s %10zu %10s  %s\n", row.item.c_str(), row.count,
                row.target ? std::to_string(*row.target).c_str() : "-", status.c_str());
  }
  std::printf("\n%s\n", all_match ? "all reference targets matched" : "some reference targets were NOT matched");
  return 0;
}

int print_entropy(const std::string& dataset, const std::string& out) {
  const EntropyReport report = entropy_report(load_dataset(dataset));
  std::printf("%-12s %8s %10s %10s %10s\n", "view", "feature", "mean", "std", "median");
  std::string csv = "view,feature,mean,std,median\n";
  for (const auto& row : report.rows) {
    std::printf("%-12s %8zu %10.4f %10.4f %10.4f\n", row.view.c_str(), row.feature, row.mean, row.stddev, row.median);
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s,%zu,%.17g,%.17g,%.17g\n", row.view.c_str(), row.feature, row.mean, row.stddev,
                  row.median);
    csv += buf;
  }
  std::printf("\n%-12s %10s\n", "view", "mean");
  for (const auto& [view, mean] : report.view_means) std::printf("%-12s %10.4f\n", view.c_str(), mean);
  if (!out.empty()) {
    std::FILE* f = std::fopen(out.c_str(), "wb");
    if (!f) throw DataError("cannot write '" + out + "'");
    std::fwrite(csv.data(), 1, csv.size(), f);
    std::fclose(f);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Multi-view time-series classification: data tools, training and experiment protocols"};
  app.require_subcommand(1);

  std::string synth_kind = "complementary", synth_out;
  SynthSpec synth;
  std::uint64_t synth_seed = 0;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic dataset (MVDS)");
  synth_cmd->add_option("--kind", synth_kind, "complementary, redundant or noisy-view");
  synth_cmd->add_option("--train", synth.train_samples, "Training samples");
  synth_cmd->add_option("--test", synth.test_samples, "Test samples");
  synth_cmd->add_option("--steps", synth.steps, "Time steps");
  synth_cmd->add_option("--noise", synth.noise, "Noise standard deviation");
  synth_cmd->add_option("--seed", synth_seed, "Generator seed");
  synth_cmd->add_option("--out", synth_out, "Output file")->required();

  std::string import_manifest, import_out;
  auto* import_cmd = app.add_subcommand("import", "Convert CSV views and labels to MVDS");
  import_cmd->add_option("--config", import_manifest, "Import manifest (JSON)")->required()->check(CLI::ExistingFile);
  import_cmd->add_option("--out", import_out, "Output file")->required();

  auto* params_cmd = app.add_subcommand("inspect-params", "Print parameter counts against the reference targets");

  std::string entropy_data, entropy_out;
  auto* entropy_cmd = app.add_subcommand("entropy", "Spectral-entropy diagnostics per view and feature");
  entropy_cmd->add_option("dataset", entropy_data, "MVDS file")->required()->check(CLI::ExistingFile);
  entropy_cmd->add_option("--out", entropy_out, "Write the table as CSV");

  RunFlags train_flags, grid_flags, search_flags;
  auto* train_cmd = app.add_subcommand("train", "Train and evaluate one cell");
  add_run_flags(train_cmd, train_flags);
  auto* grid_cmd = app.add_subcommand("grid", "Full encoder x strategy grid with component cells");
  add_run_flags(grid_cmd, grid_flags);
  auto* search_cmd = app.add_subcommand("search", "Encoder search under Input fusion, then the strategy grid");
  add_run_flags(search_cmd, search_flags);

  std::string report_dir;
  auto* report_cmd = app.add_subcommand("report", "Re-emit the reports of a run directory");
  report_cmd->add_option("--out", report_dir, "Run directory")->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*synth_cmd) {
      synth.kind = parse_synth_kind(synth_kind);
      synth.validate();
      const Dataset d = synth_generate(synth, synth_seed);
      save_dataset(d, synth_out);
      std::printf("wrote %zu samples (%zu views) to %s\n", d.size(), d.schemas().size(), synth_out.c_str());
      return 0;
    }
    if (*import_cmd) {
      const ImportResult r = import_csv(import_manifest);
      for (const std::string& w : r.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
      save_dataset(r.data, import_out);
      std::printf("imported %zu samples, dropped %zu, wrote %s\n", r.data.size(), r.dropped, import_out.c_str());
      return 0;
    }
    if (*params_cmd) return print_params();
    if (*entropy_cmd) return print_entropy(entropy_data, entropy_out);
    if (*train_cmd) {
      print_summary(run_single(resolve(train_flags), progress_printer(train_flags.quiet)));
      return 0;
    }
    if (*grid_cmd) {
      print_summary(run_grid(resolve(grid_flags), progress_printer(grid_flags.quiet)));
      return 0;
    }
    if (*search_cmd) {
      print_summary(run_search(resolve(search_flags), progress_printer(search_flags.quiet)));
      return 0;
    }
    if (*report_cmd) {
      rebuild_reports(report_dir);
      std::printf("reports written to %s\n", (std::filesystem::path(report_dir) / "reports").string().c_str());
      return 0;
    }
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "invalid configuration: %s\n", e.what());
    return 1;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "invalid configuration: %s\n", e.what());
    return 1;
  } catch (const SchemaError& e) {
    std::fprintf(stderr, "schema error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
