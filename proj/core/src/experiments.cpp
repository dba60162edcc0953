#include "mvl/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "mvl/errors.hpp"

namespace mvl {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed(double v, int digits = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// ---- JSON field readers ------------------------------------------------------

[[noreturn]] void bad_key(const std::string& key, const std::string& what) {
  throw ValidationError("config key '" + key + "' " + what);
}

void reject_unknown(const json& obj, std::initializer_list<std::string_view> known, const std::string& prefix) {
  if (!obj.is_object()) bad_key(prefix.empty() ? "<root>" : prefix.substr(0, prefix.size() - 1), "must be an object");
  for (const auto& item : obj.items()) {
    if (std::find(known.begin(), known.end(), item.key()) == known.end()) bad_key(prefix + item.key(), "is not recognized");
  }
}

const json* field(const json& obj, const char* key) {
  auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

void read_count(const json& obj, const std::string& prefix, const char* key, std::size_t& out) {
  if (const json* v = field(obj, key)) {
    if (!v->is_number_unsigned()) bad_key(prefix + key, "must be a nonnegative integer");
    out = v->get<std::size_t>();
  }
}

void read_u64(const json& obj, const std::string& prefix, const char* key, std::uint64_t& out) {
  if (const json* v = field(obj, key)) {
    if (!v->is_number_unsigned()) bad_key(prefix + key, "must be a nonnegative integer");
    out = v->get<std::uint64_t>();
  }
}

void read_real(const json& obj, const std::string& prefix, const char* key, double& out) {
  if (const json* v = field(obj, key)) {
    if (!v->is_number()) bad_key(prefix + key, "must be a number");
    out = v->get<double>();
    if (!std::isfinite(out)) bad_key(prefix + key, "must be finite");
  }
}

void read_bool(const json& obj, const std::string& prefix, const char* key, bool& out) {
  if (const json* v = field(obj, key)) {
    if (!v->is_boolean()) bad_key(prefix + key, "must be true or false");
    out = v->get<bool>();
  }
}

std::optional<std::string> read_string(const json& obj, const std::string& prefix, const char* key) {
  const json* v = field(obj, key);
  if (!v) return std::nullopt;
  if (!v->is_string()) bad_key(prefix + key, "must be a string");
  return v->get<std::string>();
}

std::vector<std::string> read_strings(const json& obj, const char* key) {
  const json* v = field(obj, key);
  if (!v) return {};
  if (!v->is_array()) bad_key(key, "must be an array of strings");
  std::vector<std::string> out;
  for (const json& e : *v) {
    if (!e.is_string()) bad_key(key, "must be an array of strings");
    out.push_back(e.get<std::string>());
  }
  return out;
}

// Runs a name parser, reporting its ConfigError as a ValidationError on `key`.
template <class Parse>
auto parse_named(const std::string& key, const std::string& value, Parse parse) {
  try {
    return parse(value);
  } catch (const ConfigError& e) {
    bad_key(key, std::string("has an invalid value: ") + e.what());
  }
}

json config_json(const ExperimentConfig& c) {
  json j;
  j["dataset"] = c.dataset.generic_string();
  if (c.synthetic) {
    j["synthetic"] = {{"kind", std::string(to_string(c.synthetic->spec.kind))},
                      {"train_samples", c.synthetic->spec.train_samples},
                      {"test_samples", c.synthetic->spec.test_samples},
                      {"steps", c.synthetic->spec.steps},
                      {"noise", c.synthetic->spec.noise},
                      {"seed", c.synthetic->seed}};
  } else {
    j["synthetic"] = nullptr;
  }
  j["task"] = c.task ? json(std::string(to_string(*c.task))) : json(nullptr);
  j["views"] = c.views;
  j["test_fraction"] = c.test_fraction;
  j["encoder"] = c.encoder ? lower(to_string(*c.encoder)) : std::string("search");
  j["strategy"] = lower(to_string(c.strategy));
  j["component"] = std::string(to_string(c.component));
  j["merge"] = c.merge ? json(std::string(to_string(*c.merge))) : json(nullptr);
  j["gamma"] = c.gamma;
  const EncoderConfig& e = c.encoder_settings;
  j["encoder_settings"] = {{"hidden", e.hidden},       {"layers", e.layers},
                           {"embedding_dim", e.embedding_dim},
                           {"kernel", e.kernel},       {"conv_filters", e.conv_filters},
                           {"conv_blocks", e.conv_blocks},
                           {"dense", e.dense},         {"model_dim", e.model_dim},
                           {"heads", e.heads},         {"key_dim", e.key_dim},
                           {"ltae_split_values", e.ltae_split_values},
                           {"dropout", e.dropout}};
  j["repetitions"] = c.repetitions;
  j["seed_base"] = c.seed_base;
  const TrainConfig& t = c.train;
  j["train"] = {{"batch_size", t.batch_size},
                {"max_epochs", t.max_epochs},
                {"patience", t.patience},
                {"min_delta", t.min_delta},
                {"validation_fraction", t.validation_fraction},
                {"learning_rate", t.adam.learning_rate},
                {"beta1", t.adam.beta1},
                {"beta2", t.adam.beta2},
                {"eps", t.adam.eps}};
  j["selection"] = std::string(to_string(c.selection));
  j["baselines"] = c.baselines;
  j["group_by"] = c.group_by;
  j["jobs"] = c.jobs;
  j["output"] = c.output.generic_string();
  return j;
}

std::string fnv_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---- CSV helpers -------------------------------------------------------------

std::string csv_cell(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else if (c == '\n' || c == '\r') out += ' ';
    else out += c;
  }
  return out + "\"";
}

std::vector<std::string> parse_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cell += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cell += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(std::move(cell));
      cell.clear();
    } else if (c != '\r') {
      cell += c;
    }
  }
  cells.push_back(std::move(cell));
  return cells;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name, const std::filesystem::path& path) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw FormatError("'" + path.string() + "' lacks column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }
};

CsvTable read_csv_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw FormatError("'" + path.string() + "' is empty");
  t.header = parse_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    t.rows.push_back(parse_csv_line(line));
    if (t.rows.back().size() != t.header.size()) {
      throw FormatError("'" + path.string() + "' row " + std::to_string(t.rows.size()) + " has the wrong column count");
    }
  }
  return t;
}

double to_double(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw FormatError("not a number: '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw FormatError("not a number: '" + s + "'");
  }
}

std::uint64_t to_u64(const std::string& s) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used != s.size()) throw FormatError("not an integer: '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw FormatError("not an integer: '" + s + "'");
  }
}

std::optional<double> opt_double(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return to_double(s);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// ---- statistics ----------------------------------------------------------------

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd r;
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return r;
}

std::string pm(double mean, double std, int digits = 4) { return fixed(mean, digits) + " ± " + fixed(std, digits); }

// ---- run helpers ---------------------------------------------------------------

Cell cell_of(Architecture a, Strategy s, Component c = Component::kNone) { return Cell{a, s, c}; }

std::vector<Cell> main_grid_cells() {
  std::vector<Cell> cells;
  for (Architecture a : temporal_architectures())
    for (Strategy s : all_strategies()) cells.push_back(cell_of(a, s));
  return cells;
}

std::vector<ViewSchema> schemas_of(const Dataset& d) { return d.schemas(); }

void validate_cells(const ExperimentConfig& config, const std::vector<Cell>& cells) {
  std::vector<ViewSchema> placeholder = {ViewSchema{"a", true, 12, 1}, ViewSchema{"b", true, 12, 1}};
  for (const Cell& cell : cells) {
    try {
      cell_spec(config, cell, placeholder, 2, 0).validate();
    } catch (const ConfigError& e) {
      throw ValidationError("cell " + cell.id() + " is illegal: " + e.what());
    }
  }
}

std::string record_stem(const std::string& cell, std::size_t rep) { return cell + "-r" + std::to_string(rep); }

void prepare_run_dir(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "checkpoints");
  std::filesystem::create_directories(dir / "predictions");
  std::filesystem::create_directories(dir / "reports");
}

std::vector<PredictionRow> prediction_rows(const Dataset& test, const std::vector<double>& probs) {
  const std::size_t k = test.num_classes();
  std::vector<PredictionRow> rows(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    rows[i].meta = test.meta(i);
    rows[i].label = test.label(i);
    rows[i].probs.assign(probs.begin() + static_cast<std::ptrdiff_t>(i * k),
                         probs.begin() + static_cast<std::ptrdiff_t>((i + 1) * k));
  }
  return rows;
}

// Trains, evaluates and persists one model; fills the metric fields of `rec`.
void execute(MvlModel& model, const PreparedData& data, const TrainConfig& train_config,
             const std::filesystem::path& run_dir, RunRecord& rec) {
  rec.parameters = model.param_count();
  TrainHistory history = train(model, data.train, train_config);
  rec.train_seconds = history.seconds;
  rec.epochs = history.epochs.size();
  rec.best_epoch = history.best_epoch;
  if (!history.members.empty()) {
    rec.epochs = 0;
    for (const TrainHistory& m : history.members) rec.epochs = std::max(rec.epochs, m.epochs.size());
  }
  const auto start = Clock::now();
  const std::vector<double> probs = predict(model, data.test, train_config.batch_size);
  rec.infer_seconds = std::chrono::duration<double>(Clock::now() - start).count();

  const std::vector<std::size_t> y(data.test.labels().begin(), data.test.labels().end());
  const MetricsReport report = evaluate(probs, y, data.test.num_classes());
  rec.average_accuracy = report.average_accuracy;
  rec.kappa = report.kappa;
  rec.f1_macro = report.f1.macro;
  rec.auc = report.auc;
  rec.max_probability = report.uncertainty.max_probability;
  rec.entropy = report.uncertainty.entropy;

  const std::string stem = record_stem(rec.cell, rec.repetition);
  rec.checkpoint = "checkpoints/" + stem + ".mvlc";
  rec.predictions = "predictions/" + stem + ".csv";
  save_checkpoint(model, run_dir / rec.checkpoint);
  write_predictions(prediction_rows(data.test, probs), run_dir / rec.predictions);
  rec.ok = true;
}

// Runs the jobs on up to `jobs` worker threads; each job owns its output slot.
void run_parallel(std::vector<std::function<void()>>& work, std::size_t jobs) {
  const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, work.size()));
  if (workers == 1) {
    for (auto& w : work) w();
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < work.size(); i = next++) work[i]();
    });
  }
}

json manifest_json(const ExperimentConfig& config, const std::string& protocol, const RunResult& result) {
  json j;
  j["protocol"] = protocol;
  j["config"] = json::parse(canonical_config(config));
  j["fingerprint"] = config_fingerprint(config);
  std::vector<std::string> cells;
  for (const Cell& c : result.cells) cells.push_back(c.id());
  j["cells"] = cells;
  std::vector<std::uint64_t> seeds;
  for (std::size_t r = 0; r < config.repetitions; ++r) seeds.push_back(config.seed_base + r);
  j["seeds"] = seeds;
  j["selected_encoder"] = result.selected_encoder ? json(lower(to_string(*result.selected_encoder))) : json(nullptr);
  return j;
}

void finish_run(const ExperimentConfig& config, const std::string& protocol, RunResult& result) {
  write_text(result.directory / "manifest.json", manifest_json(config, protocol, result).dump(2) + "\n");
  write_records(result.records, result.directory / "records.csv");
  write_timings(result.records, result.directory / "timings.csv");
  if (!result.baselines.empty()) {
    write_records(result.baselines, result.directory / "baselines.csv");
    write_timings(result.baselines, result.directory / "baseline_timings.csv");
  }
  emit_reports(result.directory, result.records, result.baselines, config.group_by, config.selection);
}

// ---- report helpers ------------------------------------------------------------

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

void write_table(const Table& t, const std::filesystem::path& stem, const std::string& title) {
  std::string csv;
  for (std::size_t i = 0; i < t.header.size(); ++i) csv += (i ? "," : "") + csv_cell(t.header[i]);
  csv += "\n";
  for (const auto& row : t.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) csv += (i ? "," : "") + csv_cell(row[i]);
    csv += "\n";
  }
  write_text(stem.string() + ".csv", csv);

  std::string md = "# " + title + "\n\n|";
  for (const auto& h : t.header) md += " " + h + " |";
  md += "\n|";
  for (std::size_t i = 0; i < t.header.size(); ++i) md += " --- |";
  md += "\n";
  for (const auto& row : t.rows) {
    md += "|";
    for (const auto& c : row) md += " " + c + " |";
    md += "\n";
  }
  write_text(stem.string() + ".md", md);
}

std::optional<std::string> group_key(const SampleMeta& m, const std::string& field) {
  if (field == "year") return m.year == 0 ? std::nullopt : std::optional<std::string>(std::to_string(m.year));
  if (field == "continent") return m.continent.empty() ? std::nullopt : std::optional<std::string>(m.continent);
  if (field == "country") return m.country.empty() ? std::nullopt : std::optional<std::string>(m.country);
  throw ValidationError("unknown grouping field '" + field + "'");
}

const std::set<std::string>& known_groupings() {
  static const std::set<std::string> g = {"year", "continent", "country"};
  return g;
}

struct Loaded {
  std::vector<std::size_t> labels;
  std::vector<double> probs;
  std::vector<SampleMeta> metas;
  std::size_t classes = 0;
};

Loaded load_predictions(const std::filesystem::path& run_dir, const RunRecord& rec) {
  Loaded l;
  for (PredictionRow& row : read_predictions(run_dir / rec.predictions)) {
    l.classes = row.probs.size();
    l.labels.push_back(row.label);
    l.probs.insert(l.probs.end(), row.probs.begin(), row.probs.end());
    l.metas.push_back(std::move(row.meta));
  }
  return l;
}

std::string opt_text(const std::optional<double>& mean, const std::optional<double>& std) {
  if (!mean) return "n/a";
  return pm(*mean, std.value_or(0.0));
}

std::string opt_csv(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

}  // namespace

// ---- config -----------------------------------------------------------------------

std::string_view to_string(SelectionMetric m) {
  switch (m) {
    case SelectionMetric::kKappa:
      return "kappa";
    case SelectionMetric::kAverageAccuracy:
      return "aa";
    case SelectionMetric::kF1Macro:
      return "f1";
  }
  return "kappa";
}

SelectionMetric parse_selection_metric(std::string_view name) {
  const std::string n = lower(name);
  if (n == "kappa") return SelectionMetric::kKappa;
  if (n == "aa") return SelectionMetric::kAverageAccuracy;
  if (n == "f1") return SelectionMetric::kF1Macro;
  throw ConfigError("unknown selection metric '" + std::string(name) + "' (expected kappa, aa or f1)");
}

void ExperimentConfig::validate() const {
  if (dataset.empty() == !synthetic.has_value()) {
    throw ValidationError("config needs exactly one of 'dataset' or 'synthetic'");
  }
  if (synthetic) {
    try {
      synthetic->spec.validate();
    } catch (const ConfigError& e) {
      throw ValidationError(std::string("config key 'synthetic': ") + e.what());
    }
  }
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ValidationError("config key 'test_fraction' must lie in (0, 1)");
  if (repetitions == 0) throw ValidationError("config key 'repetitions' must be at least 1");
  if (jobs == 0) throw ValidationError("config key 'jobs' must be at least 1");
  if (!(gamma >= 0.0)) throw ValidationError("config key 'gamma' must be nonnegative");
  if (encoder && *encoder == Architecture::kMlp) {
    throw ValidationError("config key 'encoder' must name a temporal architecture (MLP is used for static views)");
  }
  if (!component_allowed(strategy, component)) {
    throw ValidationError("component " + std::string(to_string(component)) + " is not allowed with " +
                          std::string(to_string(strategy)) + " fusion (Feature, Decision or Hybrid only)");
  }
  std::set<std::string> seen;
  for (const std::string& v : views) {
    if (!seen.insert(v).second) throw ValidationError("config key 'views' lists '" + v + "' twice");
  }
  for (const std::string& g : group_by) {
    if (!known_groupings().count(g)) {
      throw ValidationError("config key 'group_by' has unknown field '" + g + "' (expected year, continent or country)");
    }
  }
  try {
    encoder_settings.validate();
  } catch (const ConfigError& e) {
    throw ValidationError(std::string("config key 'encoder_settings': ") + e.what());
  }
  try {
    TrainConfig t = train;
    t.validate();
  } catch (const ConfigError& e) {
    throw ValidationError(std::string("config key 'train': ") + e.what());
  }
  validate_cells(*this, {cell_of(encoder.value_or(Architecture::kGru), strategy, component)});
}

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("config is not valid JSON: ") + e.what());
  }
  reject_unknown(j,
                 {"dataset", "synthetic", "task", "views", "test_fraction", "encoder", "strategy", "component", "merge",
                  "gamma", "encoder_settings", "repetitions", "seed_base", "train", "selection", "baselines", "group_by",
                  "jobs", "output"},
                 "");
  ExperimentConfig c;
  if (auto s = read_string(j, "", "dataset")) c.dataset = *s;
  if (const json* s = field(j, "synthetic"); s && !s->is_null()) {
    reject_unknown(*s, {"kind", "train_samples", "test_samples", "steps", "noise", "seed"}, "synthetic.");
    SyntheticSource src;
    if (auto k = read_string(*s, "synthetic.", "kind"))
      src.spec.kind = parse_named("synthetic.kind", *k, [](const std::string& v) { return parse_synth_kind(v); });
    read_count(*s, "synthetic.", "train_samples", src.spec.train_samples);
    read_count(*s, "synthetic.", "test_samples", src.spec.test_samples);
    read_count(*s, "synthetic.", "steps", src.spec.steps);
    read_real(*s, "synthetic.", "noise", src.spec.noise);
    read_u64(*s, "synthetic.", "seed", src.seed);
    c.synthetic = src;
  }
  if (const json* t = field(j, "task"); t && !t->is_null()) {
    if (!t->is_string()) bad_key("task", "must be a string");
    c.task = parse_named("task", t->get<std::string>(), [](const std::string& v) { return parse_task(v); });
  }
  c.views = read_strings(j, "views");
  read_real(j, "", "test_fraction", c.test_fraction);
  if (auto e = read_string(j, "", "encoder")) {
    if (lower(*e) == "search") {
      c.encoder.reset();
    } else {
      c.encoder = parse_named("encoder", *e, [](const std::string& v) { return parse_architecture(v); });
    }
  }
  if (auto s = read_string(j, "", "strategy"))
    c.strategy = parse_named("strategy", *s, [](const std::string& v) { return parse_strategy(v); });
  if (auto s = read_string(j, "", "component"))
    c.component = parse_named("component", *s, [](const std::string& v) { return parse_component(v); });
  if (const json* m = field(j, "merge"); m && !m->is_null()) {
    if (!m->is_string()) bad_key("merge", "must be a string or null");
    c.merge = parse_named("merge", m->get<std::string>(), [](const std::string& v) { return parse_merge(v); });
  }
  read_real(j, "", "gamma", c.gamma);
  if (const json* e = field(j, "encoder_settings")) {
    const std::string p = "encoder_settings.";
    reject_unknown(*e,
                   {"hidden", "layers", "embedding_dim", "kernel", "conv_filters", "conv_blocks", "dense", "model_dim",
                    "heads", "key_dim", "ltae_split_values", "dropout"},
                   p);
    EncoderConfig& s = c.encoder_settings;
    read_count(*e, p, "hidden", s.hidden);
    read_count(*e, p, "layers", s.layers);
    read_count(*e, p, "embedding_dim", s.embedding_dim);
    read_count(*e, p, "kernel", s.kernel);
    read_count(*e, p, "conv_filters", s.conv_filters);
    read_count(*e, p, "conv_blocks", s.conv_blocks);
    read_count(*e, p, "dense", s.dense);
    read_count(*e, p, "model_dim", s.model_dim);
    read_count(*e, p, "heads", s.heads);
    read_count(*e, p, "key_dim", s.key_dim);
    read_bool(*e, p, "ltae_split_values", s.ltae_split_values);
    read_real(*e, p, "dropout", s.dropout);
  }
  read_count(j, "", "repetitions", c.repetitions);
  read_u64(j, "", "seed_base", c.seed_base);
  if (const json* t = field(j, "train")) {
    const std::string p = "train.";
    reject_unknown(*t,
                   {"batch_size", "max_epochs", "patience", "min_delta", "validation_fraction", "learning_rate", "beta1",
                    "beta2", "eps"},
                   p);
    TrainConfig& s = c.train;
    read_count(*t, p, "batch_size", s.batch_size);
    read_count(*t, p, "max_epochs", s.max_epochs);
    read_count(*t, p, "patience", s.patience);
    read_real(*t, p, "min_delta", s.min_delta);
    read_real(*t, p, "validation_fraction", s.validation_fraction);
    read_real(*t, p, "learning_rate", s.adam.learning_rate);
    read_real(*t, p, "beta1", s.adam.beta1);
    read_real(*t, p, "beta2", s.adam.beta2);
    read_real(*t, p, "eps", s.adam.eps);
  }
  if (auto s = read_string(j, "", "selection"))
    c.selection = parse_named("selection", *s, [](const std::string& v) { return parse_selection_metric(v); });
  read_bool(j, "", "baselines", c.baselines);
  if (field(j, "group_by")) c.group_by = read_strings(j, "group_by");
  read_count(j, "", "jobs", c.jobs);
  if (auto s = read_string(j, "", "output")) c.output = *s;
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string canonical_config(const ExperimentConfig& config) { return config_json(config).dump(); }

std::string config_fingerprint(const ExperimentConfig& config) {
  json j = config_json(config);
  j.erase("output");
  j.erase("jobs");
  return fnv_hex(j.dump());
}

// ---- cells --------------------------------------------------------------------------

std::string Cell::id() const {
  return lower(to_string(encoder)) + "-" + lower(to_string(strategy)) + "-" + std::string(to_string(component));
}

std::vector<std::pair<Strategy, Component>> component_slots() {
  std::vector<std::pair<Strategy, Component>> out;
  for (Component c : {Component::kGFusion, Component::kMultiLoss})
    for (Strategy s : {Strategy::kFeature, Strategy::kDecision, Strategy::kHybrid}) out.emplace_back(s, c);
  return out;
}

std::size_t planned_grid_cells() {
  return temporal_architectures().size() * all_strategies().size() + component_slots().size();
}

std::size_t planned_search_cells() {
  // Phase 1 (Input fusion per encoder) + all strategies + component cells,
  // with the Input cell shared between the phases but counted in both.
  return temporal_architectures().size() + all_strategies().size() + component_slots().size();
}

ModelSpec cell_spec(const ExperimentConfig& config, const Cell& cell, const std::vector<ViewSchema>& views,
                    std::size_t classes, std::uint64_t seed) {
  ModelSpec spec;
  spec.strategy = cell.strategy;
  spec.component = cell.component;
  spec.views = views;
  spec.encoder = config.encoder_settings;
  spec.encoder.architecture = cell.encoder;
  spec.num_classes = classes;
  spec.gamma = config.gamma;
  spec.seed = seed;
  if (cell.component != Component::kGFusion) spec.merge = config.merge;
  return spec;
}

// ---- data ------------------------------------------------------------------------------

PreparedData prepare_data(const ExperimentConfig& config) {
  Dataset all = config.synthetic ? synth_generate(config.synthetic->spec, config.synthetic->seed)
                                 : load_dataset(config.dataset);
  if (config.task && *config.task != all.task()) {
    throw ValidationError("config task '" + std::string(to_string(*config.task)) + "' disagrees with the dataset task '" +
                          std::string(to_string(all.task())) + "'");
  }
  if (!config.views.empty()) {
    for (const std::string& v : config.views) {
      try {
        all.view_index(v);
      } catch (const SchemaError&) {
        throw ValidationError("config view '" + v + "' is not in the dataset");
      }
    }
    all = all.select_views(config.views);
  }
  auto [train_part, test_part] = all.by_test_flag();
  if (test_part.empty()) std::tie(train_part, test_part) = split(all, config.test_fraction, config.seed_base);
  if (train_part.empty()) throw DataError("the dataset has no training samples");
  return {std::move(train_part), std::move(test_part)};
}

// ---- execution ---------------------------------------------------------------------------

std::vector<RunRecord> run_cells(const ExperimentConfig& config, const PreparedData& data,
                                 const std::vector<Cell>& cells, const std::filesystem::path& run_dir,
                                 const ProgressFn& progress) {
  validate_cells(config, cells);
  prepare_run_dir(run_dir);
  const std::vector<ViewSchema> views = schemas_of(data.train);
  const std::size_t classes = data.train.num_classes();
  std::vector<RunRecord> records(cells.size() * config.repetitions);
  std::vector<std::function<void()>> work;
  std::mutex log_mutex;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    for (std::size_t r = 0; r < config.repetitions; ++r) {
      RunRecord& rec = records[c * config.repetitions + r];
      const Cell cell = cells[c];
      rec.cell = cell.id();
      rec.encoder = lower(to_string(cell.encoder));
      rec.strategy = lower(to_string(cell.strategy));
      rec.component = std::string(to_string(cell.component));
      ExperimentConfig cell_config = config;
      cell_config.encoder = cell.encoder;
      cell_config.strategy = cell.strategy;
      cell_config.component = cell.component;
      rec.fingerprint = config_fingerprint(cell_config);
      rec.repetition = r;
      rec.seed = config.seed_base + r;
      work.emplace_back([&, cell, &rec = rec] {
        try {
          auto model = build_model(cell_spec(config, cell, views, classes, rec.seed));
          TrainConfig tc = config.train;
          tc.seed = rec.seed;
          execute(*model, data, tc, run_dir, rec);
        } catch (const std::exception& e) {
          rec.ok = false;
          rec.error = e.what();
        }
        if (progress) {
          std::lock_guard lock(log_mutex);
          progress(rec.cell + " rep " + std::to_string(rec.repetition) +
                   (rec.ok ? " AA " + fixed(rec.average_accuracy) : " FAILED: " + rec.error));
        }
      });
    }
  }
  run_parallel(work, config.jobs);
  return records;
}

std::vector<RunRecord> single_view_baselines(const ExperimentConfig& config, const PreparedData& data,
                                             const std::vector<Architecture>& encoders,
                                             const std::filesystem::path& run_dir, const ProgressFn& progress) {
  prepare_run_dir(run_dir);
  const std::size_t classes = data.train.num_classes();
  struct Job {
    ViewSchema view;
    Architecture encoder;
  };
  std::vector<Job> jobs;
  for (const ViewSchema& v : data.train.schemas()) {
    if (!v.temporal) {
      jobs.push_back({v, Architecture::kMlp});
      continue;
    }
    for (Architecture a : encoders) jobs.push_back({v, a});
  }
  std::vector<RunRecord> records(jobs.size() * config.repetitions);
  std::vector<std::function<void()>> work;
  std::mutex log_mutex;
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    for (std::size_t r = 0; r < config.repetitions; ++r) {
      RunRecord& rec = records[j * config.repetitions + r];
      const Job job = jobs[j];
      rec.cell = "svl-" + job.view.name + "-" + lower(to_string(job.encoder));
      rec.view = job.view.name;
      rec.encoder = lower(to_string(job.encoder));
      rec.strategy = "input";
      rec.component = "none";
      ExperimentConfig view_config = config;
      view_config.views = {job.view.name};
      view_config.encoder = job.encoder == Architecture::kMlp ? config.encoder : job.encoder;
      view_config.strategy = Strategy::kInput;
      view_config.component = Component::kNone;
      rec.fingerprint = config_fingerprint(view_config);
      rec.repetition = r;
      rec.seed = config.seed_base + r;
      work.emplace_back([&, job, &rec = rec] {
        try {
          const std::string name = job.view.name;
          PreparedData view_data{data.train.select_views(std::span(&name, 1)), data.test.select_views(std::span(&name, 1))};
          EncoderConfig enc = config.encoder_settings;
          enc.architecture = job.encoder == Architecture::kMlp ? Architecture::kGru : job.encoder;
          auto model = build_single_view_model(job.view, enc, classes, rec.seed);
          TrainConfig tc = config.train;
          tc.seed = rec.seed;
          execute(*model, view_data, tc, run_dir, rec);
        } catch (const std::exception& e) {
          rec.ok = false;
          rec.error = e.what();
        }
        if (progress) {
          std::lock_guard lock(log_mutex);
          progress(rec.cell + " rep " + std::to_string(rec.repetition) +
                   (rec.ok ? " AA " + fixed(rec.average_accuracy) : " FAILED: " + rec.error));
        }
      });
    }
  }
  run_parallel(work, config.jobs);
  return records;
}

std::vector<CellSummary> summarize(const std::vector<RunRecord>& records) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunRecord*>> by_cell;
  for (const RunRecord& r : records) {
    if (!by_cell.count(r.cell)) order.push_back(r.cell);
    by_cell[r.cell].push_back(&r);
  }
  std::vector<CellSummary> out;
  for (const std::string& id : order) {
    const auto& recs = by_cell[id];
    CellSummary s;
    s.cell = id;
    s.encoder = recs.front()->encoder;
    s.strategy = recs.front()->strategy;
    s.component = recs.front()->component;
    std::vector<double> aa, kappa, f1, auc, maxp, ent, tt, it;
    bool kappa_complete = true, auc_complete = true;
    for (const RunRecord* r : recs) {
      if (!r->ok) {
        ++s.failures;
        continue;
      }
      ++s.runs;
      s.parameters = r->parameters;
      aa.push_back(r->average_accuracy);
      if (r->kappa) kappa.push_back(*r->kappa);
      else kappa_complete = false;
      f1.push_back(r->f1_macro);
      if (r->auc) auc.push_back(*r->auc);
      else auc_complete = false;
      maxp.push_back(r->max_probability);
      ent.push_back(r->entropy);
      tt.push_back(r->train_seconds);
      it.push_back(r->infer_seconds);
    }
    if (s.runs > 0) {
      const MeanStd a = mean_std(aa), f = mean_std(f1), m = mean_std(maxp), e = mean_std(ent);
      s.aa_mean = a.mean;
      s.aa_std = a.std;
      s.f1_mean = f.mean;
      s.f1_std = f.std;
      s.max_probability_mean = m.mean;
      s.max_probability_std = m.std;
      s.entropy_mean = e.mean;
      s.entropy_std = e.std;
      if (kappa_complete) {
        const MeanStd k = mean_std(kappa);
        s.kappa_mean = k.mean;
        s.kappa_std = k.std;
      }
      if (auc_complete) {
        const MeanStd u = mean_std(auc);
        s.auc_mean = u.mean;
        s.auc_std = u.std;
      }
      s.train_seconds_mean = mean_std(tt).mean;
      s.infer_seconds_mean = mean_std(it).mean;
    }
    out.push_back(std::move(s));
  }
  return out;
}

double selection_score(const CellSummary& s, SelectionMetric metric) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  if (s.runs == 0) return nan;
  switch (metric) {
    case SelectionMetric::kKappa:
      return s.kappa_mean.value_or(nan);
    case SelectionMetric::kAverageAccuracy:
      return s.aa_mean;
    case SelectionMetric::kF1Macro:
      return s.f1_mean;
  }
  return nan;
}

Architecture select_encoder(const std::vector<CellSummary>& summaries, SelectionMetric metric) {
  const CellSummary* best = nullptr;
  std::size_t best_rank = 0;
  auto rank_of = [](const std::string& enc) {
    const auto& archs = temporal_architectures();
    for (std::size_t i = 0; i < archs.size(); ++i)
      if (lower(to_string(archs[i])) == enc) return i;
    return archs.size();
  };
  for (const CellSummary& s : summaries) {
    const double score = selection_score(s, metric);
    if (std::isnan(score)) continue;
    const std::size_t rank = rank_of(s.encoder);
    if (!best) {
      best = &s;
      best_rank = rank;
      continue;
    }
    const double best_score = selection_score(*best, metric);
    const bool better = score > best_score ||
                        (score == best_score && (s.parameters < best->parameters ||
                                                 (s.parameters == best->parameters && rank < best_rank)));
    if (better) {
      best = &s;
      best_rank = rank;
    }
  }
  if (!best) throw DataError("no candidate encoder produced a usable " + std::string(to_string(metric)) + " score");
  return parse_architecture(best->encoder);
}

RunResult run_single(const ExperimentConfig& config, const ProgressFn& progress) {
  config.validate();
  if (!config.encoder) throw ValidationError("the train command needs a concrete 'encoder' (not \"search\")");
  RunResult result;
  result.directory = config.output;
  result.cells = {cell_of(*config.encoder, config.strategy, config.component)};
  const PreparedData data = prepare_data(config);
  result.records = run_cells(config, data, result.cells, result.directory, progress);
  if (config.baselines) result.baselines = single_view_baselines(config, data, {*config.encoder}, result.directory, progress);
  finish_run(config, "single", result);
  return result;
}

RunResult run_grid(const ExperimentConfig& config, const ProgressFn& progress) {
  config.validate();
  const std::vector<Cell> main = main_grid_cells();
  if (main.size() + component_slots().size() != kGridCells || planned_grid_cells() != kGridCells) {
    throw ContractError("grid plan holds " + std::to_string(main.size() + component_slots().size()) + " cells, expected " +
                        std::to_string(kGridCells));
  }
  // Every possible component cell is checked before training anything.
  std::vector<Cell> all_components;
  for (Architecture a : temporal_architectures())
    for (auto [s, c] : component_slots()) all_components.push_back(cell_of(a, s, c));
  validate_cells(config, main);
  validate_cells(config, all_components);

  RunResult result;
  result.directory = config.output;
  const PreparedData data = prepare_data(config);
  result.records = run_cells(config, data, main, result.directory, progress);
  result.cells = main;

  const std::vector<CellSummary> summaries = summarize(result.records);
  std::vector<Cell> components;
  for (auto [strategy, component] : component_slots()) {
    std::vector<CellSummary> candidates;
    for (const CellSummary& s : summaries)
      if (s.strategy == lower(to_string(strategy))) candidates.push_back(s);
    Architecture best = Architecture::kGru;
    try {
      best = select_encoder(candidates, config.selection);
    } catch (const DataError&) {
      best = temporal_architectures().front();
    }
    components.push_back(cell_of(best, strategy, component));
  }
  std::vector<RunRecord> extra = run_cells(config, data, components, result.directory, progress);
  result.records.insert(result.records.end(), extra.begin(), extra.end());
  result.cells.insert(result.cells.end(), components.begin(), components.end());
  if (config.baselines) {
    result.baselines = single_view_baselines(config, data, temporal_architectures(), result.directory, progress);
  }
  finish_run(config, "grid", result);
  return result;
}

RunResult run_search(const ExperimentConfig& config, const ProgressFn& progress) {
  config.validate();
  if (planned_search_cells() != kSearchCells) {
    throw ContractError("search plan holds " + std::to_string(planned_search_cells()) + " cells, expected " +
                        std::to_string(kSearchCells));
  }
  std::vector<Cell> phase1;
  for (Architecture a : temporal_architectures()) phase1.push_back(cell_of(a, Strategy::kInput));
  std::vector<Cell> every;
  for (Architecture a : temporal_architectures()) {
    for (Strategy s : all_strategies()) every.push_back(cell_of(a, s));
    for (auto [s, c] : component_slots()) every.push_back(cell_of(a, s, c));
  }
  validate_cells(config, every);

  RunResult result;
  result.directory = config.output;
  const PreparedData data = prepare_data(config);
  result.records = run_cells(config, data, phase1, result.directory, progress);
  result.cells = phase1;
  for (const RunRecord& r : result.records) {
    if (!r.ok) {
      throw DataError("phase 1 cell " + r.cell + " failed (" + r.error + "); the search stops before phase 2");
    }
  }
  const Architecture chosen = select_encoder(summarize(result.records), config.selection);
  result.selected_encoder = chosen;

  std::vector<Cell> phase2;
  for (Strategy s : all_strategies())
    if (s != Strategy::kInput) phase2.push_back(cell_of(chosen, s));
  for (auto [s, c] : component_slots()) phase2.push_back(cell_of(chosen, s, c));
  std::vector<RunRecord> extra = run_cells(config, data, phase2, result.directory, progress);
  result.records.insert(result.records.end(), extra.begin(), extra.end());
  // The reused Input cell appears in both phases of the plan.
  result.cells.push_back(cell_of(chosen, Strategy::kInput));
  result.cells.insert(result.cells.end(), phase2.begin(), phase2.end());
  if (result.cells.size() != kSearchCells) {
    throw ContractError("search executed " + std::to_string(result.cells.size()) + " cells, expected " +
                        std::to_string(kSearchCells));
  }
  if (config.baselines) result.baselines = single_view_baselines(config, data, {chosen}, result.directory, progress);
  finish_run(config, "search", result);
  return result;
}

// ---- persistence ------------------------------------------------------------------------

namespace {

const std::vector<std::string> kRecordColumns = {
    "cell",     "view",          "encoder", "strategy",  "component",        "fingerprint", "repetition",
    "seed",     "status",        "error",   "parameters", "epochs",          "best_epoch",  "average_accuracy",
    "kappa",    "f1_macro",      "auc",     "max_probability", "entropy",   "checkpoint",  "predictions"};

}  // namespace

void write_records(const std::vector<RunRecord>& records, const std::filesystem::path& path) {
  std::string out;
  for (std::size_t i = 0; i < kRecordColumns.size(); ++i) out += (i ? "," : "") + kRecordColumns[i];
  out += "\n";
  for (const RunRecord& r : records) {
    const std::vector<std::string> cells = {r.cell,
                                            r.view,
                                            r.encoder,
                                            r.strategy,
                                            r.component,
                                            r.fingerprint,
                                            std::to_string(r.repetition),
                                            std::to_string(r.seed),
                                            r.ok ? "ok" : "failed",
                                            r.error,
                                            std::to_string(r.parameters),
                                            std::to_string(r.epochs),
                                            std::to_string(r.best_epoch),
                                            r.ok ? fmt(r.average_accuracy) : "",
                                            r.ok ? opt_csv(r.kappa) : "",
                                            r.ok ? fmt(r.f1_macro) : "",
                                            r.ok ? opt_csv(r.auc) : "",
                                            r.ok ? fmt(r.max_probability) : "",
                                            r.ok ? fmt(r.entropy) : "",
                                            r.checkpoint,
                                            r.predictions};
    for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + csv_cell(cells[i]);
    out += "\n";
  }
  write_text(path, out);
}

void write_timings(const std::vector<RunRecord>& records, const std::filesystem::path& path) {
  std::string out = "cell,repetition,train_seconds,infer_seconds\n";
  for (const RunRecord& r : records) {
    out += csv_cell(r.cell) + "," + std::to_string(r.repetition) + "," + fmt(r.train_seconds) + "," +
           fmt(r.infer_seconds) + "\n";
  }
  write_text(path, out);
}

std::vector<RunRecord> read_records(const std::filesystem::path& path) {
  const CsvTable t = read_csv_table(path);
  std::vector<std::size_t> col;
  for (const std::string& name : kRecordColumns) col.push_back(t.column(name, path));
  std::vector<RunRecord> out;
  for (const auto& row : t.rows) {
    auto at = [&](std::size_t i) -> const std::string& { return row[col[i]]; };
    RunRecord r;
    r.cell = at(0);
    r.view = at(1);
    r.encoder = at(2);
    r.strategy = at(3);
    r.component = at(4);
    r.fingerprint = at(5);
    r.repetition = to_u64(at(6));
    r.seed = to_u64(at(7));
    r.ok = at(8) == "ok";
    r.error = at(9);
    r.parameters = to_u64(at(10));
    r.epochs = to_u64(at(11));
    r.best_epoch = to_u64(at(12));
    if (r.ok) {
      r.average_accuracy = to_double(at(13));
      r.kappa = opt_double(at(14));
      r.f1_macro = to_double(at(15));
      r.auc = opt_double(at(16));
      r.max_probability = to_double(at(17));
      r.entropy = to_double(at(18));
    }
    r.checkpoint = at(19);
    r.predictions = at(20);
    out.push_back(std::move(r));
  }
  return out;
}

void read_timings(std::vector<RunRecord>& records, const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) return;
  const CsvTable t = read_csv_table(path);
  const std::size_t c = t.column("cell", path), rep = t.column("repetition", path),
                    tr = t.column("train_seconds", path), inf = t.column("infer_seconds", path);
  std::map<std::pair<std::string, std::size_t>, std::pair<double, double>> times;
  for (const auto& row : t.rows) times[{row[c], to_u64(row[rep])}] = {to_double(row[tr]), to_double(row[inf])};
  for (RunRecord& r : records) {
    auto it = times.find({r.cell, r.repetition});
    if (it == times.end()) continue;
    r.train_seconds = it->second.first;
    r.infer_seconds = it->second.second;
  }
}

void write_predictions(const std::vector<PredictionRow>& rows, const std::filesystem::path& path) {
  const std::size_t k = rows.empty() ? 0 : rows.front().probs.size();
  std::string out = "id,label,predicted,correct,country,continent,year,latitude,longitude";
  for (std::size_t c = 0; c < k; ++c) out += ",p" + std::to_string(c);
  out += "\n";
  for (const PredictionRow& r : rows) {
    if (r.probs.size() != k) throw DataError("prediction rows disagree on the class count");
    const std::size_t pred = argmax_rows(r.probs, k).front();
    out += csv_cell(r.meta.id) + "," + std::to_string(r.label) + "," + std::to_string(pred) + "," +
           (pred == r.label ? "1" : "0") + "," + csv_cell(r.meta.country) + "," + csv_cell(r.meta.continent) + "," +
           std::to_string(r.meta.year) + "," + fmt(r.meta.latitude) + "," + fmt(r.meta.longitude);
    for (double p : r.probs) out += "," + fmt(p);
    out += "\n";
  }
  write_text(path, out);
}

std::vector<PredictionRow> read_predictions(const std::filesystem::path& path) {
  const CsvTable t = read_csv_table(path);
  const std::size_t id = t.column("id", path), label = t.column("label", path), country = t.column("country", path),
                    continent = t.column("continent", path), year = t.column("year", path),
                    lat = t.column("latitude", path), lon = t.column("longitude", path);
  std::vector<std::size_t> prob_cols;
  for (std::size_t c = 0;; ++c) {
    auto it = std::find(t.header.begin(), t.header.end(), "p" + std::to_string(c));
    if (it == t.header.end()) break;
    prob_cols.push_back(static_cast<std::size_t>(it - t.header.begin()));
  }
  if (prob_cols.size() < 2) throw FormatError("'" + path.string() + "' holds fewer than two probability columns");
  std::vector<PredictionRow> out;
  for (const auto& row : t.rows) {
    PredictionRow r;
    r.meta.id = row[id];
    r.meta.country = row[country];
    r.meta.continent = row[continent];
    r.meta.year = static_cast<int>(std::stol(row[year]));
    r.meta.latitude = to_double(row[lat]);
    r.meta.longitude = to_double(row[lon]);
    r.meta.is_test = true;
    r.label = to_u64(row[label]);
    for (std::size_t c : prob_cols) r.probs.push_back(to_double(row[c]));
    out.push_back(std::move(r));
  }
  return out;
}

// ---- reports ---------------------------------------------------------------------------

void emit_reports(const std::filesystem::path& run_dir, const std::vector<RunRecord>& records,
                  const std::vector<RunRecord>& baselines, const std::vector<std::string>& group_by,
                  SelectionMetric metric) {
  const std::filesystem::path dir = run_dir / "reports";
  std::filesystem::create_directories(dir);
  const std::vector<CellSummary> summaries = summarize(records);

  Table overall{{"cell", "encoder", "strategy", "component", "parameters", "runs", "failures", "AA", "AA_std", "kappa",
                 "kappa_std", "F1_macro", "F1_macro_std", "AUC", "AUC_std"},
                {}};
  Table overall_md{{"cell", "encoder", "strategy", "component", "parameters", "runs", "AA", "kappa", "F1 macro", "AUC"},
                   {}};
  Table unc{{"cell", "max_probability", "max_probability_std", "entropy", "entropy_std"}, {}};
  Table unc_md{{"cell", "max probability", "entropy"}, {}};
  Table timing{{"cell", "runs", "train_seconds", "infer_seconds"}, {}};
  for (const CellSummary& s : summaries) {
    const bool ok = s.runs > 0;
    overall.rows.push_back({s.cell, s.encoder, s.strategy, s.component, std::to_string(s.parameters),
                            std::to_string(s.runs), std::to_string(s.failures), ok ? fmt(s.aa_mean) : "",
                            ok ? fmt(s.aa_std) : "", opt_csv(s.kappa_mean), opt_csv(s.kappa_std),
                            ok ? fmt(s.f1_mean) : "", ok ? fmt(s.f1_std) : "", opt_csv(s.auc_mean), opt_csv(s.auc_std)});
    const std::string failed = s.failures ? " (" + std::to_string(s.failures) + " failed)" : "";
    overall_md.rows.push_back({s.cell, s.encoder, s.strategy, s.component, std::to_string(s.parameters),
                               std::to_string(s.runs) + failed, ok ? pm(s.aa_mean, s.aa_std) : "failed",
                               opt_text(s.kappa_mean, s.kappa_std), ok ? pm(s.f1_mean, s.f1_std) : "failed",
                               opt_text(s.auc_mean, s.auc_std)});
    unc.rows.push_back({s.cell, ok ? fmt(s.max_probability_mean) : "", ok ? fmt(s.max_probability_std) : "",
                        ok ? fmt(s.entropy_mean) : "", ok ? fmt(s.entropy_std) : ""});
    unc_md.rows.push_back({s.cell, ok ? pm(s.max_probability_mean, s.max_probability_std) : "failed",
                           ok ? pm(s.entropy_mean, s.entropy_std) : "failed"});
    timing.rows.push_back({s.cell, std::to_string(s.runs), fmt(s.train_seconds_mean), fmt(s.infer_seconds_mean)});
  }
  // Markdown carries the readable mean ± std form; CSV the raw columns.
  write_table(overall, dir / "overall", "Overall results");
  write_table(overall_md, dir / "overall_summary", "Overall results (mean ± std)");
  write_table(unc, dir / "uncertainty", "Uncertainty");
  write_table(unc_md, dir / "uncertainty_summary", "Uncertainty (mean ± std)");
  write_table(timing, dir / "timing", "Timing (seconds per run)");

  // Per-class and per-group tables average the per-repetition metrics.
  Table per_class{{"cell", "class", "precision", "recall", "F1"}, {}};
  std::map<std::string, Table> grouped;
  for (const std::string& g : group_by) grouped[g] = Table{{"cell", g, "samples", "AA", "kappa", "F1_macro"}, {}};
  std::filesystem::create_directories(dir / "samples");

  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunRecord*>> by_cell;
  for (const RunRecord& r : records) {
    if (!r.ok) continue;
    if (!by_cell.count(r.cell)) order.push_back(r.cell);
    by_cell[r.cell].push_back(&r);
  }
  for (const std::string& cell : order) {
    std::vector<std::vector<double>> prec, rec, f1;
    std::map<std::string, std::map<std::string, std::vector<double>>> g_aa, g_kappa, g_f1;
    std::map<std::string, std::map<std::string, std::size_t>> g_count;
    bool first = true;
    for (const RunRecord* r : by_cell[cell]) {
      const Loaded l = load_predictions(run_dir, *r);
      const std::vector<std::size_t> pred = argmax_rows(l.probs, l.classes);
      const F1Scores f = f1_scores(confusion_matrix(l.labels, pred, l.classes));
      prec.push_back(f.precision);
      rec.push_back(f.recall);
      f1.push_back(f.f1);
      for (const std::string& g : group_by) {
        std::vector<std::string> keys;
        std::size_t missing = 0;
        for (const SampleMeta& m : l.metas) {
          auto key = group_key(m, g);
          if (!key) ++missing;
          keys.push_back(key.value_or(""));
        }
        if (missing) {
          throw DataError("grouping by '" + g + "' needs metadata field '" + g + "', missing for " +
                          std::to_string(missing) + " of " + std::to_string(l.metas.size()) + " samples");
        }
        for (const GroupReport& gr : grouped_report(l.probs, l.labels, l.classes, keys)) {
          g_aa[g][gr.group].push_back(gr.report.average_accuracy);
          if (gr.report.kappa) g_kappa[g][gr.group].push_back(*gr.report.kappa);
          g_f1[g][gr.group].push_back(gr.report.f1.macro);
          g_count[g][gr.group] = gr.report.samples;
        }
      }
      if (first) {
        Table samples{{"id", "latitude", "longitude", "label", "predicted", "correct"}, {}};
        for (std::size_t i = 0; i < l.labels.size(); ++i) {
          samples.rows.push_back({l.metas[i].id, fmt(l.metas[i].latitude), fmt(l.metas[i].longitude),
                                  std::to_string(l.labels[i]), std::to_string(pred[i]),
                                  pred[i] == l.labels[i] ? "1" : "0"});
        }
        write_table(samples, dir / "samples" / cell, "Per-sample predictions of " + cell + " (repetition " +
                                                          std::to_string(r->repetition) + ")");
        first = false;
      }
    }
    const std::size_t k = prec.front().size();
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<double> p, q, f;
      for (std::size_t i = 0; i < prec.size(); ++i) {
        p.push_back(prec[i][c]);
        q.push_back(rec[i][c]);
        f.push_back(f1[i][c]);
      }
      per_class.rows.push_back(
          {cell, std::to_string(c), fixed(mean_std(p).mean), fixed(mean_std(q).mean), fixed(mean_std(f).mean)});
    }
    for (const std::string& g : group_by) {
      for (const auto& [key, aas] : g_aa[g]) {
        const auto& ks = g_kappa[g][key];
        grouped[g].rows.push_back({cell, key, std::to_string(g_count[g][key]), fixed(mean_std(aas).mean),
                                   ks.size() == aas.size() ? fixed(mean_std(ks).mean) : "n/a",
                                   fixed(mean_std(g_f1[g][key]).mean)});
      }
    }
  }
  write_table(per_class, dir / "per_class", "Per-class precision, recall and F1");
  for (const auto& [g, table] : grouped) write_table(table, dir / ("per_" + g), "Results per " + g);

  if (!baselines.empty()) {
    const std::vector<CellSummary> svl = summarize(baselines);
    std::map<std::string, std::string> view_of;
    for (const RunRecord& r : baselines) view_of[r.cell] = r.view;
    std::size_t best = svl.size();
    for (std::size_t i = 0; i < svl.size(); ++i) {
      const double score = selection_score(svl[i], metric);
      if (std::isnan(score)) continue;
      if (best == svl.size() || score > selection_score(svl[best], metric)) best = i;
    }
    Table t{{"view", "encoder", "runs", "AA", "AA_std", "kappa", "kappa_std", "F1_macro", "F1_macro_std", "best"}, {}};
    for (std::size_t i = 0; i < svl.size(); ++i) {
      const CellSummary& s = svl[i];
      const bool ok = s.runs > 0;
      t.rows.push_back({view_of[s.cell], s.encoder, std::to_string(s.runs), ok ? fixed(s.aa_mean) : "",
                        ok ? fixed(s.aa_std) : "", s.kappa_mean ? fixed(*s.kappa_mean) : "n/a",
                        s.kappa_std ? fixed(*s.kappa_std) : "n/a", ok ? fixed(s.f1_mean) : "",
                        ok ? fixed(s.f1_std) : "", i == best ? "yes" : ""});
    }
    write_table(t, dir / "svl", "Single-view baselines (best by " + std::string(to_string(metric)) + ")");
  }
}

void rebuild_reports(const std::filesystem::path& run_dir) {
  const json manifest = [&] {
    try {
      return json::parse(read_text(run_dir / "manifest.json"));
    } catch (const json::exception& e) {
      throw FormatError("run manifest is not valid JSON: " + std::string(e.what()));
    }
  }();
  const ExperimentConfig config = parse_config(manifest.at("config").dump());
  std::vector<RunRecord> records = read_records(run_dir / "records.csv");
  read_timings(records, run_dir / "timings.csv");
  std::vector<RunRecord> baselines;
  if (std::filesystem::exists(run_dir / "baselines.csv")) {
    baselines = read_records(run_dir / "baselines.csv");
    read_timings(baselines, run_dir / "baseline_timings.csv");
  }
  emit_reports(run_dir, records, baselines, config.group_by, config.selection);
}

// ---- parameter inspection -----------------------------------------------------------------

std::vector<ParamRow> parameter_table(const EncoderConfig& base) {
  std::vector<ParamRow> rows;
  auto count = [&](Architecture a, const ViewSchema& v) {
    EncoderConfig c = base;
    c.architecture = a;
    return make_encoder(c, v, "encoder." + v.name, 0)->param_count();
  };
  const ViewSchema optical = *canonical_view("optical"), radar = *canonical_view("radar"),
                   weather = *canonical_view("weather"), ndvi = *canonical_view("ndvi"),
                   topography = *canonical_view("topography");
  struct Target {
    Architecture arch;
    std::optional<std::size_t> optical, radar, weather, ndvi;
  };
  const std::vector<Target> targets = {
      {Architecture::kGru, 43904, 42176, 42176, 41984},
      {Architecture::kLstm, 57152, 54592, 54592, std::nullopt},
      {Architecture::kTempCnn, 258880, 256000, 256000, 255680},
  };
  for (const Target& t : targets) {
    const std::string name(to_string(t.arch));
    rows.push_back({name + "/optical", count(t.arch, optical), t.optical, ""});
    // The reference LSTM row is not affine in the channel count (optical minus
    // radar is not a multiple of 9), so no single architecture matches it.
    const std::string narrow_note =
        t.arch == Architecture::kLstm ? "reference row is not affine in channels; optical matched instead" : "";
    rows.push_back({name + "/radar", count(t.arch, radar), t.radar, narrow_note});
    rows.push_back({name + "/weather", count(t.arch, weather), t.weather, narrow_note});
    rows.push_back({name + "/ndvi", count(t.arch, ndvi), t.ndvi,
                    t.arch == Architecture::kLstm ? "reference 50688 is inconsistent with the other cells; not matched"
                                                  : ""});
  }
  for (Architecture a : {Architecture::kTae, Architecture::kLtae}) {
    const std::string name(to_string(a));
    const std::size_t o = count(a, optical), r = count(a, radar), w = count(a, weather), n = count(a, ndvi);
    const std::size_t reference_optical = a == Architecture::kTae ? 56598 : 19350;
    rows.push_back({name + "/optical", o, std::nullopt, "reference " + std::to_string(reference_optical) + " (width calibration)"});
    rows.push_back({name + "/radar", r, std::nullopt, ""});
    rows.push_back({name + "/weather", w, std::nullopt, ""});
    rows.push_back({name + "/ndvi", n, std::nullopt, ""});
    rows.push_back({name + " delta optical-radar", o - r, 594, ""});
    rows.push_back({name + " delta radar-ndvi", r - n, 66, ""});
  }
  EncoderConfig mlp = base;
  mlp.architecture = Architecture::kMlp;
  rows.push_back({"MLP/topography", make_encoder(mlp, topography, "encoder.topography", 0)->param_count(), 4352, ""});
  PredictionHead head(5 * base.embedding_dim, 2, base.dropout, "head", 0);
  rows.push_back({"prediction head (input 320, K=2)", head.param_count(), 20802, ""});
  return rows;
}

}  // namespace mvl
