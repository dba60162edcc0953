#include "mvl/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <unordered_map>

#include <unsupported/Eigen/FFT>

#include "json.hpp"
#include "mvl/errors.hpp"
#include "mvl/rng.hpp"

namespace mvl {

using nlohmann::json;

namespace {

constexpr char kDatasetMagic[4] = {'M', 'V', 'D', 'S'};

template <typename T>
void put_le(std::string& out, T value) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const char* p) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<T>(bits);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

json schema_to_json(const ViewSchema& s) {
  return {{"name", s.name}, {"temporal", s.temporal}, {"steps", s.steps}, {"channels", s.channels}};
}

ViewSchema schema_from_json(const json& j) {
  ViewSchema s;
  s.name = j.at("name").get<std::string>();
  s.temporal = j.value("temporal", true);
  s.steps = s.temporal ? j.at("steps").get<std::size_t>() : 0;
  s.channels = j.at("channels").get<std::size_t>();
  if (s.name.empty() || s.channels == 0 || (s.temporal && s.steps == 0)) {
    throw SchemaError("invalid view schema '" + s.name + "'");
  }
  return s;
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  std::string out(s.substr(b, e - b));
  if (out.size() >= 2 && out.front() == '"' && out.back() == '"') out = out.substr(1, out.size() - 2);
  return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  bool quoted = false;
  for (char c : line) {
    if (c == '"') {
      quoted = !quoted;
      continue;
    }
    if (c == ',' && !quoted) {
      cells.push_back(trim(cell));
      cell.clear();
    } else {
      cell.push_back(c);
    }
  }
  cells.push_back(trim(cell));
  return cells;
}

// Rows of a CSV file with a header; blank lines skipped.
std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path, std::vector<std::string>& header) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::string line;
  std::vector<std::vector<std::string>> rows;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    if (first) {
      header = split_csv_line(line);
      first = false;
      continue;
    }
    rows.push_back(split_csv_line(line));
  }
  if (first) throw FormatError("'" + path.string() + "' has no header");
  return rows;
}

double parse_number(const std::string& cell, const std::filesystem::path& file, std::size_t row) {
  try {
    std::size_t used = 0;
    const double v = std::stod(cell, &used);
    if (used != cell.size()) throw std::invalid_argument(cell);
    return v;
  } catch (const std::exception&) {
    throw FormatError("non-numeric cell '" + cell + "' in '" + file.string() + "' row " + std::to_string(row + 1));
  }
}

}  // namespace

// ---- task ----------------------------------------------------------------------------------

std::string_view to_string(Task task) { return task == Task::kBinary ? "binary" : "multicrop"; }

Task parse_task(std::string_view name) {
  if (name == "binary") return Task::kBinary;
  if (name == "multicrop") return Task::kMulticrop;
  throw ConfigError("unknown task '" + std::string(name) + "'");
}

std::size_t task_classes(Task task) { return task == Task::kBinary ? 2 : 10; }

// ---- dataset -------------------------------------------------------------------------------

Dataset::Dataset(Task task, std::vector<ViewSchema> schemas)
    : task_(task), schemas_(std::move(schemas)), values_(schemas_.size()) {
  std::set<std::string> names;
  for (const ViewSchema& s : schemas_) {
    if (!names.insert(s.name).second) throw SchemaError("duplicate view '" + s.name + "'");
  }
}

std::size_t Dataset::view_index(std::string_view name) const {
  for (std::size_t v = 0; v < schemas_.size(); ++v)
    if (schemas_[v].name == name) return v;
  throw SchemaError("dataset has no view '" + std::string(name) + "'");
}

void Dataset::add(std::span<const std::vector<float>> views, std::uint32_t label, SampleMeta meta) {
  if (views.size() != schemas_.size()) throw SchemaError("sample view count differs from the dataset schema");
  if (label >= num_classes()) {
    throw DataError("label " + std::to_string(label) + " outside [0, " + std::to_string(num_classes()) + ")");
  }
  for (std::size_t v = 0; v < views.size(); ++v) {
    if (views[v].size() != schemas_[v].sample_size()) {
      throw SchemaError("view '" + schemas_[v].name + "' expects " + std::to_string(schemas_[v].sample_size()) +
                        " values per sample, got " + std::to_string(views[v].size()));
    }
  }
  for (std::size_t v = 0; v < views.size(); ++v) values_[v].insert(values_[v].end(), views[v].begin(), views[v].end());
  labels_.push_back(label);
  meta_.push_back(std::move(meta));
}

std::span<const float> Dataset::values(std::size_t view, std::size_t sample) const {
  const std::size_t n = schemas_[view].sample_size();
  return std::span<const float>(values_[view]).subspan(sample * n, n);
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out(task_, schemas_);
  for (std::size_t v = 0; v < schemas_.size(); ++v) out.values_[v].reserve(indices.size() * schemas_[v].sample_size());
  for (std::size_t i : indices) {
    if (i >= size()) throw DataError("sample index out of range");
    for (std::size_t v = 0; v < schemas_.size(); ++v) {
      auto vals = values(v, i);
      out.values_[v].insert(out.values_[v].end(), vals.begin(), vals.end());
    }
    out.labels_.push_back(labels_[i]);
    out.meta_.push_back(meta_[i]);
  }
  return out;
}

Dataset Dataset::select_views(std::span<const std::string> names) const {
  std::vector<ViewSchema> schemas;
  std::vector<std::size_t> idx;
  for (const std::string& n : names) {
    idx.push_back(view_index(n));
    schemas.push_back(schemas_[idx.back()]);
  }
  Dataset out(task_, std::move(schemas));
  for (std::size_t v = 0; v < idx.size(); ++v) out.values_[v] = values_[idx[v]];
  out.labels_ = labels_;
  out.meta_ = meta_;
  return out;
}

std::pair<Dataset, Dataset> Dataset::by_test_flag() const {
  std::vector<std::size_t> train, test;
  for (std::size_t i = 0; i < size(); ++i) (meta_[i].is_test ? test : train).push_back(i);
  return {subset(train), subset(test)};
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes(), 0);
  for (std::uint32_t y : labels_) ++counts[y];
  return counts;
}

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices, std::span<const ViewSchema> views) {
  Batch batch;
  batch.labels.reserve(indices.size());
  for (std::size_t i : indices) batch.labels.push_back(data.label(i));
  for (const ViewSchema& want : views) {
    const std::size_t v = data.view_index(want.name);
    const ViewSchema& have = data.schemas()[v];
    if (!(have == want)) throw SchemaError("view '" + want.name + "' layout differs between model and dataset");
    const std::size_t n = have.sample_size();
    std::vector<double> values(indices.size() * n);
    for (std::size_t b = 0; b < indices.size(); ++b) {
      auto src = data.values(v, indices[b]);
      std::copy(src.begin(), src.end(), values.begin() + static_cast<std::ptrdiff_t>(b * n));
    }
    Shape shape{indices.size()};
    for (std::size_t e : have.sample_shape()) shape.push_back(e);
    batch.views.push_back(Tensor::from(std::move(shape), std::move(values)));
  }
  return batch;
}

// ---- MVDS ----------------------------------------------------------------------------------
//
// "MVDS" | u32 version | u64 samples | u64 manifest bytes | manifest (JSON)
// | float32 block per view | u32 label block. Offsets in the manifest are
// relative to the first byte after the manifest.

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  json manifest;
  manifest["task"] = std::string(to_string(data.task()));
  manifest["classes"] = data.num_classes();
  json views = json::array();
  std::uint64_t offset = 0;
  for (std::size_t v = 0; v < data.schemas().size(); ++v) {
    json j = schema_to_json(data.schemas()[v]);
    const std::uint64_t bytes = data.view_block(v).size() * 4;
    j["offset"] = offset;
    j["bytes"] = bytes;
    offset += bytes;
    views.push_back(std::move(j));
  }
  manifest["views"] = std::move(views);
  manifest["labels"] = {{"offset", offset}, {"bytes", data.size() * 4}};
  json meta = json::array();
  for (const SampleMeta& m : data.metas()) {
    meta.push_back({m.id, m.country, m.continent, m.year, m.latitude, m.longitude, m.is_test});
  }
  manifest["metadata_fields"] = {"id", "country", "continent", "year", "latitude", "longitude", "is_test"};
  manifest["metadata"] = std::move(meta);
  const std::string text = manifest.dump();

  std::string out(kDatasetMagic, 4);
  put_le(out, kDatasetFormatVersion);
  put_le(out, static_cast<std::uint64_t>(data.size()));
  put_le(out, static_cast<std::uint64_t>(text.size()));
  out += text;
  for (std::size_t v = 0; v < data.schemas().size(); ++v)
    for (float x : data.view_block(v)) put_le(out, x);
  for (std::uint32_t y : data.labels()) put_le(out, y);

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw DataError("cannot write '" + path.string() + "'");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw DataError("failed writing '" + path.string() + "'");
}

Dataset load_dataset(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  constexpr std::size_t kHeader = 4 + 4 + 8 + 8;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kDatasetMagic, 4) != 0) {
    throw FormatError("'" + path.string() + "' is not an MVDS file (bad magic)");
  }
  if (bytes.size() < kHeader) throw TruncationError("MVDS header is truncated");
  const auto version = get_le<std::uint32_t>(bytes.data() + 4);
  if (version != kDatasetFormatVersion) throw FormatError("unsupported MVDS version " + std::to_string(version));
  const auto samples = get_le<std::uint64_t>(bytes.data() + 8);
  const auto manifest_bytes = get_le<std::uint64_t>(bytes.data() + 16);
  if (bytes.size() - kHeader < manifest_bytes) throw TruncationError("MVDS manifest is truncated");

  json manifest;
  try {
    manifest = json::parse(bytes.begin() + kHeader, bytes.begin() + static_cast<std::ptrdiff_t>(kHeader + manifest_bytes));
  } catch (const json::exception& e) {
    throw FormatError(std::string("MVDS manifest is not valid JSON: ") + e.what());
  }
  const std::size_t base = kHeader + manifest_bytes;
  const std::size_t payload = bytes.size() - base;

  try {
    std::vector<ViewSchema> schemas;
    for (const json& j : manifest.at("views")) schemas.push_back(schema_from_json(j));
    Dataset out(parse_task(manifest.at("task").get<std::string>()), schemas);
    if (manifest.at("classes").get<std::size_t>() != out.num_classes()) {
      throw FormatError("MVDS class count disagrees with the task");
    }

    auto check_block = [&](const json& j, std::uint64_t expected, const std::string& what) {
      const auto offset = j.at("offset").get<std::uint64_t>();
      const auto size = j.at("bytes").get<std::uint64_t>();
      if (size != expected) throw FormatError("MVDS block '" + what + "' size disagrees with the manifest");
      if (offset > payload || payload - offset < size) throw TruncationError("MVDS block '" + what + "' is truncated");
      return bytes.data() + base + offset;
    };

    for (std::size_t v = 0; v < schemas.size(); ++v) {
      const std::uint64_t count = samples * schemas[v].sample_size();
      const char* p = check_block(manifest["views"][v], count * 4, schemas[v].name);
      out.values_[v].resize(count);
      for (std::uint64_t i = 0; i < count; ++i) out.values_[v][i] = get_le<float>(p + 4 * i);
    }
    const char* p = check_block(manifest.at("labels"), samples * 4, "labels");
    out.labels_.resize(samples);
    for (std::uint64_t i = 0; i < samples; ++i) {
      out.labels_[i] = get_le<std::uint32_t>(p + 4 * i);
      if (out.labels_[i] >= out.num_classes()) throw FormatError("MVDS label out of range");
    }
    const json& meta = manifest.at("metadata");
    if (meta.size() != samples) throw FormatError("MVDS metadata count disagrees with the header");
    out.meta_.reserve(samples);
    for (const json& m : meta) {
      out.meta_.push_back({m.at(0).get<std::string>(), m.at(1).get<std::string>(), m.at(2).get<std::string>(),
                           m.at(3).get<int>(), m.at(4).get<double>(), m.at(5).get<double>(), m.at(6).get<bool>()});
    }
    return out;
  } catch (const json::exception& e) {
    throw FormatError(std::string("MVDS manifest is malformed: ") + e.what());
  }
}

// ---- CSV import ----------------------------------------------------------------------------

ImportResult import_csv(const std::filesystem::path& manifest_path) {
  json manifest;
  try {
    manifest = json::parse(read_file(manifest_path));
  } catch (const json::exception& e) {
    throw FormatError(std::string("import manifest is not valid JSON: ") + e.what());
  }
  const std::filesystem::path dir = manifest_path.parent_path();
  auto resolve = [&](const std::string& f) {
    std::filesystem::path p(f);
    return p.is_absolute() ? p : dir / p;
  };

  std::vector<ViewSchema> schemas;
  std::vector<std::unordered_map<std::string, std::vector<float>>> view_rows;
  for (const json& j : manifest.at("views")) {
    schemas.push_back(schema_from_json(j));
    const ViewSchema& s = schemas.back();
    const auto file = resolve(j.at("file").get<std::string>());
    std::vector<std::string> header;
    const auto rows = read_csv(file, header);
    if (header.size() != 1 + s.sample_size()) {
      throw SchemaError("'" + file.string() + "' has " + std::to_string(header.size() - 1) + " value columns, view '" +
                        s.name + "' needs " + std::to_string(s.sample_size()));
    }
    std::unordered_map<std::string, std::vector<float>> by_id;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != header.size()) throw FormatError("'" + file.string() + "' row " + std::to_string(r + 1) + " has the wrong column count");
      std::vector<float> values;
      values.reserve(s.sample_size());
      for (std::size_t c = 1; c < rows[r].size(); ++c) values.push_back(static_cast<float>(parse_number(rows[r][c], file, r)));
      if (!by_id.emplace(rows[r][0], std::move(values)).second) {
        throw DataError("duplicate id '" + rows[r][0] + "' in '" + file.string() + "'");
      }
    }
    view_rows.push_back(std::move(by_id));
  }

  const auto label_file = resolve(manifest.at("labels").get<std::string>());
  std::vector<std::string> header;
  const auto rows = read_csv(label_file, header);
  std::map<std::string, std::size_t> col;
  for (std::size_t c = 0; c < header.size(); ++c) col[header[c]] = c;
  for (const char* need : {"id", "label"}) {
    if (!col.count(need)) throw SchemaError("label file lacks the '" + std::string(need) + "' column");
  }
  auto cell = [&](const std::vector<std::string>& row, const char* name) -> std::string {
    auto it = col.find(name);
    return it == col.end() ? std::string() : row.at(it->second);
  };

  ImportResult result{Dataset(parse_task(manifest.value("task", std::string("binary"))), schemas), 0, {}};
  std::set<std::string> labelled;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.size() != header.size()) throw FormatError("label file row " + std::to_string(r + 1) + " has the wrong column count");
    const std::string id = row[col["id"]];
    labelled.insert(id);
    std::vector<std::vector<float>> views;
    std::size_t present = 0;
    for (const auto& by_id : view_rows) {
      auto it = by_id.find(id);
      if (it != by_id.end()) {
        ++present;
        views.push_back(it->second);
      }
    }
    if (present == 0) throw DataError("label id '" + id + "' appears in no view file");
    if (present < view_rows.size()) {
      ++result.dropped;
      continue;
    }
    SampleMeta meta;
    meta.id = id;
    meta.country = cell(row, "country");
    meta.continent = cell(row, "continent");
    if (const auto y = cell(row, "year"); !y.empty()) meta.year = static_cast<int>(parse_number(y, label_file, r));
    if (const auto v = cell(row, "lat"); !v.empty()) meta.latitude = parse_number(v, label_file, r);
    if (const auto v = cell(row, "lon"); !v.empty()) meta.longitude = parse_number(v, label_file, r);
    if (const auto v = cell(row, "is_test"); !v.empty()) meta.is_test = v == "1" || v == "true";
    const double label = parse_number(row[col["label"]], label_file, r);
    if (label < 0 || label != std::floor(label)) throw DataError("label of '" + id + "' is not a class index");
    result.data.add(views, static_cast<std::uint32_t>(label), std::move(meta));
  }
  for (std::size_t v = 0; v < view_rows.size(); ++v) {
    for (const auto& [id, _] : view_rows[v]) {
      if (!labelled.count(id)) throw DataError("id '" + id + "' in view '" + schemas[v].name + "' has no label");
    }
  }
  if (result.dropped > 0) {
    result.warnings.push_back("dropped " + std::to_string(result.dropped) + " sample(s) missing at least one view");
  }
  return result;
}

// ---- derived views ---------------------------------------------------------------------------

std::vector<double> compute_ndvi(std::span<const double> optical, std::size_t channels, std::size_t red_index,
                                 std::size_t nir_index) {
  if (red_index >= channels || nir_index >= channels) throw DataError("band index outside the optical view");
  if (channels == 0 || optical.size() % channels != 0) throw ShapeError("optical series is not [T x channels]");
  const std::size_t steps = optical.size() / channels;
  std::vector<double> out(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    const double red = optical[t * channels + red_index];
    const double nir = optical[t * channels + nir_index];
    const double denom = nir + red;
    out[t] = denom == 0.0 ? 0.0 : (nir - red) / denom;
  }
  return out;
}

std::vector<double> resample_monthly(std::span<const double> series, std::size_t width, std::span<const double> days) {
  constexpr std::size_t kMonths = 12;
  constexpr double kDaysPerMonth = 365.0 / kMonths;
  if (width == 0 || series.size() != days.size() * width) throw ShapeError("series is not [T_raw x D] with T_raw timestamps");
  std::vector<double> sums(kMonths * width, 0.0);
  std::vector<std::size_t> counts(kMonths, 0);
  for (std::size_t r = 0; r < days.size(); ++r) {
    if (!(days[r] >= 0.0 && days[r] <= 366.0)) throw DataError("timestamp outside the season year");
    const auto m = std::min(kMonths - 1, static_cast<std::size_t>(days[r] / kDaysPerMonth));
    ++counts[m];
    for (std::size_t d = 0; d < width; ++d) sums[m * width + d] += series[r * width + d];
  }
  std::vector<std::size_t> observed;
  for (std::size_t m = 0; m < kMonths; ++m) {
    if (counts[m] == 0) continue;
    observed.push_back(m);
    for (std::size_t d = 0; d < width; ++d) sums[m * width + d] /= static_cast<double>(counts[m]);
  }
  if (observed.empty()) throw DataError("no observations to resample");
  for (std::size_t m = 0; m < kMonths; ++m) {
    if (counts[m] != 0) continue;
    auto next = std::lower_bound(observed.begin(), observed.end(), m);
    for (std::size_t d = 0; d < width; ++d) {
      double v;
      if (next == observed.begin()) {
        v = sums[*next * width + d];
      } else if (next == observed.end()) {
        v = sums[observed.back() * width + d];
      } else {
        const std::size_t lo = *(next - 1), hi = *next;
        const double w = static_cast<double>(m - lo) / static_cast<double>(hi - lo);
        v = (1.0 - w) * sums[lo * width + d] + w * sums[hi * width + d];
      }
      sums[m * width + d] = v;
    }
  }
  return sums;
}

double spectral_entropy(std::span<const double> series) {
  const std::size_t n = series.size();
  if (n < 4) throw DataError("spectral entropy needs at least 4 samples");
  double mean = 0.0, peak = 0.0;
  for (double x : series) mean += x;
  mean /= static_cast<double>(n);
  std::vector<double> centered(n);
  for (std::size_t i = 0; i < n; ++i) {
    centered[i] = series[i] - mean;
    peak = std::max(peak, std::abs(series[i]));
  }
  // Residuals at rounding level are a constant series.
  const double floor = 1e-12 * std::max(peak, 1e-300);
  if (std::all_of(centered.begin(), centered.end(), [&](double c) { return std::abs(c) <= floor; })) return 0.0;

  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> spectrum;
  fft.fwd(spectrum, centered);
  const std::size_t bins = n / 2;
  std::vector<double> power(bins);
  double total = 0.0;
  for (std::size_t k = 1; k <= bins; ++k) {
    power[k - 1] = std::norm(spectrum[k]);
    total += power[k - 1];
  }
  if (!(total > 0.0)) return 0.0;
  double entropy = 0.0;
  for (double p : power) {
    const double q = p / total;
    if (q > 0.0) entropy -= q * std::log(q);
  }
  return std::clamp(entropy / std::log(static_cast<double>(bins)), 0.0, 1.0);
}

EntropyReport entropy_report(const Dataset& data) {
  EntropyReport report;
  for (std::size_t v = 0; v < data.schemas().size(); ++v) {
    const ViewSchema& s = data.schemas()[v];
    if (!s.temporal || s.steps < 4) continue;
    double view_sum = 0.0;
    for (std::size_t f = 0; f < s.channels; ++f) {
      std::vector<double> values;
      values.reserve(data.size());
      std::vector<double> series(s.steps);
      for (std::size_t i = 0; i < data.size(); ++i) {
        auto x = data.values(v, i);
        for (std::size_t t = 0; t < s.steps; ++t) series[t] = x[t * s.channels + f];
        values.push_back(spectral_entropy(series));
      }
      double mean = 0.0, var = 0.0;
      for (double e : values) mean += e;
      mean /= std::max<std::size_t>(values.size(), 1);
      for (double e : values) var += (e - mean) * (e - mean);
      const double sd = values.size() > 1 ? std::sqrt(var / static_cast<double>(values.size() - 1)) : 0.0;
      double median = 0.0;
      if (!values.empty()) {
        std::sort(values.begin(), values.end());
        const std::size_t h = values.size() / 2;
        median = values.size() % 2 ? values[h] : 0.5 * (values[h - 1] + values[h]);
      }
      report.rows.push_back({s.name, f, mean, sd, median});
      view_sum += mean;
    }
    report.view_means.emplace_back(s.name, view_sum / static_cast<double>(s.channels));
  }
  return report;
}

// ---- synthetic data ------------------------------------------------------------------------

std::string_view to_string(SynthKind kind) {
  switch (kind) {
    case SynthKind::kComplementary:
      return "complementary";
    case SynthKind::kRedundant:
      return "redundant";
    case SynthKind::kNoisyView:
      return "noisy-view";
  }
  return "";
}

SynthKind parse_synth_kind(std::string_view name) {
  if (name == "complementary") return SynthKind::kComplementary;
  if (name == "redundant") return SynthKind::kRedundant;
  if (name == "noisy-view" || name == "noisy") return SynthKind::kNoisyView;
  throw ConfigError("unknown synthetic dataset '" + std::string(name) + "'");
}

void SynthSpec::validate() const {
  if (train_samples < 4 || test_samples < 4) throw ConfigError("synthetic splits need at least 4 samples each");
  if (steps < 4) throw ConfigError("synthetic series need at least 4 steps");
  if (!(noise >= 0.0) || !std::isfinite(noise)) throw ConfigError("synthetic noise must be finite and nonnegative");
}

namespace {

struct Place {
  const char* continent;
  const char* country;
  double lat, lon;
};

constexpr Place kPlaces[] = {
    {"Africa", "Kenya", 0.0, 37.9},        {"Africa", "Togo", 8.6, 0.8},
    {"Asia", "China", 35.0, 104.0},        {"Europe", "France", 46.2, 2.2},
    {"Europe", "Germany", 51.2, 10.4},     {"North America", "United States", 39.8, -98.6},
    {"South America", "Brazil", -14.2, -51.9},
};

SampleMeta synth_meta(std::size_t index, bool is_test, Rng& rng) {
  const Place& p = kPlaces[rng.below(std::size(kPlaces))];
  SampleMeta m;
  char id[16];
  std::snprintf(id, sizeof id, "s%06zu", index);
  m.id = id;
  m.continent = p.continent;
  m.country = p.country;
  m.year = 2019 + static_cast<int>(rng.below(3));
  m.latitude = p.lat + rng.uniform(-2.0, 2.0);
  m.longitude = p.lon + rng.uniform(-2.0, 2.0);
  m.is_test = is_test;
  return m;
}

std::vector<float> sinusoid_view(std::size_t steps, std::size_t channels, double amplitude, double phase, double noise,
                                 double base, Rng& rng) {
  std::vector<float> out(steps * channels);
  for (std::size_t c = 0; c < channels; ++c) {
    const double gain = amplitude * (0.6 + 0.4 * static_cast<double>(c + 1) / static_cast<double>(channels));
    const double offset = base + rng.normal(0.0, 0.05);
    for (std::size_t t = 0; t < steps; ++t) {
      const double angle = 2.0 * std::numbers::pi * static_cast<double>(t) / static_cast<double>(steps) + phase;
      out[t * channels + c] = static_cast<float>(offset + gain * std::sin(angle) + rng.normal(0.0, noise));
    }
  }
  return out;
}

std::vector<float> noise_view(std::size_t size, double sd, Rng& rng) {
  std::vector<float> out(size);
  for (float& x : out) x = static_cast<float>(rng.normal(0.0, sd));
  return out;
}

}  // namespace

Dataset synth_generate(const SynthSpec& spec, std::uint64_t seed) {
  spec.validate();
  const std::size_t steps = spec.steps;
  auto temporal = [&](const char* name, std::size_t channels) { return ViewSchema{name, true, steps, channels}; };

  std::vector<ViewSchema> schemas;
  switch (spec.kind) {
    case SynthKind::kComplementary:
      schemas = {temporal("optical", 11), temporal("radar", 2)};
      break;
    case SynthKind::kRedundant:
      schemas = {temporal("optical", 11), temporal("radar", 2), temporal("weather", 2), temporal("ndvi", 1),
                 ViewSchema{"topography", false, 0, 2}};
      break;
    case SynthKind::kNoisyView:
      schemas = {temporal("optical", 11), temporal("radar", 2), temporal("weather", 2)};
      break;
  }
  Dataset data(Task::kBinary, schemas);
  const double pi = std::numbers::pi;

  std::size_t index = 0;
  for (int part = 0; part < 2; ++part) {
    const bool is_test = part == 1;
    const std::size_t n = is_test ? spec.test_samples : spec.train_samples;
    Rng order = Rng::derive(seed, is_test ? "synth.test.order" : "synth.train.order");
    // Exactly balanced over the four (bit1, bit2) combinations, then shuffled.
    std::vector<std::uint32_t> codes(n);
    for (std::size_t i = 0; i < n; ++i) codes[i] = static_cast<std::uint32_t>(i % 4);
    shuffle(codes, order);

    for (std::size_t i = 0; i < n; ++i, ++index) {
      Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(index));
      const std::uint32_t bit1 = codes[i] & 1u, bit2 = codes[i] >> 1;
      std::vector<std::vector<float>> views;
      std::uint32_t label = 0;
      switch (spec.kind) {
        case SynthKind::kComplementary: {
          label = bit1 ^ bit2;
          const double jitter = rng.uniform(-0.3, 0.3);
          views.push_back(sinusoid_view(steps, 11, rng.uniform(0.8, 1.2), (bit1 ? pi : 0.0) + jitter, spec.noise, 0.0, rng));
          const double amplitude = (bit2 ? 1.5 : 0.5) * rng.uniform(0.9, 1.1);
          views.push_back(sinusoid_view(steps, 2, amplitude, rng.uniform(0.0, 2.0 * pi), spec.noise, 0.0, rng));
          break;
        }
        case SynthKind::kRedundant: {
          label = bit1;
          const double phase = (label ? pi : 0.0) + rng.uniform(-0.3, 0.3);
          // Reflectance-like optical bands so NDVI is well defined.
          std::vector<float> optical = sinusoid_view(steps, 11, 0.1, phase, 0.02 * spec.noise, 0.3, rng);
          for (std::size_t t = 0; t < steps; ++t) {
            optical[t * 11 + kNirBand] += static_cast<float>(0.15 * (1.0 + std::sin(2.0 * pi * static_cast<double>(t) / static_cast<double>(steps) + phase)));
          }
          std::vector<double> wide(optical.begin(), optical.end());
          std::vector<double> ndvi = compute_ndvi(wide, 11);
          views.push_back(std::move(optical));
          views.push_back(sinusoid_view(steps, 2, label ? 1.5 : 0.5, rng.uniform(0.0, 2.0 * pi), spec.noise, 0.0, rng));
          views.push_back(sinusoid_view(steps, 2, 1.0, phase, spec.noise, 0.0, rng));
          views.emplace_back(ndvi.begin(), ndvi.end());
          views.push_back({static_cast<float>(rng.normal(label ? 1.0 : -1.0, 0.5)),
                           static_cast<float>(rng.normal(label ? 0.5 : -0.5, 0.5))});
          break;
        }
        case SynthKind::kNoisyView: {
          label = bit1;
          const double phase = (label ? pi : 0.0) + rng.uniform(-0.3, 0.3);
          views.push_back(sinusoid_view(steps, 11, 1.0, phase, spec.noise, 0.0, rng));
          views.push_back(sinusoid_view(steps, 2, label ? 1.5 : 0.5, rng.uniform(0.0, 2.0 * pi), spec.noise, 0.0, rng));
          views.push_back(noise_view(steps * 2, 1.0, rng));
          break;
        }
      }
      data.add(views, label, synth_meta(index, is_test, rng));
    }
  }
  return data;
}

std::pair<Dataset, Dataset> split(const Dataset& data, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("test fraction must lie in (0, 1)");
  const std::size_t k = data.num_classes();
  std::vector<std::vector<std::size_t>> by_class(k);
  for (std::size_t i = 0; i < data.size(); ++i) by_class[data.label(i)].push_back(i);

  // Largest-remainder allocation of round(fraction * N) test samples.
  const auto target = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(data.size())));
  std::vector<std::size_t> take(k);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t allocated = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const double exact = test_fraction * static_cast<double>(by_class[c].size());
    take[c] = static_cast<std::size_t>(std::floor(exact));
    allocated += take[c];
    remainders.emplace_back(-(exact - std::floor(exact)), c);
  }
  std::sort(remainders.begin(), remainders.end());
  for (std::size_t r = 0; allocated < target && r < remainders.size(); ++r) {
    const std::size_t c = remainders[r].second;
    if (take[c] < by_class[c].size()) {
      ++take[c];
      ++allocated;
    }
  }
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t n = by_class[c].size();
    if (n >= 2) take[c] = std::clamp<std::size_t>(take[c], 1, n - 1);
  }

  std::vector<std::size_t> train, test;
  for (std::size_t c = 0; c < k; ++c) {
    Rng rng = Rng::derive(seed, "split.class" + std::to_string(c));
    shuffle(by_class[c], rng);
    test.insert(test.end(), by_class[c].begin(), by_class[c].begin() + static_cast<std::ptrdiff_t>(take[c]));
    train.insert(train.end(), by_class[c].begin() + static_cast<std::ptrdiff_t>(take[c]), by_class[c].end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {data.subset(train), data.subset(test)};
}

}  // namespace mvl
