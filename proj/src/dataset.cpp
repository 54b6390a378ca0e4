#include "lgf/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <numbers>
#include <ostream>
#include <set>

#include "lgf/csv.hpp"
#include "lgf/error.hpp"

namespace lgf::data {

namespace {

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& m, std::span<const std::size_t> rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

std::ofstream open_for_writing(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  return out;
}

}  // namespace

const char* to_string(Role role) {
  switch (role) {
    case Role::state: return "state";
    case Role::response: return "response";
    case Role::passthrough: return "passthrough";
  }
  return "?";
}

const char* to_string(Fidelity fidelity) { return fidelity == Fidelity::low ? "LF" : "HF"; }

Role parse_role(const std::string& text) {
  const std::string t = lower(text);
  if (t == "state") return Role::state;
  if (t == "response") return Role::response;
  if (t == "passthrough") return Role::passthrough;
  throw InputError("schema: unknown role '" + text + "' (expected state, response or passthrough)");
}

std::vector<std::string> Schema::names(Role role) const {
  std::vector<std::string> out;
  for (const auto& c : columns) {
    if (c.role == role) out.push_back(c.name);
  }
  return out;
}

std::size_t Schema::count(Role role) const { return names(role).size(); }

Schema Schema::make(const std::vector<std::string>& states, const std::vector<std::string>& responses,
                    const std::vector<std::string>& passthrough) {
  Schema s;
  for (const auto& n : states) s.columns.push_back({n, Role::state, ""});
  for (const auto& n : responses) s.columns.push_back({n, Role::response, ""});
  for (const auto& n : passthrough) s.columns.push_back({n, Role::passthrough, ""});
  return s;
}

Schema read_schema(std::istream& in, const std::string& source) {
  const csv::Table t = csv::read(in, source);
  const std::size_t name = t.column("column"), role = t.column("role");
  const auto unit = std::find(t.header.begin(), t.header.end(), "unit");
  Schema s;
  std::set<std::string> seen;
  for (const auto& row : t.rows) {
    if (!seen.insert(row[name]).second) throw InputError(source + ": column '" + row[name] + "' listed twice");
    ColumnSpec spec{row[name], parse_role(row[role]), ""};
    if (unit != t.header.end()) spec.unit = row[static_cast<std::size_t>(unit - t.header.begin())];
    s.columns.push_back(std::move(spec));
  }
  if (s.count(Role::state) == 0 || s.count(Role::response) == 0) {
    throw InputError(source + ": schema needs at least one state and one response column");
  }
  return s;
}

Schema load_schema(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open schema '" + path.string() + "'");
  return read_schema(in, path.string());
}

void save_schema(const Schema& schema, const std::filesystem::path& path) {
  auto out = open_for_writing(path);
  out << "column,role,unit\n";
  for (const auto& c : schema.columns) out << c.name << ',' << to_string(c.role) << ',' << c.unit << '\n';
}

Schema DataSet::schema() const { return Schema::make(state_names, response_names, passthrough_names); }

Eigen::MatrixXd DataSet::table() const {
  Eigen::MatrixXd out(states.rows(), states.cols() + responses.cols());
  out << states, responses;
  return out;
}

DataSet DataSet::select_rows(std::span<const std::size_t> rows) const {
  DataSet out = *this;
  out.states = take_rows(states, rows);
  out.responses = take_rows(responses, rows);
  out.passthrough = take_rows(passthrough, rows);
  return out;
}

void DataSet::validate() const {
  if (static_cast<std::size_t>(states.cols()) != p() || static_cast<std::size_t>(responses.cols()) != q() ||
      static_cast<std::size_t>(passthrough.cols()) != passthrough_names.size()) {
    throw InputError("dataset: matrix widths do not match the column roles");
  }
  if (responses.rows() != states.rows() || passthrough.rows() != states.rows()) {
    throw InputError("dataset: role matrices have different row counts");
  }
  if (!states.allFinite() || !responses.allFinite() || !passthrough.allFinite()) {
    throw InputError("dataset: values must be finite");
  }
}

DataSet read_csv(std::istream& in, const std::string& source, const Schema& schema, Fidelity fidelity) {
  const csv::Table t = csv::read(in, source);
  for (const auto& h : t.header) {
    const bool known = std::any_of(schema.columns.begin(), schema.columns.end(),
                                   [&](const ColumnSpec& c) { return c.name == h; });
    if (!known) throw InputError(source + ": column '" + h + "' is not in the schema");
  }
  if (t.rows.empty()) throw InputError(source + ": no data rows");

  DataSet d;
  d.fidelity = fidelity;
  d.state_names = schema.names(Role::state);
  d.response_names = schema.names(Role::response);
  d.passthrough_names = schema.names(Role::passthrough);
  const auto n = static_cast<Eigen::Index>(t.rows.size());
  auto fill = [&](const std::vector<std::string>& names, Eigen::MatrixXd& m) {
    m.resize(n, static_cast<Eigen::Index>(names.size()));
    for (std::size_t c = 0; c < names.size(); ++c) {
      std::size_t col;
      try {
        col = t.column(names[c]);
      } catch (const InputError&) {
        throw InputError(source + ": missing column '" + names[c] + "'");
      }
      for (Eigen::Index r = 0; r < n; ++r) {
        const std::string where = source + ": data row " + std::to_string(r + 1) + ", column '" + names[c] + "'";
        m(r, static_cast<Eigen::Index>(c)) = csv::parse_number(t.rows[static_cast<std::size_t>(r)][col], where);
      }
    }
  };
  fill(d.state_names, d.states);
  fill(d.response_names, d.responses);
  fill(d.passthrough_names, d.passthrough);
  return d;
}

DataSet load_csv(const std::filesystem::path& path, const Schema& schema, Fidelity fidelity) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  return read_csv(in, path.string(), schema, fidelity);
}

void write_csv(const DataSet& data, std::ostream& out) {
  std::vector<std::string> header = data.state_names;
  header.insert(header.end(), data.response_names.begin(), data.response_names.end());
  header.insert(header.end(), data.passthrough_names.begin(), data.passthrough_names.end());
  csv::write_row(out, header);
  std::vector<double> row;
  for (Eigen::Index r = 0; r < data.states.rows(); ++r) {
    row.clear();
    for (Eigen::Index c = 0; c < data.states.cols(); ++c) row.push_back(data.states(r, c));
    for (Eigen::Index c = 0; c < data.responses.cols(); ++c) row.push_back(data.responses(r, c));
    for (Eigen::Index c = 0; c < data.passthrough.cols(); ++c) row.push_back(data.passthrough(r, c));
    csv::write_numbers(out, row);
  }
}

void save_csv(const DataSet& data, const std::filesystem::path& path) {
  auto out = open_for_writing(path);
  write_csv(data, out);
}

DataSet concatenate(const std::vector<const DataSet*>& parts) {
  if (parts.empty()) throw InputError("concatenate: nothing to join");
  DataSet out = *parts.front();
  Eigen::Index n = 0;
  for (const DataSet* d : parts) {
    if (d->state_names != out.state_names || d->response_names != out.response_names ||
        d->passthrough_names != out.passthrough_names) {
      throw InputError("concatenate: datasets have different schemas");
    }
    n += d->states.rows();
  }
  out.states.resize(n, out.states.cols());
  out.responses.resize(n, out.responses.cols());
  out.passthrough.resize(n, out.passthrough.cols());
  Eigen::Index at = 0;
  for (const DataSet* d : parts) {
    const Eigen::Index k = d->states.rows();
    out.states.middleRows(at, k) = d->states;
    out.responses.middleRows(at, k) = d->responses;
    out.passthrough.middleRows(at, k) = d->passthrough;
    at += k;
  }
  return out;
}

NormStats NormStats::identity(Eigen::Index columns) {
  return {Eigen::RowVectorXd::Zero(columns), Eigen::RowVectorXd::Ones(columns)};
}

NormStats NormStats::fit(const Eigen::MatrixXd& train, const std::vector<std::string>& names) {
  if (train.rows() == 0) throw InputError("NormStats: no training rows");
  NormStats s = identity(train.cols());
  const double n = static_cast<double>(train.rows());
  for (Eigen::Index c = 0; c < train.cols(); ++c) {
    const double mean = train.col(c).mean();
    const double var = (train.col(c).array() - mean).square().sum() / n;
    const double sd = std::sqrt(var);
    if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
      const std::string name =
          static_cast<std::size_t>(c) < names.size() ? names[static_cast<std::size_t>(c)] : std::to_string(c);
      log_warning("column '" + name + "' is constant on the training rows; left unnormalised");
      continue;
    }
    s.mean[c] = mean;
    s.scale[c] = sd;
  }
  return s;
}

Eigen::MatrixXd NormStats::normalize(const Eigen::MatrixXd& m) const {
  if (m.cols() != mean.size()) {
    throw ShapeError("normalize: " + std::to_string(m.cols()) + " columns, stats for " + std::to_string(mean.size()));
  }
  return (m.rowwise() - mean).array().rowwise() / scale.array();
}

Eigen::MatrixXd NormStats::denormalize(const Eigen::MatrixXd& m) const {
  if (m.cols() != mean.size()) {
    throw ShapeError("denormalize: " + std::to_string(m.cols()) + " columns, stats for " +
                     std::to_string(mean.size()));
  }
  return (m.array().rowwise() * scale.array()).matrix().rowwise() + mean;
}

DataSet normalize(const DataSet& data, const NormStats& state_stats, const NormStats& response_stats) {
  DataSet out = data;
  out.states = state_stats.normalize(data.states);
  out.responses = response_stats.normalize(data.responses);
  return out;
}

DataSet denormalize(const DataSet& data, const NormStats& state_stats, const NormStats& response_stats) {
  DataSet out = data;
  out.states = state_stats.denormalize(data.states);
  out.responses = response_stats.denormalize(data.responses);
  return out;
}

Tensor WindowBatch::gather(std::span<const std::size_t> which) const {
  const std::size_t block = length * blocks.dim(3);
  Tensor out({which.size(), 1, length, blocks.dim(3)});
  for (std::size_t i = 0; i < which.size(); ++i) {
    if (which[i] >= count()) throw ShapeError("WindowBatch::gather: window index out of range");
    std::copy_n(blocks.data().begin() + static_cast<std::ptrdiff_t>(which[i] * block), block,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * block));
  }
  return out;
}

namespace {

WindowBatch stack(const Eigen::MatrixXd& table, std::size_t length, std::size_t stride,
                  std::vector<std::size_t> starts) {
  WindowBatch b;
  b.length = length;
  b.stride = stride;
  b.source_rows = static_cast<std::size_t>(table.rows());
  const auto d = static_cast<std::size_t>(table.cols());
  b.blocks = Tensor({starts.size(), 1, length, d});
  for (std::size_t k = 0; k < starts.size(); ++k) {
    const std::size_t valid = std::min(length, b.source_rows - starts[k]);
    for (std::size_t r = 0; r < length; ++r) {
      const auto src = static_cast<Eigen::Index>(starts[k] + std::min(r, valid - 1));
      for (std::size_t c = 0; c < d; ++c) b.blocks.at(k, 0, r, c) = table(src, static_cast<Eigen::Index>(c));
    }
    b.valid.push_back(valid);
  }
  b.starts = std::move(starts);
  return b;
}

void check_window_args(const Eigen::MatrixXd& table, std::size_t length) {
  if (length == 0) throw InputError("windows: length must be at least 1");
  if (static_cast<std::size_t>(table.rows()) < length) {
    throw InputError("windows: sequence has " + std::to_string(table.rows()) + " rows, shorter than window length " +
                     std::to_string(length) + " (pad the sequence or reduce L)");
  }
}

}  // namespace

WindowBatch sliding_windows(const Eigen::MatrixXd& table, std::size_t length, std::size_t stride) {
  check_window_args(table, length);
  if (stride == 0 || stride > length) {
    throw InputError("sliding_windows: stride must lie in [1, L] so every row is covered (got stride " +
                     std::to_string(stride) + ", L " + std::to_string(length) + ")");
  }
  const auto n = static_cast<std::size_t>(table.rows());
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + length <= n; s += stride) starts.push_back(s);
  if ((n - length) % stride != 0) starts.push_back(n - length);
  return stack(table, length, stride, std::move(starts));
}

WindowBatch chunk_windows(const Eigen::MatrixXd& table, std::size_t length) {
  check_window_args(table, length);
  const auto n = static_cast<std::size_t>(table.rows());
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s < n; s += length) starts.push_back(s);
  return stack(table, length, length, std::move(starts));
}

Eigen::MatrixXd reconstruct_from_windows(const WindowBatch& batch, const Tensor& outputs) {
  if (outputs.rank() != 4 || outputs.dim(0) != batch.count() || outputs.dim(1) != 1 ||
      outputs.dim(2) != batch.length) {
    throw ShapeError("reconstruct_from_windows: outputs " + lgf::to_string(outputs.shape()) + " do not match " +
                     std::to_string(batch.count()) + " windows of length " + std::to_string(batch.length));
  }
  const std::size_t dy = outputs.dim(3);
  // Running mean m += (x - m) / k: identical contributions reproduce the
  // value exactly, which a sum-then-divide does not.
  Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(batch.source_rows), static_cast<Eigen::Index>(dy));
  std::vector<std::size_t> hits(batch.source_rows, 0);
  for (std::size_t k = 0; k < batch.count(); ++k) {
    for (std::size_t r = 0; r < batch.valid[k]; ++r) {
      const std::size_t row = batch.starts[k] + r;
      const double count = static_cast<double>(++hits[row]);
      for (std::size_t c = 0; c < dy; ++c) {
        double& m = mean(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(c));
        m += (outputs.at(k, 0, r, c) - m) / count;
      }
    }
  }
  for (std::size_t row = 0; row < batch.source_rows; ++row) {
    if (hits[row] == 0) throw ShapeError("reconstruct_from_windows: row " + std::to_string(row) + " is not covered");
  }
  return mean;
}

Split split_leave_half_out(const std::vector<DataSet>& cases, std::size_t target_case) {
  if (cases.size() < 2) throw InputError("leave-half-out: need at least 2 cases");
  if (target_case >= cases.size()) {
    throw InputError("leave-half-out: target case " + std::to_string(target_case) + " not present (have " +
                     std::to_string(cases.size()) + ")");
  }
  const DataSet& target = cases[target_case];
  const std::size_t n = target.rows(), keep = (n + 1) / 2;
  std::vector<std::size_t> first(keep), second(n - keep);
  for (std::size_t i = 0; i < keep; ++i) first[i] = i;
  for (std::size_t i = keep; i < n; ++i) second[i - keep] = i;
  const DataSet head = target.select_rows(first);
  std::vector<const DataSet*> parts;
  for (std::size_t c = 0; c < cases.size(); ++c) parts.push_back(c == target_case ? &head : &cases[c]);
  return {concatenate(parts), target.select_rows(second)};
}

std::vector<std::size_t> mach_block_boundaries(const DataSet& data, const BlockSplitConfig& config) {
  const auto it = std::find(data.state_names.begin(), data.state_names.end(), config.mach_column);
  if (it == data.state_names.end()) {
    throw InputError("mach-block split: no state column named '" + config.mach_column + "'");
  }
  const auto col = static_cast<Eigen::Index>(it - data.state_names.begin());
  std::vector<std::size_t> bounds{0};
  for (Eigen::Index r = 1; r < data.states.rows(); ++r) {
    if (std::abs(data.states(r, col) - data.states(r - 1, col)) > config.threshold) {
      bounds.push_back(static_cast<std::size_t>(r));
    }
  }
  bounds.push_back(data.rows());
  return bounds;
}

Split split_mach_blocks(const DataSet& data, const BlockSplitConfig& config) {
  if (config.train_blocks == 0 || config.test_blocks == 0) {
    throw InputError("mach-block split: ratio parts must be positive");
  }
  const auto bounds = mach_block_boundaries(data, config);
  const std::size_t blocks = bounds.size() - 1, cycle = config.train_blocks + config.test_blocks;
  if (blocks < cycle) {
    throw InputError("mach-block split: found " + std::to_string(blocks) + " Mach block(s), need at least " +
                     std::to_string(cycle) + " for a " + std::to_string(config.train_blocks) + ":" +
                     std::to_string(config.test_blocks) + " split");
  }
  std::vector<std::size_t> train, test;
  for (std::size_t b = 0; b < blocks; ++b) {
    auto& dst = (b % cycle) < config.train_blocks ? train : test;
    for (std::size_t r = bounds[b]; r < bounds[b + 1]; ++r) dst.push_back(r);
  }
  return {data.select_rows(train), data.select_rows(test)};
}

SyntheticKind parse_synthetic_kind(const std::string& text) {
  const std::string t = lower(text);
  if (t == "smooth") return SyntheticKind::smooth;
  if (t == "shock") return SyntheticKind::shock;
  throw ConfigError("unknown synthetic kind '" + text + "' (expected smooth or shock)");
}

namespace {

constexpr double kShockAt = 0.5;
constexpr double kShockWidth = 0.02;
constexpr double kShockShift = 0.03;

}  // namespace

double synthetic_high(SyntheticKind kind, double x) {
  if (kind == SyntheticKind::smooth) {
    const double a = 6.0 * x - 2.0;
    return a * a * std::sin(12.0 * x - 4.0);
  }
  return 0.5 * std::sin(2.0 * std::numbers::pi * x) + 0.8 * std::tanh((x - kShockAt) / kShockWidth);
}

double synthetic_low(SyntheticKind kind, double x) {
  if (kind == SyntheticKind::smooth) return 0.5 * synthetic_high(kind, x) + 10.0 * (x - 0.5) - 5.0;
  // Smeared and displaced front, slightly damped carrier, constant bias.
  return 0.45 * std::sin(2.0 * std::numbers::pi * x) + 0.1 +
         0.8 * std::tanh((x - kShockAt - kShockShift) / (4.0 * kShockWidth));
}

std::pair<DataSet, DataSet> gen_synthetic(const SyntheticConfig& config) {
  if (config.n_hf < 4 || config.n_lf < config.n_hf) {
    throw InputError("synthetic: need n_lf >= n_hf >= 4 (got n_lf=" + std::to_string(config.n_lf) +
                     ", n_hf=" + std::to_string(config.n_hf) + ")");
  }
  if (!(config.noise >= 0.0)) throw InputError("synthetic: noise must be nonnegative");
  auto make = [&](std::size_t n, Fidelity f) {
    DataSet d;
    d.fidelity = f;
    d.state_names = {"x"};
    d.response_names = {"y"};
    d.states.resize(static_cast<Eigen::Index>(n), 1);
    d.responses.resize(static_cast<Eigen::Index>(n), 1);
    d.passthrough.resize(static_cast<Eigen::Index>(n), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const double x = static_cast<double>(i) / static_cast<double>(n - 1);
      d.states(static_cast<Eigen::Index>(i), 0) = x;
      d.responses(static_cast<Eigen::Index>(i), 0) =
          f == Fidelity::low ? synthetic_low(config.kind, x) : synthetic_high(config.kind, x);
    }
    return d;
  };
  DataSet lf = make(config.n_lf, Fidelity::low), hf = make(config.n_hf, Fidelity::high);
  if (config.noise > 0.0) {
    Rng rng(config.seed);
    for (Eigen::Index i = 0; i < hf.responses.rows(); ++i) hf.responses(i, 0) += config.noise * rng.normal();
  }
  return {std::move(lf), std::move(hf)};
}

}  // namespace lgf::data
