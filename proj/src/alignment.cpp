#include "lgf/alignment.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>

#include "lgf/csv.hpp"
#include "lgf/error.hpp"

namespace lgf::kriging {

namespace {

using Key = std::vector<double>;

Key key_of(const Eigen::MatrixXd& m, Eigen::Index r) {
  Key k(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index c = 0; c < m.cols(); ++c) k[static_cast<std::size_t>(c)] = m(r, c);
  return k;
}

// Observed responses by exact state, duplicates averaged.
std::map<Key, Eigen::RowVectorXd> observed(const data::DataSet& d) {
  std::map<Key, std::pair<Eigen::RowVectorXd, double>> acc;
  for (Eigen::Index r = 0; r < d.states.rows(); ++r) {
    auto [it, inserted] = acc.try_emplace(key_of(d.states, r), Eigen::RowVectorXd::Zero(d.responses.cols()), 0.0);
    it->second.first += d.responses.row(r);
    it->second.second += 1.0;
  }
  std::map<Key, Eigen::RowVectorXd> out;
  for (auto& [k, v] : acc) out.emplace(k, v.second == 1.0 ? v.first : Eigen::RowVectorXd(v.first / v.second));
  return out;
}

// Kriging models per response column, fitted on first use.
class LazyModels {
 public:
  LazyModels(const data::DataSet& d, const KrigingConfig& config) : data_(d), config_(config) {}

  double predict(Eigen::Index response, std::span<const double> query) {
    if (models_.empty()) {
      for (Eigen::Index c = 0; c < data_.responses.cols(); ++c) {
        models_.push_back(fit_kriging(data_.states, data_.responses.col(c), config_));
      }
    }
    return models_[static_cast<std::size_t>(response)].predict(query);
  }

 private:
  const data::DataSet& data_;
  const KrigingConfig& config_;
  std::vector<KrigingModel> models_;
};

Eigen::MatrixXd sorted_unique(const std::vector<Key>& keys, Eigen::Index p) {
  std::vector<Key> sorted = keys;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  Eigen::MatrixXd out(static_cast<Eigen::Index>(sorted.size()), p);
  for (std::size_t r = 0; r < sorted.size(); ++r) {
    for (Eigen::Index c = 0; c < p; ++c) out(static_cast<Eigen::Index>(r), c) = sorted[r][static_cast<std::size_t>(c)];
  }
  return out;
}

std::ofstream open_for_writing(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  return out;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

void intersection_box(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, Eigen::VectorXd& lower,
                      Eigen::VectorXd& upper) {
  lower = a.colwise().minCoeff().cwiseMax(b.colwise().minCoeff()).transpose();
  upper = a.colwise().maxCoeff().cwiseMin(b.colwise().maxCoeff()).transpose();
  for (Eigen::Index k = 0; k < lower.size(); ++k) {
    if (lower[k] > upper[k]) {
      throw InputError("align: state ranges do not overlap in dimension " + std::to_string(k) + " (intersection [" +
                       csv::format_number(lower[k]) + ", " + csv::format_number(upper[k]) + "] is empty)");
    }
  }
}

AlignedPair align_datasets(const data::DataSet& lf, const data::DataSet& hf, const KrigingConfig& config) {
  if (lf.rows() == 0 || hf.rows() == 0) throw InputError("align: both datasets must be nonempty");
  if (lf.state_names != hf.state_names || lf.response_names != hf.response_names) {
    throw InputError("align: low- and high-fidelity datasets use different state/response columns");
  }
  lf.validate();
  hf.validate();
  Eigen::VectorXd lo, hi;
  intersection_box(lf.states, hf.states, lo, hi);

  std::vector<Key> keys;
  for (const data::DataSet* d : {&lf, &hf}) {
    for (Eigen::Index r = 0; r < d->states.rows(); ++r) {
      const auto row = d->states.row(r).transpose();
      if ((row.array() >= lo.array()).all() && (row.array() <= hi.array()).all()) keys.push_back(key_of(d->states, r));
    }
  }

  AlignedPair out;
  out.state_names = lf.state_names;
  out.response_names = lf.response_names;
  out.states = sorted_unique(keys, lf.states.cols());
  const Eigen::Index n = out.states.rows(), q = lf.responses.cols();
  out.low.resize(n, q);
  out.high.resize(n, q);
  out.low_observed.assign(static_cast<std::size_t>(n), false);
  out.high_observed.assign(static_cast<std::size_t>(n), false);

  const auto obs_low = observed(lf), obs_high = observed(hf);
  LazyModels k_low(lf, config), k_high(hf, config);
  for (Eigen::Index r = 0; r < n; ++r) {
    const Key key = key_of(out.states, r);
    auto fill = [&](const std::map<Key, Eigen::RowVectorXd>& obs, LazyModels& model, Eigen::MatrixXd& dst,
                    std::vector<bool>& flag) {
      if (auto it = obs.find(key); it != obs.end()) {
        dst.row(r) = it->second;
        flag[static_cast<std::size_t>(r)] = true;
        return;
      }
      for (Eigen::Index c = 0; c < q; ++c) dst(r, c) = model.predict(c, key);
    };
    fill(obs_low, k_low, out.low, out.low_observed);
    fill(obs_high, k_high, out.high, out.high_observed);
  }
  return out;
}

void write_aligned_csv(const AlignedPair& pair, std::ostream& out) {
  std::vector<std::string> header = pair.state_names;
  for (const auto& r : pair.response_names) {
    header.push_back(r + "_L");
    header.push_back(r + "_H");
    header.push_back(r + "_delta");
  }
  csv::write_row(out, header);
  const Eigen::MatrixXd delta = pair.delta();
  std::vector<double> row;
  for (Eigen::Index r = 0; r < pair.states.rows(); ++r) {
    row.clear();
    for (Eigen::Index c = 0; c < pair.states.cols(); ++c) row.push_back(pair.states(r, c));
    for (Eigen::Index c = 0; c < pair.low.cols(); ++c) {
      row.push_back(pair.low(r, c));
      row.push_back(pair.high(r, c));
      row.push_back(delta(r, c));
    }
    csv::write_numbers(out, row);
  }
}

void save_aligned_csv(const AlignedPair& pair, const std::filesystem::path& path) {
  auto out = open_for_writing(path);
  write_aligned_csv(pair, out);
}

AlignedPair read_aligned_csv(std::istream& in, const std::string& source) {
  const csv::Table t = csv::read(in, source);
  AlignedPair pair;
  std::vector<std::size_t> state_cols, low_cols, high_cols;
  for (const auto& h : t.header) {
    if (ends_with(h, "_delta")) pair.response_names.push_back(h.substr(0, h.size() - 6));
  }
  if (pair.response_names.empty()) throw InputError(source + ": no '<response>_delta' column");
  for (const auto& r : pair.response_names) {
    low_cols.push_back(t.column(r + "_L"));
    high_cols.push_back(t.column(r + "_H"));
  }
  for (std::size_t c = 0; c < t.header.size(); ++c) {
    const bool response_col = std::any_of(pair.response_names.begin(), pair.response_names.end(), [&](const auto& r) {
      return t.header[c] == r + "_L" || t.header[c] == r + "_H" || t.header[c] == r + "_delta";
    });
    if (!response_col) {
      pair.state_names.push_back(t.header[c]);
      state_cols.push_back(c);
    }
  }
  if (state_cols.empty()) throw InputError(source + ": no state columns");
  if (t.rows.empty()) throw InputError(source + ": no data rows");
  const auto n = static_cast<Eigen::Index>(t.rows.size());
  pair.states.resize(n, static_cast<Eigen::Index>(state_cols.size()));
  pair.low.resize(n, static_cast<Eigen::Index>(low_cols.size()));
  pair.high.resize(n, static_cast<Eigen::Index>(high_cols.size()));
  auto cell = [&](Eigen::Index r, std::size_t c) {
    return csv::parse_number(t.rows[static_cast<std::size_t>(r)][c],
                             source + ": data row " + std::to_string(r + 1) + ", column '" + t.header[c] + "'");
  };
  for (Eigen::Index r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < state_cols.size(); ++c) pair.states(r, static_cast<Eigen::Index>(c)) = cell(r, state_cols[c]);
    for (std::size_t c = 0; c < low_cols.size(); ++c) {
      pair.low(r, static_cast<Eigen::Index>(c)) = cell(r, low_cols[c]);
      pair.high(r, static_cast<Eigen::Index>(c)) = cell(r, high_cols[c]);
    }
  }
  // Provenance is not stored in the file.
  pair.low_observed.assign(static_cast<std::size_t>(n), true);
  pair.high_observed.assign(static_cast<std::size_t>(n), true);
  return pair;
}

AlignedPair load_aligned_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  return read_aligned_csv(in, path.string());
}

Carrier build_carrier(const data::DataSet& lf, const Eigen::MatrixXd& extra, const KrigingConfig& config) {
  if (lf.rows() == 0) throw InputError("carrier: empty low-fidelity dataset");
  if (extra.rows() > 0 && extra.cols() != lf.states.cols()) {
    throw InputError("carrier: extra states have " + std::to_string(extra.cols()) + " columns, expected " +
                     std::to_string(lf.states.cols()));
  }
  std::vector<Key> keys;
  for (Eigen::Index r = 0; r < lf.states.rows(); ++r) keys.push_back(key_of(lf.states, r));
  for (Eigen::Index r = 0; r < extra.rows(); ++r) keys.push_back(key_of(extra, r));

  Carrier out;
  out.states = sorted_unique(keys, lf.states.cols());
  const auto obs = observed(lf);
  LazyModels model(lf, config);
  out.low.resize(out.states.rows(), lf.responses.cols());
  std::map<Key, std::size_t> position;
  for (Eigen::Index r = 0; r < out.states.rows(); ++r) {
    const Key key = key_of(out.states, r);
    position.emplace(key, static_cast<std::size_t>(r));
    if (auto it = obs.find(key); it != obs.end()) {
      out.low.row(r) = it->second;
      continue;
    }
    for (Eigen::Index c = 0; c < lf.responses.cols(); ++c) {
      out.low(r, c) = model.predict(c, key);
    }
  }
  for (Eigen::Index r = 0; r < extra.rows(); ++r) out.extra_rows.push_back(position.at(key_of(extra, r)));
  return out;
}

}  // namespace lgf::kriging
