#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lgf/tensor.hpp"

namespace lgf::data {

enum class Role { state, response, passthrough };
enum class Fidelity { low, high };

const char* to_string(Role role);
const char* to_string(Fidelity fidelity);
Role parse_role(const std::string& text);

struct ColumnSpec {
  std::string name;
  Role role = Role::state;
  std::string unit;
};

struct Schema {
  std::vector<ColumnSpec> columns;

  std::vector<std::string> names(Role role) const;
  std::size_t count(Role role) const;
  static Schema make(const std::vector<std::string>& states, const std::vector<std::string>& responses,
                     const std::vector<std::string>& passthrough = {});
};

// Sidecar CSV with header `column,role,unit`.
Schema read_schema(std::istream& in, const std::string& source);
Schema load_schema(const std::filesystem::path& path);
void save_schema(const Schema& schema, const std::filesystem::path& path);

struct DataSet {
  std::vector<std::string> state_names;
  std::vector<std::string> response_names;
  std::vector<std::string> passthrough_names;
  Eigen::MatrixXd states;       // N x p
  Eigen::MatrixXd responses;    // N x q
  Eigen::MatrixXd passthrough;  // N x extra, carried but never modelled
  Fidelity fidelity = Fidelity::low;

  std::size_t rows() const { return static_cast<std::size_t>(states.rows()); }
  std::size_t p() const { return state_names.size(); }
  std::size_t q() const { return response_names.size(); }
  Schema schema() const;
  // [states, responses], state columns first.
  Eigen::MatrixXd table() const;
  DataSet select_rows(std::span<const std::size_t> rows) const;
  // Throws InputError when shapes disagree with names or values are not finite.
  void validate() const;
};

DataSet read_csv(std::istream& in, const std::string& source, const Schema& schema, Fidelity fidelity);
DataSet load_csv(const std::filesystem::path& path, const Schema& schema, Fidelity fidelity);
// Columns in schema order: states, responses, passthrough.
void write_csv(const DataSet& data, std::ostream& out);
void save_csv(const DataSet& data, const std::filesystem::path& path);

DataSet concatenate(const std::vector<const DataSet*>& parts);

// Per-column z-score parameters.
struct NormStats {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd scale;

  static NormStats identity(Eigen::Index columns);
  // Fitted on training rows only. A constant column keeps mean 0 and scale 1
  // (values pass through untouched) and raises a warning naming it.
  static NormStats fit(const Eigen::MatrixXd& train, const std::vector<std::string>& names = {});

  Eigen::Index columns() const { return mean.size(); }
  Eigen::MatrixXd normalize(const Eigen::MatrixXd& m) const;
  Eigen::MatrixXd denormalize(const Eigen::MatrixXd& m) const;
};

DataSet normalize(const DataSet& data, const NormStats& state_stats, const NormStats& response_stats);
DataSet denormalize(const DataSet& data, const NormStats& state_stats, const NormStats& response_stats);

// Windows M_k = table[s_k : s_k + L, :] stacked as a (n, 1, L, d) tensor.
struct WindowBatch {
  Tensor blocks;
  std::vector<std::size_t> starts;
  // Real (unpadded) rows per window; equals `length` except in a padded tail chunk.
  std::vector<std::size_t> valid;
  std::size_t length = 0;
  std::size_t stride = 0;
  std::size_t source_rows = 0;

  std::size_t count() const { return starts.size(); }
  // Sub-batch of the listed windows, in the given order.
  Tensor gather(std::span<const std::size_t> which) const;
};

// Starts 0, S, 2S, ... while s + L <= N, plus a tail window at N - L when the
// stride does not tile the sequence. Requires 1 <= S <= L.
WindowBatch sliding_windows(const Eigen::MatrixXd& table, std::size_t length, std::size_t stride);
// Non-overlapping chunks of L rows; a short tail chunk is padded by repeating
// its last row.
WindowBatch chunk_windows(const Eigen::MatrixXd& table, std::size_t length);

// Each row is the mean of all window outputs covering it. `outputs` is
// (n, 1, L, d_y) and the result N x d_y; padded rows are ignored.
Eigen::MatrixXd reconstruct_from_windows(const WindowBatch& batch, const Tensor& outputs);

struct Split {
  DataSet train;
  DataSet test;
};

// Train: every other case in full, then the first ceil(n/2) rows of the
// target case. Test: the remaining target rows.
Split split_leave_half_out(const std::vector<DataSet>& cases, std::size_t target_case);

struct BlockSplitConfig {
  std::string mach_column = "Ma";
  double threshold = 0.05;
  std::size_t train_blocks = 4;
  std::size_t test_blocks = 1;
};

// Block b spans rows [boundaries[b], boundaries[b + 1]).
std::vector<std::size_t> mach_block_boundaries(const DataSet& data, const BlockSplitConfig& config);
// Blocks split at |delta Ma| > threshold and assigned cyclically: within each
// cycle of train_blocks + test_blocks blocks the last test_blocks go to test.
Split split_mach_blocks(const DataSet& data, const BlockSplitConfig& config = {});

enum class SyntheticKind { smooth, shock };
SyntheticKind parse_synthetic_kind(const std::string& text);

struct SyntheticConfig {
  SyntheticKind kind = SyntheticKind::smooth;
  std::size_t n_lf = 400;
  std::size_t n_hf = 40;
  double noise = 0.0;
  std::uint64_t seed = 42;
};

// High-fidelity truth at x.
double synthetic_high(SyntheticKind kind, double x);
double synthetic_low(SyntheticKind kind, double x);

// One state `x` on [0, 1] and one response `y`. Both fidelities sit on
// uniform grids; Gaussian noise is added to the high-fidelity values only.
std::pair<DataSet, DataSet> gen_synthetic(const SyntheticConfig& config);

}  // namespace lgf::data
