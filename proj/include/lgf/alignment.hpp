#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "lgf/dataset.hpp"
#include "lgf/kriging.hpp"

namespace lgf::kriging {

// Both fidelities on one shared state grid.
struct AlignedPair {
  std::vector<std::string> state_names;
  std::vector<std::string> response_names;
  Eigen::MatrixXd states;  // N x p, lexicographic order
  Eigen::MatrixXd low;     // N x q
  Eigen::MatrixXd high;    // N x q
  // False where the value was filled in by Kriging.
  std::vector<bool> low_observed;
  std::vector<bool> high_observed;

  std::size_t rows() const { return static_cast<std::size_t>(states.rows()); }
  Eigen::MatrixXd delta() const { return high - low; }
};

// Per-dimension intersection of the two bounding boxes; throws InputError
// when it is empty.
void intersection_box(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, Eigen::VectorXd& lower,
                      Eigen::VectorXd& upper);

// Grid: union of both state sets inside the intersection box, deduplicated
// and sorted. Observed values are copied (duplicates averaged); each missing
// value comes from the Kriging model of its own fidelity.
AlignedPair align_datasets(const data::DataSet& lf, const data::DataSet& hf, const KrigingConfig& config = {});

// Columns: states..., then `<r>_L,<r>_H,<r>_delta` per response r.
void write_aligned_csv(const AlignedPair& pair, std::ostream& out);
void save_aligned_csv(const AlignedPair& pair, const std::filesystem::path& path);
AlignedPair read_aligned_csv(std::istream& in, const std::string& source);
AlignedPair load_aligned_csv(const std::filesystem::path& path);

// Low-fidelity carrier for inference: the LF states plus `extra` states,
// deduplicated and sorted, with y_L observed where available and Kriged
// elsewhere. `extra_rows[i]` is the sequence position of extra.row(i).
struct Carrier {
  Eigen::MatrixXd states;
  Eigen::MatrixXd low;
  std::vector<std::size_t> extra_rows;
};

Carrier build_carrier(const data::DataSet& lf, const Eigen::MatrixXd& extra, const KrigingConfig& config = {});

}  // namespace lgf::kriging
