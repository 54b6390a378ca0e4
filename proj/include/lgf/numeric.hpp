#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

namespace lgf::numeric {

struct Box {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
};

struct NelderMeadOptions {
  std::size_t max_evaluations = 200;
  double x_tolerance = 1e-6;
  double f_tolerance = 1e-10;
  // Initial simplex edge as a fraction of each box width.
  double initial_step = 0.1;
};

struct Minimum {
  Eigen::VectorXd x;
  double value = 0.0;
  std::size_t evaluations = 0;
};

// Nelder–Mead restricted to an axis-aligned box by projecting every trial
// point onto it. `f` may return +inf for infeasible points.
Minimum nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f, Eigen::VectorXd start, const Box& box,
                    const NelderMeadOptions& options = {});

// Runs nelder_mead from each start and returns the lowest minimum; ties keep
// the earliest start.
Minimum multi_start_minimize(const std::function<double(const Eigen::VectorXd&)>& f,
                             const std::vector<Eigen::VectorXd>& starts, const Box& box,
                             const NelderMeadOptions& options = {});

// `count` log-spaced values covering [lo, hi].
std::vector<double> log_spaced(double lo, double hi, std::size_t count);

struct JitterPolicy {
  // Tried only when the plain factorisation fails or has a pivot below
  // 1e-14 * trace / n. Starts at initial * trace / n and grows by `growth`
  // until it would exceed maximum * trace / n.
  double initial = 1e-10;
  double maximum = 1e-4;
  double growth = 10.0;
};

struct Factorization {
  Eigen::LLT<Eigen::MatrixXd> llt;
  double jitter = 0.0;
  double log_determinant() const;
};

// Cholesky with escalating diagonal jitter. Returns false when every level
// fails; `out` is then unspecified.
bool try_jittered_cholesky(const Eigen::MatrixXd& matrix, Factorization& out, const JitterPolicy& policy = {});

// As above but throws NumericError carrying a condition-number estimate.
Factorization jittered_cholesky(const Eigen::MatrixXd& matrix, const char* what, const JitterPolicy& policy = {});

// Lexicographic row order of [states | values], used to canonicalise training
// sets before likelihood evaluation.
std::vector<std::size_t> lexicographic_order(const Eigen::MatrixXd& states, const Eigen::VectorXd& values);

}  // namespace lgf::numeric
