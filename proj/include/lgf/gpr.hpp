#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lgf/numeric.hpp"

namespace lgf::gp {

// Squared-exponential kernel sf2 * exp(-1/2 sum_k ((a_k - b_k) / l_k)^2) plus
// i.i.d. observation noise.
struct Hyperparameters {
  double signal_variance = 1.0;
  Eigen::VectorXd lengthscales;
  double noise_variance = 0.0;
};

struct GprConfig {
  std::size_t starts = 8;
  std::size_t max_evaluations_per_start = 150;
  // Bounds relative to the target variance v (v = 1 for constant targets).
  double signal_variance_min = 1e-4;
  double signal_variance_max = 1e2;
  double noise_variance_min = 1e-8;
  double noise_variance_max = 1.0;
  // Lengthscale bounds relative to each input dimension's range.
  double lengthscale_min = 1e-2;
  double lengthscale_max = 1e1;
  numeric::JitterPolicy jitter;
};

enum class Mode { exact, fic };

Eigen::MatrixXd se_kernel(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const Hyperparameters& h);

// log N(y | 0, K + sn2 I), evaluated through a Cholesky factor; -inf when the
// covariance cannot be factorised.
double log_marginal_likelihood(const Eigen::MatrixXd& states, const Eigen::VectorXd& targets,
                               const Hyperparameters& h, const numeric::JitterPolicy& jitter = {});

class GPRModel {
 public:
  // Fixed hyperparameters, exact mode. Targets are centred on their mean.
  GPRModel(Eigen::MatrixXd states, Eigen::VectorXd targets, Hyperparameters h, numeric::JitterPolicy jitter = {});

  Mode mode() const { return active_ ? Mode::fic : Mode::exact; }
  const Hyperparameters& hyperparameters() const { return h_; }
  const Eigen::MatrixXd& states() const { return states_; }
  const Eigen::VectorXd& targets() const { return targets_; }
  double target_mean() const { return offset_; }
  std::size_t size() const { return static_cast<std::size_t>(states_.rows()); }
  double log_marginal_likelihood() const { return lml_; }

  double prior_variance() const { return h_.signal_variance; }
  // Predictive mean of the mode in use.
  double mean(std::span<const double> query) const;
  // Latent predictive variance of the mode in use.
  double variance(std::span<const double> query) const;
  double variance_exact(std::span<const double> query) const;
  // Requires fic mode.
  double variance_fic(std::span<const double> query) const;

  // Switches to fic mode with the given inducing rows (indices into states()).
  void use_active_subset(std::vector<std::size_t> subset);
  const std::vector<std::size_t>& active_subset() const;

 private:
  struct Fic {
    std::vector<std::size_t> subset;
    Eigen::MatrixXd inducing;
    Eigen::MatrixXd whiten;  // W with W K_MM W^T = I
    Eigen::LLT<Eigen::MatrixXd> a;  // I + V Lambda^-1 V^T
    Eigen::VectorXd mean_weights;   // mean = (W k_M)^T mean_weights
  };

  Eigen::VectorXd kernel_column(const Eigen::MatrixXd& rows, std::span<const double> query) const;

  Eigen::MatrixXd states_;
  Eigen::VectorXd targets_;  // centred
  double offset_ = 0.0;
  Hyperparameters h_;
  numeric::JitterPolicy jitter_;
  numeric::Factorization chol_;
  Eigen::VectorXd alpha_;
  double lml_ = 0.0;
  std::optional<Fic> active_;
};

// Maximises the log marginal likelihood over (signal variance, lengthscales,
// noise variance) with a multi-start bounded search in log space.
GPRModel fit_gpr(const Eigen::MatrixXd& states, const Eigen::VectorXd& targets, const GprConfig& config = {});

// FIC log marginal likelihood log N(y | 0, Q + Lambda) of the model's centred
// targets with inducing rows `subset` (in the given order).
double fic_log_marginal_likelihood(const GPRModel& model, std::span<const std::size_t> subset);

struct SelectionConfig {
  // Candidate pool cap; larger training sets are subsampled with `seed`.
  std::size_t candidate_cap = 2048;
  std::uint64_t seed = 42;
};

// Greedy forward selection of M inducing rows by FIC log marginal
// likelihood; ties go to the lowest row index. Returned sorted ascending.
std::vector<std::size_t> select_active_subset(const GPRModel& model, std::size_t m, const SelectionConfig& config = {});

// Standard normal quantile.
double normal_quantile(double p);

// U = (2 z_{1-alpha/2} / N) * sum sigma_i.
double uncertainty_metric(std::span<const double> sigmas, double alpha);

struct UncertaintyReport {
  std::vector<double> sigma;
  std::vector<double> lower;
  std::vector<double> upper;
  double u = 0.0;
  double alpha = 0.05;
  std::size_t n_test() const { return sigma.size(); }
};

UncertaintyReport make_report(std::span<const double> means, std::span<const double> sigmas, double alpha);

// Per-point predictive standard deviation and mean of the model's current mode.
UncertaintyReport evaluate_uncertainty(const GPRModel& model, const Eigen::MatrixXd& queries, double alpha);

// `index,sigma,lower,upper` rows.
void write_report_csv(const UncertaintyReport& report, std::ostream& out);
// `U,alpha,N_test` header plus one row.
void write_report_summary_csv(const UncertaintyReport& report, std::ostream& out);

}  // namespace lgf::gp
