#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

#include "lgf/numeric.hpp"

namespace lgf::kriging {

struct KrigingConfig {
  // User nugget added on top of the stability jitter (0 = interpolating).
  double nugget = 0.0;
  // Log-spaced isotropic starting points for the lengthscale search.
  std::size_t starts = 16;
  // Lengthscale bounds as multiples of each input dimension's range.
  double lengthscale_min = 1e-2;
  double lengthscale_max = 1e1;
  std::size_t max_evaluations_per_start = 80;
  numeric::JitterPolicy jitter;
};

// Ordinary Kriging with a Gaussian correlation
//   R(a, b) = exp(-1/2 * sum_k ((a_k - b_k) / l_k)^2)
// and a constant unknown mean estimated by generalised least squares.
class KrigingModel {
 public:
  // Prediction at `query`; rejects points outside the training bounding box.
  double predict(std::span<const double> query) const;
  double predict(const Eigen::VectorXd& query) const;
  bool in_bounds(std::span<const double> query) const;

  const Eigen::MatrixXd& training_states() const { return states_; }
  const Eigen::VectorXd& training_values() const { return values_; }
  const Eigen::VectorXd& lengthscales() const { return lengthscales_; }
  double process_variance() const { return process_variance_; }
  double mean() const { return mean_; }
  // Diagonal actually added to the correlation matrix (nugget + jitter).
  double nugget() const { return nugget_; }
  double log_likelihood() const { return log_likelihood_; }
  Eigen::Index dimension() const { return states_.cols(); }

  friend KrigingModel fit_kriging(const Eigen::MatrixXd&, const Eigen::VectorXd&, const KrigingConfig&);
  friend KrigingModel kriging_with_lengthscales(const Eigen::MatrixXd&, const Eigen::VectorXd&,
                                                const Eigen::VectorXd&, const KrigingConfig&);

 private:
  static KrigingModel build(Eigen::MatrixXd states, Eigen::VectorXd values, Eigen::VectorXd lengthscales,
                            const KrigingConfig& config);

  Eigen::MatrixXd states_;
  Eigen::VectorXd values_;
  Eigen::VectorXd lengthscales_;
  Eigen::VectorXd lower_, upper_;
  Eigen::VectorXd weights_;  // R^{-1} (y - mean)
  double mean_ = 0.0;
  double process_variance_ = 0.0;
  double nugget_ = 0.0;
  double log_likelihood_ = 0.0;
};

// Fits by maximising the concentrated log-likelihood over log-lengthscales.
// Duplicate states are averaged first; needs at least two distinct states.
KrigingModel fit_kriging(const Eigen::MatrixXd& states, const Eigen::VectorXd& values, const KrigingConfig& config = {});

// Same model with the lengthscales fixed (no search).
KrigingModel kriging_with_lengthscales(const Eigen::MatrixXd& states, const Eigen::VectorXd& values,
                                       const Eigen::VectorXd& lengthscales, const KrigingConfig& config = {});

inline double predict_kriging(const KrigingModel& model, std::span<const double> query) {
  return model.predict(query);
}

// Concentrated log-likelihood -N/2 log(sigma^2) - 1/2 log|R| for given
// lengthscales, or -inf when R cannot be factorised.
double concentrated_log_likelihood(const Eigen::MatrixXd& states, const Eigen::VectorXd& values,
                                   const Eigen::VectorXd& lengthscales, const KrigingConfig& config = {});

Eigen::MatrixXd gaussian_correlation(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                                     const Eigen::VectorXd& lengthscales);

// Rows with identical states collapsed to one, values averaged. Row order
// follows first appearance.
void average_duplicates(const Eigen::MatrixXd& states, const Eigen::VectorXd& values, Eigen::MatrixXd& out_states,
                        Eigen::VectorXd& out_values);

}  // namespace lgf::kriging
