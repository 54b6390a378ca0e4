#include "lgf/kriging.hpp"

#include <cmath>
#include <limits>
#include <map>

#include "lgf/error.hpp"

namespace lgf::kriging {

namespace {

struct GlsFit {
  double mean = 0.0;
  double variance = 0.0;
  double log_likelihood = -std::numeric_limits<double>::infinity();
  double diagonal = 0.0;
  Eigen::VectorXd weights;
};

bool gls(const Eigen::MatrixXd& states, const Eigen::VectorXd& values, const Eigen::VectorXd& lengthscales,
         const KrigingConfig& config, GlsFit& out) {
  Eigen::MatrixXd r = gaussian_correlation(states, states, lengthscales);
  r.diagonal().array() += config.nugget;
  numeric::Factorization f;
  if (!numeric::try_jittered_cholesky(r, f, config.jitter)) return false;
  const Eigen::Index n = states.rows();
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(n);
  const Eigen::VectorXd r_inv_one = f.llt.solve(ones);
  const Eigen::VectorXd r_inv_y = f.llt.solve(values);
  out.mean = ones.dot(r_inv_y) / ones.dot(r_inv_one);
  const Eigen::VectorXd centred = values.array() - out.mean;
  out.weights = f.llt.solve(centred);
  out.variance = centred.dot(out.weights) / static_cast<double>(n);
  out.diagonal = config.nugget + f.jitter;
  // A flat response has zero process variance; the floor keeps the
  // likelihood finite so the search stays well defined.
  const double var_floor = std::max(out.variance, 1e-300);
  out.log_likelihood = -0.5 * static_cast<double>(n) * std::log(var_floor) - 0.5 * f.log_determinant();
  return std::isfinite(out.log_likelihood);
}

void check_inputs(const Eigen::MatrixXd& states, const Eigen::VectorXd& values) {
  if (states.rows() != values.size()) {
    throw InputError("kriging: " + std::to_string(states.rows()) + " states but " + std::to_string(values.size()) +
                     " values");
  }
  if (states.cols() == 0) throw InputError("kriging: states need at least one column");
  if (!states.allFinite() || !values.allFinite()) throw InputError("kriging: training data must be finite");
}

// Duplicates averaged, rows in lexicographic order: the fit then does not
// depend on the order training rows arrive in.
void canonicalise(const Eigen::MatrixXd& states, const Eigen::VectorXd& values, Eigen::MatrixXd& s,
                  Eigen::VectorXd& v) {
  Eigen::MatrixXd dedup_s;
  Eigen::VectorXd dedup_v;
  average_duplicates(states, values, dedup_s, dedup_v);
  const auto order = numeric::lexicographic_order(dedup_s, dedup_v);
  s.resize(dedup_s.rows(), dedup_s.cols());
  v.resize(dedup_v.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    s.row(static_cast<Eigen::Index>(i)) = dedup_s.row(static_cast<Eigen::Index>(order[i]));
    v[static_cast<Eigen::Index>(i)] = dedup_v[static_cast<Eigen::Index>(order[i])];
  }
  if (s.rows() < 2) {
    throw InputError("kriging: need at least 2 distinct training states, got " + std::to_string(s.rows()));
  }
}

Eigen::VectorXd ranges_of(const Eigen::MatrixXd& states) {
  Eigen::VectorXd r = states.colwise().maxCoeff() - states.colwise().minCoeff();
  for (Eigen::Index k = 0; k < r.size(); ++k) {
    if (!(r[k] > 0.0)) r[k] = 1.0;
  }
  return r;
}

}  // namespace

Eigen::MatrixXd gaussian_correlation(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                                     const Eigen::VectorXd& lengthscales) {
  Eigen::MatrixXd out(a.rows(), b.rows());
  const Eigen::RowVectorXd inv = lengthscales.cwiseInverse().transpose();
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      const double d2 = (a.row(i) - b.row(j)).cwiseProduct(inv).squaredNorm();
      out(i, j) = std::exp(-0.5 * d2);
    }
  }
  return out;
}

void average_duplicates(const Eigen::MatrixXd& states, const Eigen::VectorXd& values, Eigen::MatrixXd& out_states,
                        Eigen::VectorXd& out_values) {
  std::map<std::vector<double>, std::size_t> index;
  std::vector<std::vector<double>> rows;
  std::vector<double> sums, counts;
  for (Eigen::Index i = 0; i < states.rows(); ++i) {
    std::vector<double> key(static_cast<std::size_t>(states.cols()));
    for (Eigen::Index c = 0; c < states.cols(); ++c) key[static_cast<std::size_t>(c)] = states(i, c);
    auto [it, inserted] = index.emplace(key, rows.size());
    if (inserted) {
      rows.push_back(std::move(key));
      sums.push_back(0.0);
      counts.push_back(0.0);
    }
    sums[it->second] += values[i];
    counts[it->second] += 1.0;
  }
  out_states.resize(static_cast<Eigen::Index>(rows.size()), states.cols());
  out_values.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (Eigen::Index c = 0; c < states.cols(); ++c) {
      out_states(static_cast<Eigen::Index>(r), c) = rows[r][static_cast<std::size_t>(c)];
    }
    out_values[static_cast<Eigen::Index>(r)] = sums[r] / counts[r];
  }
}

double concentrated_log_likelihood(const Eigen::MatrixXd& states, const Eigen::VectorXd& values,
                                   const Eigen::VectorXd& lengthscales, const KrigingConfig& config) {
  GlsFit fit;
  if (!gls(states, values, lengthscales, config, fit)) return -std::numeric_limits<double>::infinity();
  return fit.log_likelihood;
}

KrigingModel KrigingModel::build(Eigen::MatrixXd states, Eigen::VectorXd values, Eigen::VectorXd lengthscales,
                                 const KrigingConfig& config) {
  GlsFit fit;
  if (!gls(states, values, lengthscales, config, fit)) {
    Eigen::MatrixXd r = gaussian_correlation(states, states, lengthscales);
    r.diagonal().array() += config.nugget;
    numeric::jittered_cholesky(r, "kriging correlation matrix", config.jitter);
    throw NumericError("kriging: likelihood is not finite at the selected lengthscales");
  }
  KrigingModel model;
  model.lower_ = states.colwise().minCoeff().transpose();
  model.upper_ = states.colwise().maxCoeff().transpose();
  model.states_ = std::move(states);
  model.values_ = std::move(values);
  model.lengthscales_ = std::move(lengthscales);
  model.weights_ = std::move(fit.weights);
  model.mean_ = fit.mean;
  model.process_variance_ = fit.variance;
  model.nugget_ = fit.diagonal;
  model.log_likelihood_ = fit.log_likelihood;
  return model;
}

KrigingModel fit_kriging(const Eigen::MatrixXd& states, const Eigen::VectorXd& values, const KrigingConfig& config) {
  check_inputs(states, values);
  Eigen::MatrixXd s;
  Eigen::VectorXd v;
  canonicalise(states, values, s, v);

  // Search in log(lengthscale / range) so bounds and starts are scale free.
  const Eigen::VectorXd range = ranges_of(s);
  const Eigen::Index p = s.cols();
  numeric::Box box{Eigen::VectorXd::Constant(p, std::log(config.lengthscale_min)),
                   Eigen::VectorXd::Constant(p, std::log(config.lengthscale_max))};
  auto to_lengthscales = [&](const Eigen::VectorXd& theta) -> Eigen::VectorXd {
    return theta.array().exp() * range.array();
  };
  auto objective = [&](const Eigen::VectorXd& theta) {
    return -concentrated_log_likelihood(s, v, to_lengthscales(theta), config);
  };
  std::vector<Eigen::VectorXd> starts;
  for (double l : numeric::log_spaced(config.lengthscale_min, config.lengthscale_max, config.starts)) {
    starts.push_back(Eigen::VectorXd::Constant(p, std::log(l)));
  }
  numeric::NelderMeadOptions options;
  options.max_evaluations = config.max_evaluations_per_start;
  options.initial_step = 0.05;
  const numeric::Minimum best = numeric::multi_start_minimize(objective, starts, box, options);
  if (!std::isfinite(best.value)) {
    // Every candidate failed to factorise; report the diagnostic for the
    // shortest lengthscale, which is the best conditioned.
    Eigen::MatrixXd r = gaussian_correlation(s, s, to_lengthscales(box.lower));
    r.diagonal().array() += config.nugget;
    numeric::jittered_cholesky(r, "kriging correlation matrix", config.jitter);
  }
  return KrigingModel::build(std::move(s), std::move(v), to_lengthscales(best.x), config);
}

KrigingModel kriging_with_lengthscales(const Eigen::MatrixXd& states, const Eigen::VectorXd& values,
                                       const Eigen::VectorXd& lengthscales, const KrigingConfig& config) {
  check_inputs(states, values);
  if (lengthscales.size() != states.cols() || (lengthscales.array() <= 0.0).any()) {
    throw InputError("kriging: need one positive lengthscale per state column");
  }
  Eigen::MatrixXd s;
  Eigen::VectorXd v;
  canonicalise(states, values, s, v);
  return KrigingModel::build(std::move(s), std::move(v), lengthscales, config);
}

bool KrigingModel::in_bounds(std::span<const double> query) const {
  if (static_cast<Eigen::Index>(query.size()) != states_.cols()) return false;
  for (Eigen::Index k = 0; k < states_.cols(); ++k) {
    const double slack = 1e-12 * std::max(1.0, upper_[k] - lower_[k]);
    const double q = query[static_cast<std::size_t>(k)];
    if (!(q >= lower_[k] - slack && q <= upper_[k] + slack)) return false;
  }
  return true;
}

double KrigingModel::predict(std::span<const double> query) const {
  if (static_cast<Eigen::Index>(query.size()) != states_.cols()) {
    throw InputError("kriging: query has " + std::to_string(query.size()) + " coordinates, model expects " +
                     std::to_string(states_.cols()));
  }
  if (!in_bounds(query)) throw InputError("kriging: query outside the training bounding box (clip before predicting)");
  const Eigen::Map<const Eigen::RowVectorXd> q(query.data(), static_cast<Eigen::Index>(query.size()));
  const Eigen::RowVectorXd inv = lengthscales_.cwiseInverse().transpose();
  double out = mean_;
  for (Eigen::Index i = 0; i < states_.rows(); ++i) {
    const double d2 = (states_.row(i) - q).cwiseProduct(inv).squaredNorm();
    out += std::exp(-0.5 * d2) * weights_[i];
  }
  return out;
}

double KrigingModel::predict(const Eigen::VectorXd& query) const {
  return predict(std::span<const double>(query.data(), static_cast<std::size_t>(query.size())));
}

}  // namespace lgf::kriging
