#include "lgf/gpr.hpp"

#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include "lgf/csv.hpp"
#include "lgf/error.hpp"
#include "lgf/tensor.hpp"

namespace lgf::gp {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
// Eigenvalues of K_MM below this fraction of the largest are treated as zero.
constexpr double kPseudoInverseTolerance = 1e-13;
// Lower bound on Lambda relative to the signal variance (matters when sn2 = 0).
constexpr double kLambdaFloor = 1e-10;

void check_training_data(const Eigen::MatrixXd& states, const Eigen::VectorXd& targets) {
  if (states.rows() != targets.size()) {
    throw InputError("gpr: " + std::to_string(states.rows()) + " states but " + std::to_string(targets.size()) +
                     " targets");
  }
  if (states.rows() < 2) throw InputError("gpr: need at least 2 training points");
  if (states.cols() == 0) throw InputError("gpr: states need at least one column");
  if (!states.allFinite() || !targets.allFinite()) throw InputError("gpr: training data must be finite");
}

std::span<const double> row_span(const Eigen::MatrixXd& m, Eigen::Index r, std::vector<double>& scratch) {
  scratch.resize(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index c = 0; c < m.cols(); ++c) scratch[static_cast<std::size_t>(c)] = m(r, c);
  return scratch;
}

Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& m, std::span<const std::size_t> rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

// Pieces shared by the FIC likelihood and the FIC predictor. K_MM enters
// only through a whitening map W with W K_MM W^T = I on its numerically
// nonsingular eigenspace, so Q = K_NM K_MM^+ K_MN stays exact when the
// inducing rows are (nearly) collinear in feature space.
struct FicParts {
  Eigen::MatrixXd whiten;     // W, r x M
  Eigen::MatrixXd v;          // W K_MN
  Eigen::VectorXd lambda;     // diag(K_NN - Q_NN) + sn2
  Eigen::LLT<Eigen::MatrixXd> a;  // I + V Lambda^{-1} V^T
  bool ok = false;
  std::string failure;
};

FicParts fic_parts(const Eigen::MatrixXd& states, const Hyperparameters& h, std::span<const std::size_t> subset) {
  FicParts parts;
  const Eigen::MatrixXd inducing = gather_rows(states, subset);
  const Eigen::MatrixXd kmm = se_kernel(inducing, inducing, h);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(kmm);
  if (eig.info() != Eigen::Success) {
    parts.failure = "eigendecomposition of K_MM failed";
    return parts;
  }
  const Eigen::VectorXd& ev = eig.eigenvalues();  // ascending
  const double top = ev.maxCoeff();
  if (!(top > 0.0) || ev.minCoeff() < -1e-8 * top) {
    std::ostringstream msg;
    msg << "K_MM is indefinite: eigenvalue range [" << ev.minCoeff() << ", " << top << "]";
    parts.failure = msg.str();
    return parts;
  }
  const double cutoff = kPseudoInverseTolerance * top;
  Eigen::Index first = 0;
  while (ev[first] <= cutoff) ++first;
  const Eigen::Index r = ev.size() - first;
  parts.whiten = ev.tail(r).cwiseSqrt().cwiseInverse().asDiagonal() *
                 eig.eigenvectors().rightCols(r).transpose();
  parts.v = parts.whiten * se_kernel(inducing, states, h);
  const double floor = kLambdaFloor * h.signal_variance;
  parts.lambda.resize(states.rows());
  for (Eigen::Index i = 0; i < states.rows(); ++i) {
    const double residual = std::max(h.signal_variance - parts.v.col(i).squaredNorm(), 0.0);
    parts.lambda[i] = std::max(residual + h.noise_variance, floor);
  }
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(r, r);
  a.noalias() += parts.v * parts.lambda.cwiseInverse().asDiagonal() * parts.v.transpose();
  parts.a.compute(a);
  parts.ok = parts.a.info() == Eigen::Success;
  if (!parts.ok) parts.failure = "FIC inner matrix is not positive definite";
  return parts;
}

}  // namespace

Eigen::MatrixXd se_kernel(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const Hyperparameters& h) {
  Eigen::MatrixXd out(a.rows(), b.rows());
  const Eigen::RowVectorXd inv = h.lengthscales.cwiseInverse().transpose();
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      out(i, j) = h.signal_variance * std::exp(-0.5 * (a.row(i) - b.row(j)).cwiseProduct(inv).squaredNorm());
    }
  }
  return out;
}

double log_marginal_likelihood(const Eigen::MatrixXd& states, const Eigen::VectorXd& targets,
                               const Hyperparameters& h, const numeric::JitterPolicy& jitter) {
  Eigen::MatrixXd k = se_kernel(states, states, h);
  k.diagonal().array() += h.noise_variance;
  numeric::Factorization f;
  if (!numeric::try_jittered_cholesky(k, f, jitter)) return -std::numeric_limits<double>::infinity();
  const Eigen::VectorXd alpha = f.llt.solve(targets);
  const double n = static_cast<double>(targets.size());
  return -0.5 * targets.dot(alpha) - 0.5 * f.log_determinant() - 0.5 * n * kLog2Pi;
}

GPRModel::GPRModel(Eigen::MatrixXd states, Eigen::VectorXd targets, Hyperparameters h, numeric::JitterPolicy jitter)
    : states_(std::move(states)), h_(std::move(h)), jitter_(jitter) {
  check_training_data(states_, targets);
  if (h_.lengthscales.size() != states_.cols() || (h_.lengthscales.array() <= 0.0).any()) {
    throw InputError("gpr: need one positive lengthscale per state column");
  }
  if (!(h_.signal_variance > 0.0) || !(h_.noise_variance >= 0.0)) {
    throw InputError("gpr: signal variance must be positive and noise variance nonnegative");
  }
  offset_ = targets.mean();
  targets_ = targets.array() - offset_;
  Eigen::MatrixXd k = se_kernel(states_, states_, h_);
  k.diagonal().array() += h_.noise_variance;
  chol_ = numeric::jittered_cholesky(k, "gpr covariance", jitter_);
  alpha_ = chol_.llt.solve(targets_);
  lml_ = -0.5 * targets_.dot(alpha_) - 0.5 * chol_.log_determinant() -
         0.5 * static_cast<double>(targets_.size()) * kLog2Pi;
}

Eigen::VectorXd GPRModel::kernel_column(const Eigen::MatrixXd& rows, std::span<const double> query) const {
  if (static_cast<Eigen::Index>(query.size()) != states_.cols()) {
    throw InputError("gpr: query has " + std::to_string(query.size()) + " coordinates, model expects " +
                     std::to_string(states_.cols()));
  }
  const Eigen::Map<const Eigen::RowVectorXd> q(query.data(), static_cast<Eigen::Index>(query.size()));
  const Eigen::RowVectorXd inv = h_.lengthscales.cwiseInverse().transpose();
  Eigen::VectorXd out(rows.rows());
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    out[i] = h_.signal_variance * std::exp(-0.5 * (rows.row(i) - q).cwiseProduct(inv).squaredNorm());
  }
  return out;
}

double GPRModel::mean(std::span<const double> query) const {
  if (active_) {
    const Eigen::VectorXd w = active_->whiten * kernel_column(active_->inducing, query);
    return offset_ + w.dot(active_->mean_weights);
  }
  return offset_ + kernel_column(states_, query).dot(alpha_);
}

double GPRModel::variance(std::span<const double> query) const {
  return active_ ? variance_fic(query) : variance_exact(query);
}

double GPRModel::variance_exact(std::span<const double> query) const {
  const Eigen::VectorXd v = chol_.llt.matrixL().solve(kernel_column(states_, query));
  return std::max(h_.signal_variance - v.squaredNorm(), 0.0);
}

double GPRModel::variance_fic(std::span<const double> query) const {
  if (!active_) throw Error("gpr: variance_fic needs an active subset (call use_active_subset first)");
  // k** - k_M^T [K_MM^{-1} - (K_MM + K_MN Lambda^{-1} K_NM)^{-1}] k_M, with
  // w = L_M^{-1} k_M the bracket becomes w^T w - w^T A^{-1} w.
  const Eigen::VectorXd w = active_->whiten * kernel_column(active_->inducing, query);
  const Eigen::VectorXd u = active_->a.matrixL().solve(w);
  return std::max(h_.signal_variance - w.squaredNorm() + u.squaredNorm(), 0.0);
}

void GPRModel::use_active_subset(std::vector<std::size_t> subset) {
  if (subset.empty() || subset.size() > size()) {
    throw InputError("gpr: active subset size must lie in [1, " + std::to_string(size()) + "]");
  }
  for (auto i : subset) {
    if (i >= size()) throw InputError("gpr: active subset index " + std::to_string(i) + " out of range");
  }
  FicParts parts = fic_parts(states_, h_, subset);
  if (!parts.ok) throw NumericError("gpr: " + parts.failure);
  Fic fic;
  fic.inducing = gather_rows(states_, subset);
  fic.subset = std::move(subset);
  fic.whiten = std::move(parts.whiten);
  fic.mean_weights = parts.a.solve(parts.v * targets_.cwiseQuotient(parts.lambda));
  fic.a = std::move(parts.a);
  active_ = std::move(fic);
}

const std::vector<std::size_t>& GPRModel::active_subset() const {
  if (!active_) throw Error("gpr: model is in exact mode");
  return active_->subset;
}

GPRModel fit_gpr(const Eigen::MatrixXd& states, const Eigen::VectorXd& targets, const GprConfig& config) {
  check_training_data(states, targets);
  const Eigen::VectorXd centred = targets.array() - targets.mean();
  double scale = centred.squaredNorm() / static_cast<double>(centred.size());
  if (!(scale > 0.0)) scale = 1.0;
  Eigen::VectorXd range = states.colwise().maxCoeff() - states.colwise().minCoeff();
  for (Eigen::Index k = 0; k < range.size(); ++k) {
    if (!(range[k] > 0.0)) range[k] = 1.0;
  }

  // The search sees standardised targets in a canonical row order, so neither
  // a rescaling nor a permutation of the training set changes its path.
  const auto order = numeric::lexicographic_order(states, centred);
  Eigen::MatrixXd s(states.rows(), states.cols());
  Eigen::VectorXd y(centred.size());
  const double sd = std::sqrt(scale);
  for (std::size_t i = 0; i < order.size(); ++i) {
    s.row(static_cast<Eigen::Index>(i)) = states.row(static_cast<Eigen::Index>(order[i]));
    y[static_cast<Eigen::Index>(i)] = centred[static_cast<Eigen::Index>(order[i])] / sd;
  }

  const Eigen::Index p = states.cols();
  auto unpack = [&](const Eigen::VectorXd& theta, double v) {
    Hyperparameters h;
    h.signal_variance = v * std::exp(theta[0]);
    h.lengthscales = theta.segment(1, p).array().exp() * range.array();
    h.noise_variance = v * std::exp(theta[p + 1]);
    return h;
  };
  numeric::Box box{Eigen::VectorXd(p + 2), Eigen::VectorXd(p + 2)};
  box.lower[0] = std::log(config.signal_variance_min);
  box.upper[0] = std::log(config.signal_variance_max);
  box.lower.segment(1, p).setConstant(std::log(config.lengthscale_min));
  box.upper.segment(1, p).setConstant(std::log(config.lengthscale_max));
  box.lower[p + 1] = std::log(config.noise_variance_min);
  box.upper[p + 1] = std::log(config.noise_variance_max);

  std::vector<Eigen::VectorXd> starts;
  for (double l : numeric::log_spaced(0.05, 2.0, config.starts)) {
    Eigen::VectorXd theta(p + 2);
    theta[0] = 0.0;
    theta.segment(1, p).setConstant(std::log(l));
    theta[p + 1] = std::log(1e-2);
    starts.push_back(theta.cwiseMax(box.lower).cwiseMin(box.upper));
  }
  auto objective = [&](const Eigen::VectorXd& theta) {
    return -log_marginal_likelihood(s, y, unpack(theta, 1.0), config.jitter);
  };
  numeric::NelderMeadOptions options;
  options.max_evaluations = config.max_evaluations_per_start;
  const numeric::Minimum best = numeric::multi_start_minimize(objective, starts, box, options);
  return GPRModel(states, targets, unpack(best.x, scale), config.jitter);
}

double fic_log_marginal_likelihood(const GPRModel& model, std::span<const std::size_t> subset) {
  const FicParts parts = fic_parts(model.states(), model.hyperparameters(), subset);
  if (!parts.ok) return -std::numeric_limits<double>::infinity();
  const Eigen::VectorXd& y = model.targets();
  const Eigen::VectorXd lambda_inv_y = y.cwiseQuotient(parts.lambda);
  const Eigen::VectorXd b = parts.v * lambda_inv_y;
  const double quad = y.dot(lambda_inv_y) - b.dot(parts.a.solve(b));
  const double logdet = parts.lambda.array().log().sum() + 2.0 * parts.a.matrixLLT().diagonal().array().log().sum();
  return -0.5 * quad - 0.5 * logdet - 0.5 * static_cast<double>(y.size()) * kLog2Pi;
}

std::vector<std::size_t> select_active_subset(const GPRModel& model, std::size_t m, const SelectionConfig& config) {
  const std::size_t n = model.size();
  if (m < 1 || m > n) throw InputError("select_active_subset: M must lie in [1, " + std::to_string(n) + "]");
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), 0);
  if (n > config.candidate_cap) {
    Rng rng(config.seed);
    for (std::size_t i = 0; i < config.candidate_cap; ++i) std::swap(pool[i], pool[i + rng.below(n - i)]);
    pool.resize(config.candidate_cap);
    std::sort(pool.begin(), pool.end());
  }
  if (m > pool.size()) throw InputError("select_active_subset: M exceeds the candidate pool");

  std::vector<std::size_t> chosen;
  std::vector<bool> taken(n, false);
  while (chosen.size() < m) {
    double best = -std::numeric_limits<double>::infinity();
    std::size_t arg = n;
    std::vector<std::size_t> trial = chosen;
    trial.push_back(0);
    for (std::size_t j : pool) {
      if (taken[j]) continue;
      trial.back() = j;
      const double value = fic_log_marginal_likelihood(model, trial);
      if (arg == n || value > best) {
        best = value;
        arg = j;
      }
    }
    chosen.push_back(arg);
    taken[arg] = true;
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw InputError("normal_quantile: probability must lie in (0, 1)");
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

double uncertainty_metric(std::span<const double> sigmas, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw InputError("uncertainty_metric: alpha must lie in (0, 1)");
  if (sigmas.empty()) throw InputError("uncertainty_metric: empty test set");
  double total = 0.0;
  for (double s : sigmas) {
    if (!(s >= 0.0) || !std::isfinite(s)) throw InputError("uncertainty_metric: sigma must be finite and >= 0");
    total += s;
  }
  return 2.0 * normal_quantile(1.0 - alpha / 2.0) * total / static_cast<double>(sigmas.size());
}

UncertaintyReport make_report(std::span<const double> means, std::span<const double> sigmas, double alpha) {
  if (means.size() != sigmas.size()) throw InputError("uncertainty report: means and sigmas differ in length");
  UncertaintyReport report;
  report.alpha = alpha;
  report.u = uncertainty_metric(sigmas, alpha);
  const double z = normal_quantile(1.0 - alpha / 2.0);
  report.sigma.assign(sigmas.begin(), sigmas.end());
  for (std::size_t i = 0; i < sigmas.size(); ++i) {
    report.lower.push_back(means[i] - z * sigmas[i]);
    report.upper.push_back(means[i] + z * sigmas[i]);
  }
  return report;
}

UncertaintyReport evaluate_uncertainty(const GPRModel& model, const Eigen::MatrixXd& queries, double alpha) {
  std::vector<double> means, sigmas, scratch;
  for (Eigen::Index i = 0; i < queries.rows(); ++i) {
    const auto q = row_span(queries, i, scratch);
    means.push_back(model.mean(q));
    sigmas.push_back(std::sqrt(model.variance(q)));
  }
  return make_report(means, sigmas, alpha);
}

void write_report_csv(const UncertaintyReport& report, std::ostream& out) {
  out << "index,sigma,lower,upper\n";
  for (std::size_t i = 0; i < report.sigma.size(); ++i) {
    out << i << ',' << csv::format_number(report.sigma[i]) << ',' << csv::format_number(report.lower[i]) << ','
        << csv::format_number(report.upper[i]) << '\n';
  }
}

void write_report_summary_csv(const UncertaintyReport& report, std::ostream& out) {
  out << "U,alpha,N_test\n"
      << csv::format_number(report.u) << ',' << csv::format_number(report.alpha) << ',' << report.n_test() << '\n';
}

}  // namespace lgf::gp
