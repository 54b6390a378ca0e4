#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "lgf/error.hpp"
#include "lgf/gpr.hpp"

using namespace lgf;
using namespace lgf::gp;

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

Hyperparameters hyper(double sf2, double l, double sn2) {
  Hyperparameters h;
  h.signal_variance = sf2;
  h.lengthscales = Eigen::VectorXd::Constant(1, l);
  h.noise_variance = sn2;
  return h;
}

double k(double a, double b, const Hyperparameters& h) {
  const double d = (a - b) / h.lengthscales[0];
  return h.signal_variance * std::exp(-0.5 * d * d);
}

Eigen::MatrixXd dense_k(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const Hyperparameters& h) {
  Eigen::MatrixXd out(a.size(), b.size());
  for (Eigen::Index i = 0; i < a.size(); ++i)
    for (Eigen::Index j = 0; j < b.size(); ++j) out(i, j) = k(a[i], b[j], h);
  return out;
}

double dense_lml(const Eigen::MatrixXd& c, const Eigen::VectorXd& y) {
  return -0.5 * y.dot(c.inverse() * y) - 0.5 * std::log(c.determinant()) - 0.5 * y.size() * kLog2Pi;
}

// log N(y | 0, Q + Lambda) with Q = K_NM K_MM^-1 K_MN, assembled densely.
double dense_fic_lml(const Eigen::VectorXd& x, const Eigen::VectorXd& y, const std::vector<std::size_t>& s,
                     const Hyperparameters& h) {
  Eigen::VectorXd xm(static_cast<Eigen::Index>(s.size()));
  for (std::size_t i = 0; i < s.size(); ++i) xm[static_cast<Eigen::Index>(i)] = x[static_cast<Eigen::Index>(s[i])];
  const Eigen::MatrixXd knm = dense_k(x, xm, h);
  const Eigen::MatrixXd q = knm * dense_k(xm, xm, h).inverse() * knm.transpose();
  Eigen::MatrixXd c = q;
  for (Eigen::Index i = 0; i < x.size(); ++i) c(i, i) = h.signal_variance + h.noise_variance;
  return dense_lml(c, y);
}

double q1(const GPRModel& m, double x) { return m.variance(std::span<const double>(&x, 1)); }
double mean1(const GPRModel& m, double x) { return m.mean(std::span<const double>(&x, 1)); }

struct Data {
  Eigen::MatrixXd x;
  Eigen::VectorXd y;
};

Data sample_data(int n, std::uint64_t seed, double noise) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> e(0.0, 1.0);
  Data d{Eigen::MatrixXd(n, 1), Eigen::VectorXd(n)};
  for (int i = 0; i < n; ++i) {
    d.x(i, 0) = u(gen);
    d.y[i] = std::sin(7.0 * d.x(i, 0)) + noise * e(gen);
  }
  return d;
}

}  // namespace

TEST(Gpr, LogMarginalLikelihoodMatchesDenseFormula) {
  Eigen::MatrixXd x(3, 1);
  x << 0.1, 0.5, 0.8;
  Eigen::VectorXd y(3);
  y << 0.3, -1.2, 0.7;
  const auto h = hyper(1.3, 0.4, 0.05);
  Eigen::MatrixXd c = dense_k(x.col(0), x.col(0), h);
  c.diagonal().array() += h.noise_variance;
  EXPECT_NEAR(log_marginal_likelihood(x, y, h), dense_lml(c, y), 1e-10);

  const GPRModel m(x, y, h);
  const Eigen::VectorXd yc = y.array() - y.mean();
  EXPECT_NEAR(m.log_marginal_likelihood(), dense_lml(c, yc), 1e-10);
}

TEST(Gpr, ExactVarianceMatchesDenseInverse) {
  Eigen::MatrixXd x(3, 1);
  x << 0.0, 0.4, 1.0;
  const auto h = hyper(0.8, 0.3, 0.01);
  const GPRModel m(x, Eigen::Vector3d(1.0, 2.0, 0.5), h);
  Eigen::MatrixXd c = dense_k(x.col(0), x.col(0), h);
  c.diagonal().array() += h.noise_variance;
  const Eigen::MatrixXd inv = c.inverse();
  for (double q : {-0.5, 0.0, 0.2, 0.4, 0.77, 1.3}) {
    const Eigen::VectorXd kq = dense_k(x.col(0), Eigen::VectorXd::Constant(1, q), h);
    EXPECT_NEAR(q1(m, q), h.signal_variance - kq.dot(inv * kq), 1e-10) << q;
  }
}

TEST(Gpr, NoiseFreeTrainingPointHasNoVariance) {
  Eigen::MatrixXd x(4, 1);
  x << 0.0, 0.3, 0.6, 1.0;
  const GPRModel m(x, Eigen::Vector4d(0.0, 1.0, -1.0, 0.5), hyper(1.0, 0.25, 0.0));
  for (int i = 0; i < 4; ++i) EXPECT_LE(q1(m, x(i, 0)), 1e-10);
}

TEST(Gpr, FarQueryRecoversSignalVariance) {
  Eigen::MatrixXd x(3, 1);
  x << 0.0, 0.5, 1.0;
  const GPRModel m(x, Eigen::Vector3d(1.0, 0.0, 2.0), hyper(2.5, 0.2, 1e-3));
  EXPECT_NEAR(q1(m, 50.0), 2.5, 1e-6);
}

TEST(Gpr, ZeroTargetsGiveZeroMean) {
  Eigen::MatrixXd x(5, 1);
  x << 0.0, 0.25, 0.5, 0.75, 1.0;
  const auto m = fit_gpr(x, Eigen::VectorXd::Zero(5));
  for (double q = -0.5; q <= 1.5; q += 0.1) EXPECT_EQ(mean1(m, q), 0.0);
}

TEST(Gpr, FittedHyperparametersBeatStartingGuesses) {
  const Data d = sample_data(20, 5, 0.05);
  const auto m = fit_gpr(d.x, d.y);
  const Eigen::VectorXd yc = d.y.array() - d.y.mean();
  const double v = yc.squaredNorm() / 20.0;
  for (double l : {0.05, 0.2, 1.0}) {
    EXPECT_GE(m.log_marginal_likelihood() + 1e-9, log_marginal_likelihood(d.x, yc, hyper(v, l, 1e-2 * v)));
  }
}

TEST(Gpr, PermutingTrainingRowsChangesNoPrediction) {
  const Data d = sample_data(15, 9, 0.1);
  std::vector<int> perm(15);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(1));
  Data p{Eigen::MatrixXd(15, 1), Eigen::VectorXd(15)};
  for (int i = 0; i < 15; ++i) {
    p.x.row(i) = d.x.row(perm[static_cast<std::size_t>(i)]);
    p.y[i] = d.y[perm[static_cast<std::size_t>(i)]];
  }
  const auto a = fit_gpr(d.x, d.y), b = fit_gpr(p.x, p.y);
  for (double q = 0.0; q <= 1.0; q += 0.01) {
    EXPECT_NEAR(mean1(a, q), mean1(b, q), 1e-8);
    EXPECT_NEAR(q1(a, q), q1(b, q), 1e-8);
  }
}

TEST(Fic, LogLikelihoodMatchesDenseAssembly) {
  const Data d = sample_data(8, 2, 0.1);
  const auto h = hyper(0.9, 0.2, 0.02);
  const GPRModel m(d.x, d.y, h);
  for (const std::vector<std::size_t>& s : {std::vector<std::size_t>{3}, {0, 5}, {1, 2, 7}}) {
    EXPECT_NEAR(fic_log_marginal_likelihood(m, s), dense_fic_lml(d.x.col(0), m.targets(), s, h), 1e-9);
  }
}

TEST(Fic, OneInducingPointTwoDataMatchesHandAssembly) {
  Eigen::MatrixXd x(2, 1);
  x << 0.0, 0.6;
  const auto h = hyper(1.5, 0.5, 0.1);
  GPRModel m(x, Eigen::Vector2d(1.0, -1.0), h);
  m.use_active_subset({1});
  const double kmm = k(0.6, 0.6, h);
  const double k0 = k(0.0, 0.6, h), k1 = kmm;
  const double lam0 = k(0.0, 0.0, h) - k0 * k0 / kmm + h.noise_variance;
  const double lam1 = k(0.6, 0.6, h) - k1 * k1 / kmm + h.noise_variance;
  const double sigma = kmm + k0 * k0 / lam0 + k1 * k1 / lam1;
  for (double q : {-0.3, 0.0, 0.3, 0.6, 2.0}) {
    const double km = k(q, 0.6, h);
    const double expected = h.signal_variance - km * (1.0 / kmm - 1.0 / sigma) * km;
    EXPECT_NEAR(q1(m, q), expected, 1e-12) << q;
  }
}

TEST(Fic, FullSubsetReducesToExact) {
  const Data d = sample_data(40, 4, 0.1);
  GPRModel m(d.x, d.y, hyper(1.0, 0.15, 0.01));
  std::vector<std::size_t> all(40);
  std::iota(all.begin(), all.end(), 0);
  m.use_active_subset(all);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double q = -0.2 + 1.4 * i / 99.0;
    worst = std::max(worst, std::abs(m.variance_fic(std::span<const double>(&q, 1)) -
                                     m.variance_exact(std::span<const double>(&q, 1))));
  }
  EXPECT_LT(worst, 1e-8);
}

TEST(Fic, FarQueryRecoversSignalVariance) {
  const Data d = sample_data(10, 6, 0.1);
  GPRModel m(d.x, d.y, hyper(0.7, 0.1, 0.01));
  m.use_active_subset({1, 4, 8});
  EXPECT_EQ(m.mode(), Mode::fic);
  EXPECT_NEAR(q1(m, 40.0), 0.7, 1e-6);
}

TEST(Fic, VarianceIsNonnegative) {
  const Data d = sample_data(25, 8, 0.0);
  GPRModel m(d.x, d.y, hyper(1.0, 0.3, 0.0));
  m.use_active_subset(select_active_subset(m, 6));
  for (double q = 0.0; q <= 1.0; q += 0.01) EXPECT_GE(q1(m, q), 0.0);
}

TEST(Selection, FullSizeTakesEveryIndex) {
  const Data d = sample_data(7, 1, 0.1);
  const GPRModel m(d.x, d.y, hyper(1.0, 0.2, 0.01));
  const auto s = select_active_subset(m, 7);
  std::vector<std::size_t> all(7);
  std::iota(all.begin(), all.end(), 0);
  EXPECT_EQ(s, all);
}

TEST(Selection, SingletonMatchesBruteForceScan) {
  Eigen::MatrixXd x(3, 1);
  x << 0.0, 0.35, 1.0;
  const auto h = hyper(1.0, 0.3, 0.05);
  const GPRModel m(x, Eigen::Vector3d(0.2, 1.5, -0.4), h);
  std::size_t best = 0;
  double best_value = -1e300;
  for (std::size_t j = 0; j < 3; ++j) {
    const double v = dense_fic_lml(x.col(0), m.targets(), {j}, h);
    if (v > best_value) best_value = v, best = j;
  }
  EXPECT_EQ(select_active_subset(m, 1), std::vector<std::size_t>{best});
}

TEST(Selection, DuplicatePointsTieToLowestIndex) {
  Eigen::MatrixXd x(4, 1);
  x << 0.5, 0.5, 0.5, 0.5;
  const GPRModel m(x, Eigen::Vector4d(1.0, 1.0, 1.0, 1.0), hyper(1.0, 0.3, 0.1));
  EXPECT_EQ(select_active_subset(m, 1), std::vector<std::size_t>{0});
  EXPECT_EQ(select_active_subset(m, 2), (std::vector<std::size_t>{0, 1}));
}

TEST(Selection, RejectsBadSize) {
  const Data d = sample_data(4, 1, 0.1);
  const GPRModel m(d.x, d.y, hyper(1.0, 0.2, 0.01));
  EXPECT_THROW(select_active_subset(m, 0), InputError);
  EXPECT_THROW(select_active_subset(m, 5), InputError);
}

TEST(GprProperties, AddingAPointNeverIncreasesVariance) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Data d = sample_data(12, seed, 0.1);
    const auto h = hyper(1.0, 0.2, 0.01);
    const GPRModel big(d.x, d.y, h);
    const GPRModel small(d.x.topRows(11), d.y.head(11), h);
    for (double q = -0.2; q <= 1.2; q += 0.02) EXPECT_LE(q1(big, q), q1(small, q) + 1e-9);
  }
}

TEST(GprProperties, RefitOnScaledTargetsScalesSigma) {
  const Data d = sample_data(15, 3, 0.1);
  const double c = -3.5;
  const auto a = fit_gpr(d.x, d.y), b = fit_gpr(d.x, c * d.y);
  for (double q = 0.0; q <= 1.0; q += 0.05) {
    EXPECT_NEAR(std::sqrt(q1(b, q)), std::abs(c) * std::sqrt(q1(a, q)), 1e-6);
  }
}

TEST(Uncertainty, UnitSigmaGivesTwiceZ) {
  const std::vector<double> ones(10, 1.0);
  EXPECT_NEAR(uncertainty_metric(ones, 0.05), 3.919928, 1e-6);
  EXPECT_NEAR(normal_quantile(0.975), 1.959964, 1e-6);
}

TEST(Uncertainty, ZeroSigmaGivesZero) {
  EXPECT_EQ(uncertainty_metric(std::vector<double>(4, 0.0), 0.05), 0.0);
}

TEST(Uncertainty, RejectsBadInput) {
  EXPECT_THROW(uncertainty_metric(std::vector<double>{1.0, -0.1}, 0.05), InputError);
  EXPECT_THROW(uncertainty_metric(std::vector<double>{1.0}, 0.0), InputError);
  EXPECT_THROW(uncertainty_metric(std::vector<double>{1.0}, 1.0), InputError);
}

TEST(Uncertainty, LinearInSigma) {
  const std::vector<double> s{0.1, 0.5, 0.2, 0.9};
  std::vector<double> scaled(s);
  for (auto& v : scaled) v *= 2.75;
  EXPECT_NEAR(uncertainty_metric(scaled, 0.1), 2.75 * uncertainty_metric(s, 0.1), 1e-12);
}

TEST(Uncertainty, ReportWidthsAverageToU) {
  const std::vector<double> mu{1.0, 2.0, 3.0}, s{0.1, 0.3, 0.2};
  const auto r = make_report(mu, s, 0.05);
  double width = 0.0;
  for (std::size_t i = 0; i < 3; ++i) width += r.upper[i] - r.lower[i];
  EXPECT_NEAR(width / 3.0, r.u, 1e-12);
  std::ostringstream rows, summary;
  write_report_csv(r, rows);
  write_report_summary_csv(r, summary);
  EXPECT_EQ(rows.str().substr(0, rows.str().find('\n')), "index,sigma,lower,upper");
  EXPECT_EQ(summary.str().substr(0, summary.str().find('\n')), "U,alpha,N_test");
  EXPECT_NE(summary.str().find(",3\n"), std::string::npos);
}
