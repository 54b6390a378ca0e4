#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "lgf/alignment.hpp"
#include "lgf/error.hpp"

using namespace lgf;
using namespace lgf::kriging;
using lgf::data::DataSet;
using lgf::data::Fidelity;

namespace {

DataSet grid(std::vector<double> xs, double (*f)(double), Fidelity fidelity) {
  DataSet d;
  d.fidelity = fidelity;
  d.state_names = {"x"};
  d.response_names = {"y"};
  const auto n = static_cast<Eigen::Index>(xs.size());
  d.states.resize(n, 1);
  d.responses.resize(n, 1);
  d.passthrough.resize(n, 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    d.states(i, 0) = xs[static_cast<std::size_t>(i)];
    d.responses(i, 0) = f(xs[static_cast<std::size_t>(i)]);
  }
  return d;
}

std::vector<double> range(double lo, double hi, double step) {
  std::vector<double> v;
  for (double x = lo; x <= hi + 1e-12; x += step) v.push_back(x);
  return v;
}

double low_curve(double x) { return std::sin(0.6 * x) + 0.1 * x; }
double high_curve(double x) { return std::sin(0.6 * x) + 0.15 * x + 0.3; }

}  // namespace

TEST(Align, SameGridNeedsNoInterpolation) {
  const auto xs = range(0.0, 5.0, 0.5);
  const auto p = align_datasets(grid(xs, low_curve, Fidelity::low), grid(xs, high_curve, Fidelity::high));
  ASSERT_EQ(p.rows(), xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    EXPECT_TRUE(p.low_observed[i] && p.high_observed[i]);
    EXPECT_EQ(p.delta()(static_cast<Eigen::Index>(i), 0), high_curve(xs[i]) - low_curve(xs[i]));
  }
}

TEST(Align, GridIsConfinedToTheIntersection) {
  const auto p = align_datasets(grid(range(0, 10, 1), low_curve, Fidelity::low),
                                grid(range(2, 12, 0.5), high_curve, Fidelity::high));
  EXPECT_EQ(p.states.minCoeff(), 2.0);
  EXPECT_EQ(p.states.maxCoeff(), 10.0);
  EXPECT_EQ(p.rows(), 17u);
}

TEST(Align, MissingHighValuesComeFromHighKriging) {
  const DataSet lf = grid(range(0, 10, 1), low_curve, Fidelity::low);
  const DataSet hf = grid(range(0, 10, 2), high_curve, Fidelity::high);
  const auto p = align_datasets(lf, hf);
  const KrigingModel oracle = fit_kriging(hf.states, hf.responses.col(0));
  ASSERT_EQ(p.rows(), 11u);
  for (Eigen::Index i = 0; i < 11; ++i) {
    const double x = p.states(i, 0);
    if (i % 2 == 1) {
      EXPECT_FALSE(p.high_observed[static_cast<std::size_t>(i)]);
      EXPECT_EQ(p.high(i, 0), oracle.predict(std::span<const double>(&x, 1)));
    } else {
      EXPECT_EQ(p.high(i, 0), high_curve(x));
    }
    EXPECT_EQ(p.low(i, 0), low_curve(x));
  }
}

TEST(Align, EmptyIntersectionIsRejected) {
  EXPECT_THROW(align_datasets(grid(range(0, 1, 0.25), low_curve, Fidelity::low),
                              grid(range(2, 3, 0.25), high_curve, Fidelity::high)),
               InputError);
}

TEST(Align, MismatchedColumnsAreRejected) {
  DataSet hf = grid(range(0, 1, 0.25), high_curve, Fidelity::high);
  hf.response_names = {"z"};
  EXPECT_THROW(align_datasets(grid(range(0, 1, 0.25), low_curve, Fidelity::low), hf), InputError);
}

TEST(AlignProperties, ObservedValuesAreCopiedAndNothingExtrapolates) {
  const DataSet lf = grid(range(-1.0, 7.0, 0.3), low_curve, Fidelity::low);
  const DataSet hf = grid(range(0.05, 9.0, 0.7), high_curve, Fidelity::high);
  const auto p = align_datasets(lf, hf);
  for (Eigen::Index i = 0; i < p.states.rows(); ++i) {
    const double x = p.states(i, 0);
    EXPECT_GE(x, 0.05);
    EXPECT_LE(x, lf.states.maxCoeff());
    if (p.low_observed[static_cast<std::size_t>(i)]) EXPECT_EQ(p.low(i, 0), low_curve(x));
    if (p.high_observed[static_cast<std::size_t>(i)]) EXPECT_EQ(p.high(i, 0), high_curve(x));
    if (i > 0) EXPECT_LT(p.states(i - 1, 0), x);
  }
}

TEST(AlignProperties, SelfAlignmentHasZeroResidual) {
  const DataSet d = grid(range(0, 3, 0.2), low_curve, Fidelity::low);
  const auto p = align_datasets(d, d);
  EXPECT_EQ(p.delta().cwiseAbs().maxCoeff(), 0.0);
}

TEST(AlignProperties, TwoDimensionalStates) {
  DataSet lf, hf;
  for (DataSet* d : {&lf, &hf}) {
    d->state_names = {"Ma", "alpha"};
    d->response_names = {"Cx"};
  }
  auto fill = [](DataSet& d, double step, double shift) {
    std::vector<std::pair<double, double>> pts;
    for (double a = 0.0; a <= 1.0 + 1e-12; a += step)
      for (double b = 0.0; b <= 1.0 + 1e-12; b += step) pts.emplace_back(a, b);
    const auto n = static_cast<Eigen::Index>(pts.size());
    d.states.resize(n, 2);
    d.responses.resize(n, 1);
    d.passthrough.resize(n, 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      d.states(i, 0) = pts[static_cast<std::size_t>(i)].first;
      d.states(i, 1) = pts[static_cast<std::size_t>(i)].second;
      d.responses(i, 0) = std::cos(2 * d.states(i, 0)) * d.states(i, 1) + shift;
    }
  };
  fill(lf, 0.25, 0.0);
  fill(hf, 0.5, 0.2);
  const auto p = align_datasets(lf, hf);
  EXPECT_EQ(p.rows(), 25u);
  for (Eigen::Index i = 0; i < 25; ++i) EXPECT_NEAR(p.delta()(i, 0), 0.2, 0.1);
}

TEST(AlignedCsv, RoundTrip) {
  const auto p = align_datasets(grid(range(0, 10, 1), low_curve, Fidelity::low),
                                grid(range(0, 10, 2), high_curve, Fidelity::high));
  std::ostringstream out;
  write_aligned_csv(p, out);
  EXPECT_EQ(out.str().substr(0, out.str().find('\n')), "x,y_L,y_H,y_delta");
  std::istringstream in(out.str());
  const auto back = read_aligned_csv(in, "aligned");
  EXPECT_EQ(back.state_names, p.state_names);
  EXPECT_EQ(back.response_names, p.response_names);
  EXPECT_EQ(back.states, p.states);
  EXPECT_EQ(back.low, p.low);
  EXPECT_EQ(back.high, p.high);
}

TEST(Carrier, ObservedWhereAvailableKrigedElsewhere) {
  const DataSet lf = grid(range(0, 10, 1), low_curve, Fidelity::low);
  Eigen::MatrixXd extra(3, 1);
  extra << 2.5, 4.0, 9.75;
  const auto c = build_carrier(lf, extra);
  EXPECT_EQ(c.states.rows(), 13);
  const KrigingModel oracle = fit_kriging(lf.states, lf.responses.col(0));
  for (Eigen::Index i = 0; i < 3; ++i) {
    const auto row = static_cast<Eigen::Index>(c.extra_rows[static_cast<std::size_t>(i)]);
    EXPECT_EQ(c.states(row, 0), extra(i, 0));
    const double x = extra(i, 0);
    EXPECT_EQ(c.low(row, 0), i == 1 ? low_curve(4.0) : oracle.predict(std::span<const double>(&x, 1)));
  }
  Eigen::MatrixXd outside(1, 1);
  outside << 11.0;
  EXPECT_THROW(build_carrier(lf, outside), InputError);
}
