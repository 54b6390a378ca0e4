#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "lgf/dataset.hpp"
#include "lgf/error.hpp"

using namespace lgf;
using namespace lgf::data;

namespace {

DataSet parse(const std::string& text, const Schema& schema) {
  std::istringstream in(text);
  return read_csv(in, "inline", schema, Fidelity::low);
}

// One state `Ma`, one response `y`, and a passthrough row id.
DataSet tagged(std::size_t n, double offset = 0.0) {
  DataSet d;
  d.state_names = {"Ma"};
  d.response_names = {"y"};
  d.passthrough_names = {"id"};
  d.states.resize(static_cast<Eigen::Index>(n), 1);
  d.responses.resize(static_cast<Eigen::Index>(n), 1);
  d.passthrough.resize(static_cast<Eigen::Index>(n), 1);
  for (std::size_t i = 0; i < n; ++i) {
    d.states(static_cast<Eigen::Index>(i), 0) = 0.5 + 0.001 * static_cast<double>(i);
    d.responses(static_cast<Eigen::Index>(i), 0) = std::sin(static_cast<double>(i));
    d.passthrough(static_cast<Eigen::Index>(i), 0) = offset + static_cast<double>(i);
  }
  return d;
}

std::vector<double> ids(const DataSet& d) { return {d.passthrough.data(), d.passthrough.data() + d.rows()}; }

Eigen::MatrixXd sequence(std::size_t n, std::size_t d) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::cos(0.37 * static_cast<double>(i)) * 3.0;
  return m;
}

// Stands in for a network that returns its input window unchanged.
Tensor identity_outputs(const WindowBatch& b) { return b.blocks; }

}  // namespace

TEST(Csv, SixStatesOneResponse) {
  const Schema s = Schema::make({"Ma", "alpha", "phi", "Dx", "Dy", "Dz"}, {"Cx"});
  const DataSet d = parse("Ma,alpha,phi,Dx,Dy,Dz,Cx\n0.6,2,0,1,0,0,0.03\n0.7,4,0,1,0,0,0.05\n", s);
  EXPECT_EQ(d.p(), 6u);
  EXPECT_EQ(d.q(), 1u);
  EXPECT_EQ(d.rows(), 2u);
  EXPECT_EQ(d.responses(1, 0), 0.05);
}

TEST(Csv, ColumnsAreFoundByName) {
  const DataSet d = parse("y,x\n1,2\n", Schema::make({"x"}, {"y"}));
  EXPECT_EQ(d.states(0, 0), 2.0);
  EXPECT_EQ(d.responses(0, 0), 1.0);
}

TEST(Csv, EmptyBodyIsRejected) {
  EXPECT_THROW(parse("x,y\n", Schema::make({"x"}, {"y"})), InputError);
}

TEST(Csv, BadCellsNameTheirCoordinates) {
  const Schema s = Schema::make({"x"}, {"y"});
  try {
    parse("x,y\n1,2\n3,abc\n", s);
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("data row 2, column 'y'"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse("x,y\n1,nan\n", s), InputError);
  EXPECT_THROW(parse("x,y\n1,inf\n", s), InputError);
  EXPECT_THROW(parse("x\n1\n", s), InputError);
  EXPECT_THROW(parse("x,y,z\n1,2,3\n", s), InputError);
}

TEST(Csv, SaveLoadRoundTripIsBitIdentical) {
  DataSet d = tagged(30);
  for (Eigen::Index i = 0; i < 30; ++i) d.responses(i, 0) = std::exp(0.731 * static_cast<double>(i)) / 7.0 - 1e-9 * i;
  const auto dir = std::filesystem::temp_directory_path() / "lgf_dataset_roundtrip";
  save_csv(d, dir / "d.csv");
  save_schema(d.schema(), dir / "d.schema.csv");
  const DataSet back = load_csv(dir / "d.csv", load_schema(dir / "d.schema.csv"), Fidelity::high);
  EXPECT_EQ(back.states, d.states);
  EXPECT_EQ(back.responses, d.responses);
  EXPECT_EQ(back.passthrough, d.passthrough);
  std::ostringstream a, b;
  write_csv(d, a);
  write_csv(back, b);
  EXPECT_EQ(a.str(), b.str());
  std::filesystem::remove_all(dir);
}

TEST(Schema, SidecarParsesRolesAndUnits) {
  std::istringstream in("column,role,unit\nMa,state,-\nRe,passthrough,-\nCx,response,-\n");
  const Schema s = read_schema(in, "sidecar");
  EXPECT_EQ(s.names(Role::state), std::vector<std::string>{"Ma"});
  EXPECT_EQ(s.names(Role::passthrough), std::vector<std::string>{"Re"});
  std::istringstream bad("column,role,unit\nMa,weird,-\n");
  EXPECT_THROW(read_schema(bad, "sidecar"), InputError);
}

TEST(Windows, UnitStrideEnumeratesEveryStart) {
  EXPECT_EQ(sliding_windows(sequence(5, 2), 3, 1).starts, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Windows, FullLengthWindowIsSingle) {
  EXPECT_EQ(sliding_windows(sequence(112, 3), 112, 14).starts, std::vector<std::size_t>{0});
}

TEST(Windows, TailWindowCoversRemainder) {
  EXPECT_EQ(sliding_windows(sequence(11, 1), 4, 3).starts, (std::vector<std::size_t>{0, 3, 6, 7}));
}

TEST(Windows, ShortSequenceIsRejected) {
  EXPECT_THROW(sliding_windows(sequence(3, 1), 4, 1), InputError);
  EXPECT_THROW(sliding_windows(sequence(5, 1), 4, 0), InputError);
  EXPECT_THROW(sliding_windows(sequence(5, 1), 2, 3), InputError);
}

TEST(Windows, BlocksHoldTheirSlices) {
  const Eigen::MatrixXd t = sequence(9, 2);
  const auto b = sliding_windows(t, 4, 2);
  EXPECT_EQ(b.blocks.shape(), (Shape{b.count(), 1, 4, 2}));
  for (std::size_t k = 0; k < b.count(); ++k)
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 2; ++c)
        EXPECT_EQ(b.blocks.at(k, 0, r, c), t(static_cast<Eigen::Index>(b.starts[k] + r), static_cast<Eigen::Index>(c)));
}

TEST(Windows, ChunksPadTheTailAndIgnoreThePadding) {
  const Eigen::MatrixXd t = sequence(10, 1);
  const auto b = chunk_windows(t, 4);
  EXPECT_EQ(b.starts, (std::vector<std::size_t>{0, 4, 8}));
  EXPECT_EQ(b.valid, (std::vector<std::size_t>{4, 4, 2}));
  EXPECT_EQ(b.blocks.at(2, 0, 3, 0), t(9, 0));
  EXPECT_EQ(reconstruct_from_windows(b, identity_outputs(b)), t);
}

TEST(Reconstruction, OverlapIsAveraged) {
  WindowBatch b = sliding_windows(sequence(3, 1), 2, 1);
  Tensor out({2, 1, 2, 1}, std::vector<double>{0.0, 1.0, 3.0, 5.0});
  const Eigen::MatrixXd r = reconstruct_from_windows(b, out);
  EXPECT_EQ(r(0, 0), 0.0);
  EXPECT_EQ(r(1, 0), 2.0);
  EXPECT_EQ(r(2, 0), 5.0);
}

TEST(Reconstruction, CountWeightedSumIsConserved) {
  const auto b = sliding_windows(sequence(23, 1), 6, 4);
  Rng rng(5);
  Tensor out({b.count(), 1, 6, 2});
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = rng.uniform(-1.0, 1.0);
  const Eigen::MatrixXd r = reconstruct_from_windows(b, out);
  std::vector<double> count(23, 0.0);
  for (auto s : b.starts)
    for (std::size_t k = 0; k < 6; ++k) count[s + k] += 1.0;
  for (int c = 0; c < 2; ++c) {
    double lhs = 0.0, rhs = 0.0;
    for (int i = 0; i < 23; ++i) lhs += count[static_cast<std::size_t>(i)] * r(i, c);
    for (std::size_t k = 0; k < b.count(); ++k)
      for (std::size_t i = 0; i < 6; ++i) rhs += out.at(k, 0, i, static_cast<std::size_t>(c));
    EXPECT_NEAR(lhs, rhs, 1e-12);
  }
}

TEST(Reconstruction, RejectsMismatchedOutputs) {
  const auto b = sliding_windows(sequence(8, 1), 4, 2);
  EXPECT_THROW(reconstruct_from_windows(b, Tensor({b.count() + 1, 1, 4, 1})), ShapeError);
}

TEST(WindowProperties, CoverageAndIdentityRoundTrip) {
  for (std::size_t n = 1; n <= 40; ++n) {
    for (std::size_t l = 1; l <= n; l += 3) {
      for (std::size_t s = 1; s <= l; ++s) {
        const Eigen::MatrixXd t = sequence(n, 2);
        const auto b = sliding_windows(t, l, s);
        std::vector<int> hit(n, 0);
        for (auto st : b.starts) {
          ASSERT_LE(st + l, n);
          for (std::size_t k = 0; k < l; ++k) hit[st + k] = 1;
        }
        ASSERT_TRUE(std::all_of(hit.begin(), hit.end(), [](int h) { return h == 1; })) << n << ' ' << l << ' ' << s;
        ASSERT_EQ(reconstruct_from_windows(b, identity_outputs(b)), t);
      }
    }
  }
}

TEST(LeaveHalfOut, ThreeCasesOfHundred) {
  const std::vector<DataSet> cases{tagged(100, 0), tagged(100, 1000), tagged(100, 2000)};
  const Split s = split_leave_half_out(cases, 1);
  EXPECT_EQ(s.train.rows(), 250u);
  EXPECT_EQ(s.test.rows(), 50u);
  EXPECT_EQ(s.test.passthrough(0, 0), 1050.0);
}

TEST(LeaveHalfOut, OddCountRoundsUpForTraining) {
  const Split s = split_leave_half_out({tagged(10, 0), tagged(101, 1000)}, 1);
  EXPECT_EQ(s.train.rows(), 10u + 51u);
  EXPECT_EQ(s.test.rows(), 50u);
}

TEST(LeaveHalfOut, DisjointAndExhaustive) {
  const std::vector<DataSet> cases{tagged(37, 0), tagged(37, 1000)};
  const Split s = split_leave_half_out(cases, 0);
  auto train = ids(s.train), test = ids(s.test);
  for (double t : test) EXPECT_EQ(std::count(train.begin(), train.end(), t), 0);
  train.insert(train.end(), test.begin(), test.end());
  std::sort(train.begin(), train.end());
  auto all = ids(cases[0]);
  const auto other = ids(cases[1]);
  all.insert(all.end(), other.begin(), other.end());
  std::sort(all.begin(), all.end());
  EXPECT_EQ(train, all);
}

TEST(LeaveHalfOut, MissingTargetIsRejected) {
  EXPECT_THROW(split_leave_half_out({tagged(4), tagged(4)}, 2), InputError);
  EXPECT_THROW(split_leave_half_out({tagged(4)}, 0), InputError);
}

namespace {

// Blocks of `sizes[b]` rows with Mach stepping by 0.1 between blocks and
// creeping by 0.001 inside them.
DataSet mach_trace(const std::vector<std::size_t>& sizes) {
  const std::size_t n = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  DataSet d = tagged(n);
  std::size_t row = 0;
  for (std::size_t b = 0; b < sizes.size(); ++b) {
    for (std::size_t i = 0; i < sizes[b]; ++i, ++row) {
      d.states(static_cast<Eigen::Index>(row), 0) = 0.4 + 0.1 * static_cast<double>(b) + 0.001 * static_cast<double>(i);
    }
  }
  return d;
}

}  // namespace

TEST(MachBlocks, EveryFifthBlockGoesToTest) {
  const DataSet d = mach_trace(std::vector<std::size_t>(10, 3));
  const Split s = split_mach_blocks(d);
  EXPECT_EQ(ids(s.test), (std::vector<double>{12, 13, 14, 27, 28, 29}));
  EXPECT_EQ(s.train.rows() + s.test.rows(), d.rows());
}

TEST(MachBlocks, BoundariesMatchConstruction) {
  const DataSet d = mach_trace({4, 7, 1, 5, 3, 6});
  EXPECT_EQ(mach_block_boundaries(d, {}), (std::vector<std::size_t>{0, 4, 11, 12, 17, 20, 26}));
}

TEST(MachBlocks, NoJumpIsRejected) {
  EXPECT_THROW(split_mach_blocks(tagged(50)), InputError);
  BlockSplitConfig c;
  c.mach_column = "Mach";
  EXPECT_THROW(split_mach_blocks(mach_trace({3, 3, 3, 3, 3}), c), InputError);
}

TEST(MachBlocks, DisjointAndExhaustive) {
  const DataSet d = mach_trace({2, 3, 4, 5, 6, 7, 8});
  const Split s = split_mach_blocks(d);
  auto all = ids(s.train);
  const auto test = ids(s.test);
  for (double t : test) EXPECT_EQ(std::count(all.begin(), all.end(), t), 0);
  all.insert(all.end(), test.begin(), test.end());
  std::sort(all.begin(), all.end());
  EXPECT_EQ(all, ids(d));
}

TEST(Synthetic, SmoothHighAtZero) {
  EXPECT_NEAR(synthetic_high(SyntheticKind::smooth, 0.0), 3.02721, 1e-5);
  const auto [lf, hf] = gen_synthetic({});
  EXPECT_EQ(hf.responses(0, 0), synthetic_high(SyntheticKind::smooth, 0.0));
  EXPECT_EQ(lf.rows(), 400u);
  EXPECT_EQ(hf.rows(), 40u);
}

TEST(Synthetic, SameSeedIsBitIdentical) {
  SyntheticConfig c;
  c.kind = SyntheticKind::shock;
  c.noise = 0.1;
  const auto a = gen_synthetic(c), b = gen_synthetic(c);
  EXPECT_EQ(a.second.responses, b.second.responses);
  EXPECT_EQ(a.first.responses, b.first.responses);
  c.seed = 43;
  EXPECT_NE(gen_synthetic(c).second.responses, a.second.responses);
}

TEST(Synthetic, NoiseFreeSameGridResidualIsAnalytic) {
  SyntheticConfig c;
  c.n_lf = c.n_hf = 50;
  const auto [lf, hf] = gen_synthetic(c);
  EXPECT_EQ(lf.states, hf.states);
  for (Eigen::Index i = 0; i < 50; ++i) {
    const double x = lf.states(i, 0);
    EXPECT_EQ(hf.responses(i, 0) - lf.responses(i, 0),
              synthetic_high(c.kind, x) - synthetic_low(c.kind, x));
  }
}

TEST(Synthetic, RejectsTooFewPoints) {
  SyntheticConfig c;
  c.n_hf = 3;
  EXPECT_THROW(gen_synthetic(c), InputError);
  c.n_hf = 50;
  c.n_lf = 40;
  EXPECT_THROW(gen_synthetic(c), InputError);
}

TEST(SyntheticProperties, SmoothResidualHasBoundedCurvature) {
  SyntheticConfig c;
  c.n_lf = c.n_hf = 400;
  const auto [lf, hf] = gen_synthetic(c);
  const Eigen::VectorXd delta = hf.responses.col(0) - lf.responses.col(0);
  const double h = 1.0 / 399.0;
  double worst = 0.0;
  for (Eigen::Index i = 1; i + 1 < delta.size(); ++i) {
    worst = std::max(worst, std::abs(delta[i + 1] - 2.0 * delta[i] + delta[i - 1]) / (h * h));
  }
  // |d2/dx2 of 0.5 (6x-2)^2 sin(12x-4)| is below 0.5 * (72 + 2*12*6*4 + 144*16) on [0, 1].
  EXPECT_LT(worst, 0.5 * (72.0 + 576.0 + 2304.0));
}

TEST(SyntheticProperties, ShockResidualHasSharpFront) {
  SyntheticConfig c;
  c.kind = SyntheticKind::shock;
  c.n_lf = c.n_hf = 400;
  const auto [lf, hf] = gen_synthetic(c);
  const Eigen::VectorXd delta = hf.responses.col(0) - lf.responses.col(0);
  std::vector<double> diffs;
  for (Eigen::Index i = 1; i < delta.size(); ++i) diffs.push_back(std::abs(delta[i] - delta[i - 1]));
  const double top = *std::max_element(diffs.begin(), diffs.end());
  std::nth_element(diffs.begin(), diffs.begin() + static_cast<std::ptrdiff_t>(diffs.size() / 2), diffs.end());
  EXPECT_GT(top, 10.0 * diffs[diffs.size() / 2]);
}

TEST(Normalization, TrainingRowsAreStandardised) {
  Rng rng(3);
  Eigen::MatrixXd m(50, 3);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-4.0, 9.0);
  const auto s = NormStats::fit(m);
  const Eigen::MatrixXd z = s.normalize(m);
  for (Eigen::Index c = 0; c < 3; ++c) {
    EXPECT_NEAR(z.col(c).mean(), 0.0, 1e-12);
    EXPECT_NEAR(z.col(c).squaredNorm() / 50.0, 1.0, 1e-12);
  }
  EXPECT_LT((s.denormalize(z) - m).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Normalization, ConstantColumnIsUntouchedWithWarning) {
  Eigen::MatrixXd m(4, 2);
  m << 1, 7, 2, 7, 3, 7, 4, 7;
  std::ostringstream captured;
  auto* old = std::clog.rdbuf(captured.rdbuf());
  const auto s = NormStats::fit(m, {"a", "b"});
  std::clog.rdbuf(old);
  EXPECT_NE(captured.str().find("'b'"), std::string::npos);
  EXPECT_EQ(s.normalize(m).col(1), m.col(1));
}

TEST(Normalization, StatsIgnoreTestRows) {
  DataSet d = tagged(40);
  const Split a = split_leave_half_out({d, d}, 1);
  DataSet changed = d;
  changed.responses.bottomRows(20).setConstant(1e6);
  const Split b = split_leave_half_out({d, changed}, 1);
  const auto sa = NormStats::fit(a.train.responses), sb = NormStats::fit(b.train.responses);
  EXPECT_EQ(sa.mean, sb.mean);
  EXPECT_EQ(sa.scale, sb.scale);
}

TEST(Normalization, DataSetRoundTrip) {
  const DataSet d = tagged(25);
  const auto ss = NormStats::fit(d.states), rs = NormStats::fit(d.responses);
  const DataSet back = denormalize(normalize(d, ss, rs), ss, rs);
  EXPECT_LT((back.states - d.states).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((back.responses - d.responses).cwiseAbs().maxCoeff(), 1e-12);
}
