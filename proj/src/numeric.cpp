#include "lgf/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "lgf/error.hpp"

namespace lgf::numeric {

namespace {

Eigen::VectorXd project(Eigen::VectorXd x, const Box& box) {
  return x.cwiseMax(box.lower).cwiseMin(box.upper);
}

}  // namespace

Minimum nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f, Eigen::VectorXd start, const Box& box,
                    const NelderMeadOptions& options) {
  const Eigen::Index n = start.size();
  std::size_t evaluations = 0;
  auto eval = [&](const Eigen::VectorXd& x) {
    ++evaluations;
    const double v = f(x);
    return std::isnan(v) ? std::numeric_limits<double>::infinity() : v;
  };

  std::vector<Eigen::VectorXd> simplex;
  std::vector<double> values;
  simplex.push_back(project(std::move(start), box));
  values.push_back(eval(simplex[0]));
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::VectorXd vertex = simplex[0];
    const double width = box.upper[i] - box.lower[i];
    const double step = options.initial_step * (width > 0.0 ? width : 1.0);
    // Step towards whichever side has room.
    vertex[i] += (vertex[i] + step <= box.upper[i]) ? step : -step;
    vertex = project(vertex, box);
    values.push_back(eval(vertex));
    simplex.push_back(std::move(vertex));
  }

  std::vector<std::size_t> order(simplex.size());
  while (evaluations < options.max_evaluations) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    const std::size_t best = order.front(), worst = order.back(), second = order[order.size() - 2];

    double spread = 0.0;
    for (const auto& v : simplex) spread = std::max(spread, (v - simplex[best]).cwiseAbs().maxCoeff());
    const bool flat = std::isfinite(values[worst]) &&
                      std::abs(values[worst] - values[best]) <= options.f_tolerance * (1.0 + std::abs(values[best]));
    if (spread <= options.x_tolerance || (flat && spread <= 1e3 * options.x_tolerance)) break;

    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
    for (std::size_t i = 0; i < simplex.size(); ++i) {
      if (i != worst) centroid += simplex[i];
    }
    centroid /= static_cast<double>(n);

    const Eigen::VectorXd reflected = project(centroid + (centroid - simplex[worst]), box);
    const double fr = eval(reflected);
    if (fr < values[best]) {
      const Eigen::VectorXd expanded = project(centroid + 2.0 * (centroid - simplex[worst]), box);
      const double fe = eval(expanded);
      if (fe < fr) {
        simplex[worst] = expanded;
        values[worst] = fe;
      } else {
        simplex[worst] = reflected;
        values[worst] = fr;
      }
      continue;
    }
    if (fr < values[second]) {
      simplex[worst] = reflected;
      values[worst] = fr;
      continue;
    }
    const bool outside = fr < values[worst];
    const Eigen::VectorXd contracted = outside ? project(centroid + 0.5 * (reflected - centroid), box)
                                               : project(centroid + 0.5 * (simplex[worst] - centroid), box);
    const double fc = eval(contracted);
    if (fc < (outside ? fr : values[worst])) {
      simplex[worst] = contracted;
      values[worst] = fc;
      continue;
    }
    for (std::size_t i = 0; i < simplex.size(); ++i) {
      if (i == best) continue;
      simplex[i] = project(simplex[best] + 0.5 * (simplex[i] - simplex[best]), box);
      values[i] = eval(simplex[i]);
    }
  }
  const auto best = static_cast<std::size_t>(std::min_element(values.begin(), values.end()) - values.begin());
  return {simplex[best], values[best], evaluations};
}

Minimum multi_start_minimize(const std::function<double(const Eigen::VectorXd&)>& f,
                             const std::vector<Eigen::VectorXd>& starts, const Box& box,
                             const NelderMeadOptions& options) {
  if (starts.empty()) throw Error("multi_start_minimize: no starting points");
  Minimum best;
  best.value = std::numeric_limits<double>::infinity();
  std::size_t total = 0;
  for (const auto& s : starts) {
    Minimum m = nelder_mead(f, s, box, options);
    total += m.evaluations;
    if (best.x.size() == 0 || m.value < best.value) best = std::move(m);
  }
  best.evaluations = total;
  return best;
}

std::vector<double> log_spaced(double lo, double hi, std::size_t count) {
  std::vector<double> out(count);
  if (count == 1) {
    out[0] = std::sqrt(lo * hi);
    return out;
  }
  const double a = std::log(lo), b = std::log(hi);
  for (std::size_t i = 0; i < count; ++i) {
    out[i] = std::exp(a + (b - a) * static_cast<double>(i) / static_cast<double>(count - 1));
  }
  return out;
}

double Factorization::log_determinant() const {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

bool try_jittered_cholesky(const Eigen::MatrixXd& matrix, Factorization& out, const JitterPolicy& policy) {
  const double n = static_cast<double>(matrix.rows());
  double scale = matrix.trace() / n;
  if (!(scale > 0.0) || !std::isfinite(scale)) scale = 1.0;
  // Unperturbed first: jitter only when the pivots say the matrix is
  // numerically singular.
  out.llt.compute(matrix);
  if (out.llt.info() == Eigen::Success && out.llt.matrixLLT().diagonal().array().square().minCoeff() > 1e-14 * scale) {
    out.jitter = 0.0;
    return true;
  }
  Eigen::MatrixXd work = matrix;
  for (double level = policy.initial; level <= policy.maximum * (1.0 + 1e-12); level *= policy.growth) {
    const double jitter = level * scale;
    work.diagonal() = matrix.diagonal().array() + jitter;
    out.llt.compute(work);
    if (out.llt.info() == Eigen::Success && out.llt.matrixLLT().diagonal().minCoeff() > 0.0) {
      out.jitter = jitter;
      return true;
    }
  }
  return false;
}

Factorization jittered_cholesky(const Eigen::MatrixXd& matrix, const char* what, const JitterPolicy& policy) {
  Factorization f;
  if (try_jittered_cholesky(matrix, f, policy)) return f;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(matrix, Eigen::EigenvaluesOnly);
  const auto& ev = eig.eigenvalues();
  std::ostringstream msg;
  msg << what << ": matrix not positive definite after jitter up to " << policy.maximum
      << " x mean diagonal; eigenvalue range [" << ev.minCoeff() << ", " << ev.maxCoeff() << "], condition number "
      << (ev.minCoeff() > 0.0 ? ev.maxCoeff() / ev.minCoeff() : std::numeric_limits<double>::infinity());
  throw NumericError(msg.str());
}

std::vector<std::size_t> lexicographic_order(const Eigen::MatrixXd& states, const Eigen::VectorXd& values) {
  std::vector<std::size_t> order(static_cast<std::size_t>(states.rows()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    for (Eigen::Index c = 0; c < states.cols(); ++c) {
      const double x = states(static_cast<Eigen::Index>(a), c), y = states(static_cast<Eigen::Index>(b), c);
      if (x != y) return x < y;
    }
    return values[static_cast<Eigen::Index>(a)] < values[static_cast<Eigen::Index>(b)];
  });
  return order;
}

}  // namespace lgf::numeric
