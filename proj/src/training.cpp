#include "lgf/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>

#include "lgf/csv.hpp"
#include "lgf/error.hpp"

namespace lgf::train {

OptimizerState make_optimizer(std::span<const ad::Var> params, double lr) {
  if (!(lr > 0.0)) throw ConfigError("adam: learning rate must be positive");
  OptimizerState s;
  s.lr = lr;
  for (const auto& p : params) {
    s.m.emplace_back(p.shape());
    s.v.emplace_back(p.shape());
  }
  return s;
}

void adam_step(OptimizerState& state, std::span<ad::Var> params, std::span<const Tensor> grads) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw ShapeError("adam: " + std::to_string(params.size()) + " parameters, " + std::to_string(grads.size()) +
                     " gradients, " + std::to_string(state.m.size()) + " moment slots");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i].empty() && grads[i].shape() != params[i].shape()) {
      throw ShapeError("adam: gradient " + std::to_string(i) + " has shape " + to_string(grads[i].shape()) +
                       ", parameter has " + to_string(params[i].shape()));
    }
    if (!grads[i].all_finite()) throw NumericError("adam: gradient " + std::to_string(i) + " is not finite");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& w = params[i].mutable_value();
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double g = grads[i].empty() ? 0.0 : grads[i][j];
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
      w[j] -= state.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.eps);
    }
  }
}

SchedulerSignal scheduler_step(SchedulerState& state, double& lr, double epoch_loss) {
  if (!std::isfinite(epoch_loss)) throw NumericError("scheduler: epoch loss is not finite");
  SchedulerSignal sig;
  if (epoch_loss < state.best - state.min_delta) {
    state.best = epoch_loss;
    state.since_improvement = 0;
    return sig;
  }
  if (++state.since_improvement < state.patience) return sig;
  state.since_improvement = 0;
  if (lr * state.factor < state.min_lr) {
    sig.stop = true;
  } else {
    lr *= state.factor;
    sig.reduced = true;
  }
  return sig;
}

Metrics evaluate_metrics(const Eigen::VectorXd& prediction, const Eigen::VectorXd& truth) {
  if (prediction.size() != truth.size()) {
    throw ShapeError("metrics: " + std::to_string(prediction.size()) + " predictions for " +
                     std::to_string(truth.size()) + " truth values");
  }
  if (truth.size() < 2) throw InputError("metrics: need at least 2 values");
  const Eigen::VectorXd e = prediction - truth;
  const double n = static_cast<double>(truth.size());
  Metrics m;
  m.rmse = std::sqrt(e.squaredNorm() / n);
  m.mae = e.cwiseAbs().sum() / n;
  const double ss = (truth.array() - truth.mean()).square().sum();
  if (ss == 0.0) {
    m.r2 = std::numeric_limits<double>::quiet_NaN();
    m.r2_defined = false;
  } else {
    m.r2 = 1.0 - e.squaredNorm() / ss;
  }
  return m;
}

void write_report_csv(const TrainReport& report, std::ostream& out) {
  out << "epoch,loss,lr\n";
  for (std::size_t e = 0; e < report.epochs(); ++e) {
    out << e + 1 << ',' << csv::format_number(report.losses[e]) << ',' << csv::format_number(report.lrs[e]) << '\n';
  }
  const double last = report.losses.empty() ? std::numeric_limits<double>::quiet_NaN() : report.losses.back();
  const double lr = report.lrs.empty() ? std::numeric_limits<double>::quiet_NaN() : report.lrs.back();
  out << "summary," << csv::format_number(last) << ',' << csv::format_number(lr) << '\n';
}

void save_report_csv(const TrainReport& report, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  write_report_csv(report, out);
}

namespace {

// splitmix64 finaliser; decorrelates per-batch dropout seeds.
std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

TrainResult train(const kriging::AlignedPair& aligned, const net::ArchConfig& arch, const TrainConfig& config) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto p = static_cast<std::size_t>(aligned.states.cols());
  const auto q = static_cast<std::size_t>(aligned.low.cols());
  if (aligned.rows() == 0) throw InputError("train: aligned data is empty");
  if (arch.d != p + q || arch.d_y != q) {
    throw ConfigError("train: arch has d = " + std::to_string(arch.d) + ", d_y = " + std::to_string(arch.d_y) +
                      " but the data gives d = " + std::to_string(p + q) + ", d_y = " + std::to_string(q));
  }
  if (config.epochs == 0 || config.batch_size == 0) throw ConfigError("train: epochs and batch size must be positive");

  // Decouple the fidelity gap; y_L is an input feature.
  const Eigen::MatrixXd delta = aligned.delta();
  Eigen::MatrixXd features(aligned.states.rows(), static_cast<Eigen::Index>(p + q));
  features << aligned.states, aligned.low;

  std::vector<std::string> feature_names = aligned.state_names, delta_names;
  for (const auto& r : aligned.response_names) {
    feature_names.push_back(r + "_L");
    delta_names.push_back(r + "_delta");
  }

  TrainResult result{net::LGFNetModel(arch, config.seed), {}};
  net::LGFNetModel& model = result.model;
  model.state_names = aligned.state_names;
  model.response_names = aligned.response_names;
  model.input_stats = data::NormStats::fit(features, feature_names);
  model.target_stats = data::NormStats::fit(delta, delta_names);

  const data::WindowBatch inputs = net::make_windows(arch, model.input_stats.normalize(features));
  const data::WindowBatch targets = net::make_windows(arch, model.target_stats.normalize(delta));
  const std::size_t n = inputs.count();
  if (config.batch_size > n) {
    throw ConfigError("train: batch size " + std::to_string(config.batch_size) + " exceeds the " + std::to_string(n) +
                      " available windows");
  }
  result.report.windows = n;

  auto params = model.parameters();
  OptimizerState opt = make_optimizer(params, config.lr);
  opt.beta1 = config.beta1;
  opt.beta2 = config.beta2;
  opt.eps = config.eps;
  SchedulerState sched;
  sched.factor = config.plateau_factor;
  sched.patience = config.plateau_patience;
  sched.min_delta = config.plateau_min_delta;
  sched.min_lr = config.min_lr;

  Rng shuffle(mix(config.seed));
  std::vector<std::size_t> order(n);
  std::vector<Tensor> grads(params.size());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    double total = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t first = 0; first < n; first += config.batch_size, ++batch_index) {
      const std::span<const std::size_t> which(order.data() + first, std::min(config.batch_size, n - first));
      const std::uint64_t dropout_seed = mix(config.seed ^ mix(epoch * 1000003ULL + batch_index));
      const ad::Var pred = model.forward(ad::constant(inputs.gather(which)), {true, dropout_seed});
      const ad::Var loss = net::fgdl_loss(pred, targets.gather(which));
      const double value = loss.value().item();
      if (!std::isfinite(value)) {
        throw NumericError("train: loss diverged (" + std::to_string(value) + ") at epoch " + std::to_string(epoch + 1) +
                           ", batch " + std::to_string(batch_index + 1));
      }
      ad::backward(loss);
      for (std::size_t i = 0; i < params.size(); ++i) grads[i] = params[i].grad();
      adam_step(opt, params, grads);
      total += value * static_cast<double>(which.size());
    }
    const double epoch_loss = total / static_cast<double>(n);
    result.report.losses.push_back(epoch_loss);
    result.report.lrs.push_back(opt.lr);
    if (scheduler_step(sched, opt.lr, epoch_loss).stop) {
      result.report.stopped_at_lr_floor = true;
      break;
    }
  }

  const net::Fusion fused = net::fuse_inference(model, aligned.states, aligned.low);
  for (Eigen::Index r = 0; r < aligned.high.cols(); ++r) {
    result.report.train_metrics.push_back(evaluate_metrics(fused.fused.col(r), aligned.high.col(r)));
  }
  result.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace lgf::train
