#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <span>
#include <vector>

#include "lgf/alignment.hpp"
#include "lgf/lgfnet.hpp"

namespace lgf::train {

struct OptimizerState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t step = 0;
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Zeroed moments shaped like `params`.
OptimizerState make_optimizer(std::span<const ad::Var> params, double lr);

// Bias-corrected Adam. An empty gradient tensor counts as zero.
void adam_step(OptimizerState& state, std::span<ad::Var> params, std::span<const Tensor> grads);

struct SchedulerState {
  double best = std::numeric_limits<double>::infinity();
  std::size_t since_improvement = 0;
  double factor = 0.5;
  std::size_t patience = 15;
  double min_delta = 1e-6;
  double min_lr = 1e-6;
};

struct SchedulerSignal {
  bool reduced = false;
  bool stop = false;  // a reduction was due but would take lr below min_lr
};

SchedulerSignal scheduler_step(SchedulerState& state, double& lr, double epoch_loss);

struct TrainConfig {
  std::size_t epochs = 500;
  std::size_t batch_size = 64;
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double plateau_factor = 0.5;
  std::size_t plateau_patience = 15;
  double plateau_min_delta = 1e-6;
  double min_lr = 1e-6;
  std::uint64_t seed = 42;
};

struct Metrics {
  double rmse = 0.0;
  double mae = 0.0;
  double r2 = 0.0;
  bool r2_defined = true;  // false for constant truth; r2 is then NaN
};

Metrics evaluate_metrics(const Eigen::VectorXd& prediction, const Eigen::VectorXd& truth);

struct TrainReport {
  std::vector<double> losses;  // one per completed epoch
  std::vector<double> lrs;     // lr in force during each epoch
  bool stopped_at_lr_floor = false;
  std::size_t windows = 0;
  std::vector<Metrics> train_metrics;  // per response, fused vs y_H on the training grid
  double wall_seconds = 0.0;

  std::size_t epochs() const { return losses.size(); }
};

// `epoch,loss,lr` rows, then `summary,<final loss>,<final lr>`.
void write_report_csv(const TrainReport& report, std::ostream& out);
void save_report_csv(const TrainReport& report, const std::filesystem::path& path);

struct TrainResult {
  net::LGFNetModel model;
  TrainReport report;
};

// Residual learning on an aligned pair: targets y_H - y_L, features
// [states, y_L]; arch.d and arch.d_y must match the pair.
TrainResult train(const kriging::AlignedPair& aligned, const net::ArchConfig& arch, const TrainConfig& config);

}  // namespace lgf::train
