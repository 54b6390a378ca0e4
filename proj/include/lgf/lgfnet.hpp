#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lgf/autodiff.hpp"
#include "lgf/dataset.hpp"

namespace lgf::net {

struct ArchConfig {
  // C_1..C_5; stages 1-4 pool, stage 5 is the bottleneck.
  std::vector<std::size_t> channels{32, 64, 128, 256, 512};
  std::size_t window = 112;
  std::size_t stride = 14;
  std::size_t heads = 1;
  double attention_dropout = 0.1;
  bool use_sliding_window = true;
  bool use_attention = true;
  std::size_t d = 8;    // input feature width: states plus low-fidelity responses
  std::size_t d_y = 1;  // residual width

  // Throws ConfigError naming the violated rule.
  void validate() const;
  std::size_t bottleneck_length() const { return window / 16; }
};

// Conv (3x3, no bias) -> BatchNorm -> ReLU.
struct ConvBlock {
  ad::Var weight;
  ad::Var gamma;
  ad::Var beta;
  ad::BatchNormState bn;
};

struct Stage {
  ConvBlock first;
  ConvBlock second;
};

struct Encoded {
  ad::Var bottleneck;
  std::vector<ad::Var> skips;  // E_1..E_4, pre-pool
};

struct ForwardOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;
};

class LGFNetModel {
 public:
  LGFNetModel(ArchConfig arch, std::uint64_t seed);

  const ArchConfig& arch() const { return arch_; }

  Encoded spl_forward(const ad::Var& input, const ForwardOptions& options);
  ad::Var rrl_forward(const ad::Var& bottleneck, const ForwardOptions& options);
  ad::Var fsl_forward(const ad::Var& bottleneck, const std::vector<ad::Var>& skips, const ForwardOptions& options);
  // (b, 1, L, d) -> (b, 1, L, d_y)
  ad::Var forward(const ad::Var& input, const ForwardOptions& options);

  // Attention weights (b, h, tokens, tokens) of the most recent rrl_forward.
  const Tensor& last_attention() const { return last_attention_; }

  std::vector<ad::Var> spl_parameters() const;
  std::vector<ad::Var> rrl_parameters() const;
  std::vector<ad::Var> fsl_parameters() const;
  // SPL, then RRL, then FSL, each in construction order.
  std::vector<ad::Var> parameters() const;
  std::size_t parameter_count() const;

  ad::Var& w_q() { return w_q_; }
  ad::Var& w_k() { return w_k_; }
  ad::Var& w_v() { return w_v_; }
  ad::Var& w_o() { return w_o_; }
  ad::Var& head_weight() { return head_weight_; }
  ad::Var& head_bias() { return head_bias_; }
  std::vector<Stage>& encoder() { return encoder_; }
  std::vector<Stage>& decoder() { return decoder_; }
  const std::vector<Stage>& encoder() const { return encoder_; }
  const std::vector<Stage>& decoder() const { return decoder_; }
  void zero_head();

  // Feature and residual scaling used at inference; identity until trained.
  data::NormStats input_stats;
  data::NormStats target_stats;
  std::vector<std::string> state_names;
  std::vector<std::string> response_names;

 private:
  ad::Var block(ConvBlock& b, const ad::Var& x, bool training);
  ad::Var stage(Stage& s, const ad::Var& x, bool training);

  ArchConfig arch_;
  std::vector<Stage> encoder_;  // 5 stages
  ad::Var w_q_, w_k_, w_v_, w_o_;
  std::vector<Stage> decoder_;  // decoder_[i] mirrors encoder stage i (0-based), run from 3 down to 0
  ad::Var head_weight_;         // (d_y, C_1, 1, d)
  ad::Var head_bias_;           // (d_y)
  Tensor last_attention_;
};

// Mean squared error over every element.
ad::Var fgdl_loss(const ad::Var& prediction, const Tensor& target);

struct Fusion {
  Eigen::MatrixXd delta;  // denormalised reconstructed network output
  Eigen::MatrixXd fused;  // y_L + delta
};

// Windows [states, y_L] (normalised by model.input_stats), runs the network
// in evaluation mode, overlap-averages the residual, denormalises it and
// superposes it on y_L.
Fusion fuse_inference(LGFNetModel& model, const Eigen::MatrixXd& states, const Eigen::MatrixXd& low);

// Windows used for both training and inference under the ablation flag.
data::WindowBatch make_windows(const ArchConfig& arch, const Eigen::MatrixXd& table);

void save_checkpoint(const LGFNetModel& model, const std::filesystem::path& path);
LGFNetModel load_checkpoint(const std::filesystem::path& path);

}  // namespace lgf::net
