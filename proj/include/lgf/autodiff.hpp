#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lgf/tensor.hpp"

namespace lgf::ad {

using lgf::to_string;

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One vertex of the computation graph. Leaves have no inputs; a trainable
// leaf is a parameter whose gradient backward() fills in.
struct Node {
  std::string op;
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  bool trainable = false;
  std::vector<NodePtr> inputs;
  // Reads this->grad and accumulates into the inputs that require grad.
  std::function<void(Node&)> backward_fn;
};

// Handle to a graph node with value semantics for the handle itself.
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool trainable() const { return node_ && node_->trainable; }
  bool defined() const { return static_cast<bool>(node_); }
  void zero_grad() const { node_->grad = Tensor(); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

Var parameter(Tensor value);
Var constant(Tensor value);

// Runs reverse-mode differentiation from a scalar loss. Every trainable leaf
// reachable from the loss gets `grad` set (overwritten, not accumulated
// across calls). Returns those leaves in discovery order.
std::vector<Var> backward(const Var& loss);

// ---- primitives -----------------------------------------------------------

Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
Var sum(const Var& x);
Var relu(const Var& x);

// Stride-1 2-D convolution. x: (b, c_in, h, w); weight: (c_out, c_in, kh, kw);
// bias: (c_out) or undefined. Zero padding of pad_h / pad_w on each side.
Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t pad_h, std::size_t pad_w);

struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

// Per-channel normalization over (b, h, w). Training mode uses batch
// statistics and updates `state`; evaluation mode uses the running ones.
Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state, bool training);

// Max over non-overlapping pairs along h; w untouched.
Var maxpool_2x1(const Var& x);

// Doubles h with half-pixel-centred linear interpolation and edge clamping.
Var upsample_bilinear_2x1(const Var& x);

// x: (..., in) times weight (in, out) plus optional bias (out).
Var linear(const Var& x, const Var& weight, const Var& bias);

Var softmax_lastdim(const Var& x);

// Inverted dropout. The mask is a pure function of `seed`, so repeated
// evaluation with the same seed reproduces it.
Var dropout(const Var& x, double p, std::uint64_t seed, bool training);

Var concat_channels(const Var& a, const Var& b);

// x: (b, tokens, width) plus the interleaved sine/cosine table over tokens.
Var add_positional_encoding(const Var& x);
Tensor positional_encoding_table(std::size_t tokens, std::size_t width);

Var reshape(const Var& x, Shape shape);
// Rank-4 axis permutation; output axis i is input axis perm[i].
Var permute(const Var& x, std::array<std::size_t, 4> perm);

// Batched matrix product over identical leading axes.
// a: (..., m, k); b: (..., k, n), or (..., n, k) when transpose_b.
Var batched_matmul(const Var& a, const Var& b, bool transpose_b);

// Mean of squared differences over every element.
Var mse_loss(const Var& prediction, const Tensor& target);

// ---- uniform dispatch -----------------------------------------------------

enum class Primitive {
  conv3x3,
  conv1x1,
  batchnorm2d,
  relu,
  maxpool_2x1,
  upsample_2x1,
  linear,
  softmax_lastdim,
  dropout,
  concat_channels,
  positional_encoding,
};

std::string to_string(Primitive kind);
inline constexpr Primitive kAllPrimitives[] = {
    Primitive::conv3x3,         Primitive::conv1x1,      Primitive::batchnorm2d,
    Primitive::relu,            Primitive::maxpool_2x1,  Primitive::upsample_2x1,
    Primitive::linear,          Primitive::softmax_lastdim, Primitive::dropout,
    Primitive::concat_channels, Primitive::positional_encoding,
};

struct PrimitiveContext {
  bool training = true;
  BatchNormState* batchnorm = nullptr;
  double dropout_p = 0.1;
  std::uint64_t dropout_seed = 0;
};

// params per kind: conv* {weight, [bias]}; batchnorm2d {gamma, beta};
// linear {weight, [bias]}; concat_channels {other}; the rest none.
Var apply_primitive(Primitive kind, std::span<const Var> params, const Var& input, PrimitiveContext ctx = {});

}  // namespace lgf::ad
