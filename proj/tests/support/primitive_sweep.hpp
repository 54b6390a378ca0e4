#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "support/gradcheck.hpp"

namespace lgf::testing {

// Random shapes and values for one primitive, then the worst relative error
// between reverse-mode and central-difference gradients over the input and
// every parameter tensor.
inline double primitive_gradient_error(ad::Primitive kind, std::uint64_t seed) {
  using namespace lgf::ad;
  Rng rng(seed * 7919 + static_cast<std::uint64_t>(kind));
  const std::size_t b = 1 + rng.below(2), c = 1 + rng.below(3), h = 2 * (1 + rng.below(3)), w = 1 + rng.below(3);
  const std::size_t t = 2 + rng.below(4), k = 1 + rng.below(4), co = 1 + rng.below(3);

  Shape in_shape{b, c, h, w};
  std::vector<Var> params;
  switch (kind) {
    case Primitive::conv3x3:
      params = {parameter(random_tensor({co, c, 3, 3}, rng)), parameter(random_tensor({co}, rng))};
      break;
    case Primitive::conv1x1:
      params = {parameter(random_tensor({co, c, 1, 1}, rng)), parameter(random_tensor({co}, rng))};
      break;
    case Primitive::batchnorm2d:
      params = {parameter(random_tensor({c}, rng, 0.5, 1.5)), parameter(random_tensor({c}, rng))};
      break;
    case Primitive::linear:
      in_shape = {b, t, k};
      params = {parameter(random_tensor({k, co}, rng)), parameter(random_tensor({co}, rng))};
      break;
    case Primitive::softmax_lastdim:
    case Primitive::positional_encoding:
      in_shape = {b, t, k + 1};
      break;
    case Primitive::concat_channels:
      params = {parameter(random_tensor({b, co, h, w}, rng))};
      break;
    default: break;
  }
  Tensor xv = random_tensor(in_shape, rng);
  if (kind == Primitive::relu) {
    // keep clear of the kink
    for (auto& v : xv.data()) v = v < 0 ? std::min(v, -1e-2) : std::max(v, 1e-2);
  }
  Var x = parameter(xv);

  BatchNormState bn(c);
  PrimitiveContext ctx;
  ctx.training = true;
  ctx.batchnorm = &bn;
  ctx.dropout_p = 0.3;
  ctx.dropout_seed = seed;

  Var probe = apply_primitive(kind, params, x, ctx);
  const Tensor weights = random_tensor(probe.shape(), rng);
  auto forward = [&] { return sum(mul(apply_primitive(kind, params, x, ctx), constant(weights))); };

  std::vector<Var> leaves{x};
  leaves.insert(leaves.end(), params.begin(), params.end());
  backward(forward());
  std::vector<Tensor> analytic;
  for (const auto& l : leaves) analytic.push_back(l.grad().empty() ? Tensor(l.shape()) : l.grad());

  double worst = 0.0;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    Tensor numeric = numeric_gradient(leaves[i].mutable_value(), [&] { return forward().value().item(); });
    worst = std::max(worst, relative_error(analytic[i], numeric));
  }
  return worst;
}

}  // namespace lgf::testing
