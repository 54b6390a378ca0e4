#include "lgf/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "lgf/error.hpp"

namespace lgf::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require_finite(const char* op, const Var& v) {
  if (!v.value().all_finite()) {
    throw NumericError(std::string(op) + ": non-finite input of shape " + to_string(v.shape()));
  }
}

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

void require_rank(const char* op, const Var& v, std::size_t rank) {
  if (v.shape().size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + " input, got shape " +
                     to_string(v.shape()));
  }
}

Var make_node(std::string op, Tensor value, std::vector<NodePtr> inputs, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->op = std::move(op);
  node->value = std::move(value);
  for (const auto& in : inputs) {
    if (in && in->requires_grad) node->requires_grad = true;
  }
  if (node->requires_grad) {
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(fn);
  }
  return Var(std::move(node));
}

// Gradient buffer for input i, or nullptr when that input needs none.
Tensor* grad_slot(Node& self, std::size_t i) {
  if (i >= self.inputs.size()) return nullptr;
  Node* in = self.inputs[i].get();
  if (!in || !in->requires_grad) return nullptr;
  if (in->grad.empty() && !in->value.empty()) in->grad = Tensor(in->value.shape());
  if (in->grad.shape() != in->value.shape()) in->grad = Tensor(in->value.shape());
  return &in->grad;
}

}  // namespace

Var parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->op = "parameter";
  node->value = std::move(value);
  node->requires_grad = true;
  node->trainable = true;
  return Var(std::move(node));
}

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->op = "constant";
  node->value = std::move(value);
  return Var(std::move(node));
}

std::vector<Var> backward(const Var& loss) {
  if (!loss.defined()) throw Error("backward: undefined loss");
  if (loss.value().size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  }
  if (!loss.value().all_finite()) throw NumericError("backward: non-finite loss");

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  visited.insert(loss.node().get());
  std::vector<Var> leaves;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child && child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) n->grad = Tensor();
  loss.node()->grad = Tensor(loss.shape(), 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Collect trainable leaves in discovery order; shared ownership is recovered
  // from the parent's input list.
  std::unordered_set<Node*> seen;
  for (Node* n : order) {
    for (const auto& in : n->inputs) {
      if (in && in->trainable && seen.insert(in.get()).second) {
        if (in->grad.empty()) in->grad = Tensor(in->value.shape());
        leaves.emplace_back(in);
      }
    }
  }
  return leaves;
}

Var add(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) shape_mismatch("add", a.shape(), b.shape());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_node("add", std::move(out), {a.node(), b.node()}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (Tensor* g = grad_slot(self, k)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

Var mul(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) shape_mismatch("mul", a.shape(), b.shape());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_node("mul", std::move(out), {a.node(), b.node()}, [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (Tensor* g = grad_slot(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (Tensor* g = grad_slot(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

Var scale(const Var& x, double factor) {
  Tensor out = x.value();
  for (auto& v : out.data()) v *= factor;
  return make_node("scale", std::move(out), {x.node()}, [factor](Node& self) {
    if (Tensor* g = grad_slot(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += factor * self.grad[i];
    }
  });
}

Var sum(const Var& x) {
  double total = 0.0;
  for (double v : x.value().data()) total += v;
  return make_node("sum", Tensor::scalar(total), {x.node()}, [](Node& self) {
    if (Tensor* g = grad_slot(self, 0)) {
      const double s = self.grad[0];
      for (auto& v : g->data()) v += s;
    }
  });
}

Var relu(const Var& x) {
  require_finite("relu", x);
  Tensor out = x.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return make_node("relu", std::move(out), {x.node()}, [](Node& self) {
    if (Tensor* g = grad_slot(self, 0)) {
      const Tensor& in = self.inputs[0]->value;
      for (std::size_t i = 0; i < g->size(); ++i) {
        if (in[i] > 0.0) (*g)[i] += self.grad[i];
      }
    }
  });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t pad_h, std::size_t pad_w) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", weight, 4);
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  if (xs[1] != ws[1]) shape_mismatch("conv2d", xs, ws);
  if (xs[2] + 2 * pad_h < ws[2] || xs[3] + 2 * pad_w < ws[3]) shape_mismatch("conv2d", xs, ws);
  if (bias.defined() && bias.shape() != Shape{ws[0]}) shape_mismatch("conv2d bias", ws, bias.shape());
  require_finite("conv2d", x);

  const std::size_t batch = xs[0], cin = xs[1], h = xs[2], w = xs[3];
  const std::size_t cout = ws[0], kh = ws[2], kw = ws[3];
  const std::size_t ho = h + 2 * pad_h - kh + 1, wo = w + 2 * pad_w - kw + 1;
  const std::size_t k = cin * kh * kw, p = ho * wo;

  // im2col: one (k x p) matrix per batch item.
  auto cols = std::make_shared<std::vector<double>>(batch * k * p, 0.0);
  const auto& xv = x.value();
  for (std::size_t b = 0; b < batch; ++b) {
    double* cb = cols->data() + b * k * p;
    for (std::size_t c = 0; c < cin; ++c) {
      const double* plane = xv.data().data() + (b * cin + c) * h * w;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          double* row = cb + ((c * kh + ky) * kw + kx) * p;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad_h);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(pad_w);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              row[oy * wo + ox] = plane[iy * w + ix];
            }
          }
        }
      }
    }
  }

  Tensor out({batch, cout, ho, wo});
  ConstMapMat wm(weight.value().data().data(), cout, k);
  for (std::size_t b = 0; b < batch; ++b) {
    ConstMapMat cm(cols->data() + b * k * p, k, p);
    MapMat om(out.data().data() + b * cout * p, cout, p);
    om.noalias() = wm * cm;
    if (bias.defined()) {
      for (std::size_t o = 0; o < cout; ++o) om.row(o).array() += bias.value()[o];
    }
  }

  return make_node("conv2d", std::move(out), {x.node(), weight.node(), bias.node()},
                   [cols, batch, cin, h, w, cout, kh, kw, ho, wo, k, p, pad_h, pad_w](Node& self) {
                     const Tensor& gout = self.grad;
                     if (Tensor* gw = grad_slot(self, 1)) {
                       MapMat gwm(gw->data().data(), cout, k);
                       for (std::size_t b = 0; b < batch; ++b) {
                         ConstMapMat gom(gout.data().data() + b * cout * p, cout, p);
                         ConstMapMat cm(cols->data() + b * k * p, k, p);
                         gwm.noalias() += gom * cm.transpose();
                       }
                     }
                     if (Tensor* gb = grad_slot(self, 2)) {
                       for (std::size_t b = 0; b < batch; ++b) {
                         ConstMapMat gom(gout.data().data() + b * cout * p, cout, p);
                         for (std::size_t o = 0; o < cout; ++o) (*gb)[o] += gom.row(o).sum();
                       }
                     }
                     if (Tensor* gx = grad_slot(self, 0)) {
                       ConstMapMat wm(self.inputs[1]->value.data().data(), cout, k);
                       RowMat gcols(k, p);
                       for (std::size_t b = 0; b < batch; ++b) {
                         ConstMapMat gom(gout.data().data() + b * cout * p, cout, p);
                         gcols.noalias() = wm.transpose() * gom;
                         for (std::size_t c = 0; c < cin; ++c) {
                           double* plane = gx->data().data() + (b * cin + c) * h * w;
                           for (std::size_t ky = 0; ky < kh; ++ky) {
                             for (std::size_t kx = 0; kx < kw; ++kx) {
                               const double* row = gcols.data() + ((c * kh + ky) * kw + kx) * p;
                               for (std::size_t oy = 0; oy < ho; ++oy) {
                                 const std::ptrdiff_t iy =
                                     static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad_h);
                                 if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                                 for (std::size_t ox = 0; ox < wo; ++ox) {
                                   const std::ptrdiff_t ix =
                                       static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(pad_w);
                                   if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                                   plane[iy * w + ix] += row[oy * wo + ox];
                                 }
                               }
                             }
                           }
                         }
                       }
                     }
                   });
}

Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state, bool training) {
  require_rank("batchnorm2d", x, 4);
  const auto& xs = x.shape();
  const std::size_t batch = xs[0], channels = xs[1], plane = xs[2] * xs[3];
  if (gamma.shape() != Shape{channels}) shape_mismatch("batchnorm2d gamma", xs, gamma.shape());
  if (beta.shape() != Shape{channels}) shape_mismatch("batchnorm2d beta", xs, beta.shape());
  if (state.running_mean.size() != channels) {
    throw ShapeError("batchnorm2d: running statistics sized for " + std::to_string(state.running_mean.size()) +
                     " channels, input " + to_string(xs));
  }
  require_finite("batchnorm2d", x);

  const double count = static_cast<double>(batch * plane);
  const auto& xv = x.value();
  std::vector<double> mean(channels), invstd(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    if (training) {
      double m = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* src = xv.data().data() + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) m += src[i];
      }
      m /= count;
      double v = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* src = xv.data().data() + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) v += (src[i] - m) * (src[i] - m);
      }
      v /= count;
      mean[c] = m;
      invstd[c] = 1.0 / std::sqrt(v + state.eps);
      const double unbiased = count > 1.0 ? v * count / (count - 1.0) : v;
      state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * m;
      state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    } else {
      mean[c] = state.running_mean[c];
      invstd[c] = 1.0 / std::sqrt(state.running_var[c] + state.eps);
    }
  }

  Tensor xhat(xs);
  Tensor out(xs);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t off = (b * channels + c) * plane;
      const double g = gamma.value()[c], be = beta.value()[c];
      for (std::size_t i = 0; i < plane; ++i) {
        const double n = (xv[off + i] - mean[c]) * invstd[c];
        xhat[off + i] = n;
        out[off + i] = g * n + be;
      }
    }
  }

  return make_node("batchnorm2d", std::move(out), {x.node(), gamma.node(), beta.node()},
                   [xhat = std::move(xhat), invstd, batch, channels, plane, count, training](Node& self) {
                     const Tensor& gout = self.grad;
                     const Tensor& gv = self.inputs[1]->value;
                     std::vector<double> sum_g(channels, 0.0), sum_gx(channels, 0.0);
                     for (std::size_t b = 0; b < batch; ++b) {
                       for (std::size_t c = 0; c < channels; ++c) {
                         const std::size_t off = (b * channels + c) * plane;
                         for (std::size_t i = 0; i < plane; ++i) {
                           sum_g[c] += gout[off + i];
                           sum_gx[c] += gout[off + i] * xhat[off + i];
                         }
                       }
                     }
                     if (Tensor* gg = grad_slot(self, 1)) {
                       for (std::size_t c = 0; c < channels; ++c) (*gg)[c] += sum_gx[c];
                     }
                     if (Tensor* gb = grad_slot(self, 2)) {
                       for (std::size_t c = 0; c < channels; ++c) (*gb)[c] += sum_g[c];
                     }
                     if (Tensor* gx = grad_slot(self, 0)) {
                       for (std::size_t b = 0; b < batch; ++b) {
                         for (std::size_t c = 0; c < channels; ++c) {
                           const std::size_t off = (b * channels + c) * plane;
                           const double scale_c = gv[c] * invstd[c];
                           for (std::size_t i = 0; i < plane; ++i) {
                             if (training) {
                               (*gx)[off + i] += scale_c * (gout[off + i] - sum_g[c] / count -
                                                            xhat[off + i] * sum_gx[c] / count);
                             } else {
                               (*gx)[off + i] += scale_c * gout[off + i];
                             }
                           }
                         }
                       }
                     }
                   });
}

Var maxpool_2x1(const Var& x) {
  require_rank("maxpool_2x1", x, 4);
  const auto& xs = x.shape();
  if (xs[2] % 2 != 0) {
    throw ShapeError("maxpool_2x1: height must be even, got shape " + to_string(xs));
  }
  require_finite("maxpool_2x1", x);
  const std::size_t outer = xs[0] * xs[1], h = xs[2], w = xs[3], ho = h / 2;
  Tensor out({xs[0], xs[1], ho, w});
  std::vector<std::size_t> argmax(out.size());
  const auto& xv = x.value();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t y = 0; y < ho; ++y) {
      for (std::size_t c = 0; c < w; ++c) {
        const std::size_t top = (o * h + 2 * y) * w + c;
        const std::size_t bottom = top + w;
        const std::size_t dst = (o * ho + y) * w + c;
        const std::size_t pick = xv[bottom] > xv[top] ? bottom : top;
        out[dst] = xv[pick];
        argmax[dst] = pick;
      }
    }
  }
  return make_node("maxpool_2x1", std::move(out), {x.node()}, [argmax = std::move(argmax)](Node& self) {
    if (Tensor* g = grad_slot(self, 0)) {
      for (std::size_t i = 0; i < argmax.size(); ++i) (*g)[argmax[i]] += self.grad[i];
    }
  });
}

Var upsample_bilinear_2x1(const Var& x) {
  require_rank("upsample_bilinear_2x1", x, 4);
  require_finite("upsample_bilinear_2x1", x);
  const auto& xs = x.shape();
  const std::size_t outer = xs[0] * xs[1], h = xs[2], w = xs[3], ho = 2 * h;
  if (h == 0) throw ShapeError("upsample_bilinear_2x1: empty height in shape " + to_string(xs));
  // Source coordinate of output row i: (i + 0.5) / 2 - 0.5, clamped to [0, h-1].
  std::vector<std::size_t> lo(ho), hi(ho);
  std::vector<double> frac(ho);
  for (std::size_t i = 0; i < ho; ++i) {
    double src = (static_cast<double>(i) + 0.5) / 2.0 - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(h - 1));
    lo[i] = static_cast<std::size_t>(std::floor(src));
    hi[i] = std::min(lo[i] + 1, h - 1);
    frac[i] = src - static_cast<double>(lo[i]);
  }
  Tensor out({xs[0], xs[1], ho, w});
  const auto& xv = x.value();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < ho; ++i) {
      const double* a = xv.data().data() + (o * h + lo[i]) * w;
      const double* b = xv.data().data() + (o * h + hi[i]) * w;
      double* dst = out.data().data() + (o * ho + i) * w;
      for (std::size_t c = 0; c < w; ++c) dst[c] = (1.0 - frac[i]) * a[c] + frac[i] * b[c];
    }
  }
  return make_node("upsample_bilinear_2x1", std::move(out), {x.node()},
                   [lo = std::move(lo), hi = std::move(hi), frac = std::move(frac), outer, h, w, ho](Node& self) {
                     if (Tensor* g = grad_slot(self, 0)) {
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t i = 0; i < ho; ++i) {
                           const double* src = self.grad.data().data() + (o * ho + i) * w;
                           double* a = g->data().data() + (o * h + lo[i]) * w;
                           double* b = g->data().data() + (o * h + hi[i]) * w;
                           for (std::size_t c = 0; c < w; ++c) {
                             a[c] += (1.0 - frac[i]) * src[c];
                             b[c] += frac[i] * src[c];
                           }
                         }
                       }
                     }
                   });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank("linear", weight, 2);
  if (x.shape().empty() || x.shape().back() != weight.shape()[0]) shape_mismatch("linear", x.shape(), weight.shape());
  if (bias.defined() && bias.shape() != Shape{weight.shape()[1]}) {
    shape_mismatch("linear bias", weight.shape(), bias.shape());
  }
  require_finite("linear", x);
  const std::size_t in = weight.shape()[0], outw = weight.shape()[1];
  const std::size_t rows = x.value().size() / in;
  Shape os = x.shape();
  os.back() = outw;
  Tensor out(os);
  ConstMapMat xm(x.value().data().data(), rows, in);
  ConstMapMat wm(weight.value().data().data(), in, outw);
  MapMat om(out.data().data(), rows, outw);
  om.noalias() = xm * wm;
  if (bias.defined()) {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < outw; ++j) om(r, j) += bias.value()[j];
    }
  }
  return make_node("linear", std::move(out), {x.node(), weight.node(), bias.node()}, [rows, in, outw](Node& self) {
    ConstMapMat gom(self.grad.data().data(), rows, outw);
    if (Tensor* gx = grad_slot(self, 0)) {
      ConstMapMat wm(self.inputs[1]->value.data().data(), in, outw);
      MapMat(gx->data().data(), rows, in).noalias() += gom * wm.transpose();
    }
    if (Tensor* gw = grad_slot(self, 1)) {
      ConstMapMat xm(self.inputs[0]->value.data().data(), rows, in);
      MapMat(gw->data().data(), in, outw).noalias() += xm.transpose() * gom;
    }
    if (Tensor* gb = grad_slot(self, 2)) {
      for (std::size_t j = 0; j < outw; ++j) (*gb)[j] += gom.col(j).sum();
    }
  });
}

Var softmax_lastdim(const Var& x) {
  if (x.shape().empty() || x.shape().back() == 0) throw ShapeError("softmax_lastdim: needs a last axis, got " + to_string(x.shape()));
  require_finite("softmax_lastdim", x);
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.value().size() / width;
  Tensor out(x.shape());
  const auto& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = xv.data().data() + r * width;
    double* dst = out.data().data() + r * width;
    const double m = *std::max_element(src, src + width);
    double total = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      dst[j] = std::exp(src[j] - m);
      total += dst[j];
    }
    for (std::size_t j = 0; j < width; ++j) dst[j] /= total;
  }
  Tensor saved = out;
  return make_node("softmax_lastdim", std::move(out), {x.node()}, [y = std::move(saved), rows, width](Node& self) {
    if (Tensor* g = grad_slot(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* yr = y.data().data() + r * width;
        const double* gr = self.grad.data().data() + r * width;
        double dot = 0.0;
        for (std::size_t j = 0; j < width; ++j) dot += gr[j] * yr[j];
        double* dst = g->data().data() + r * width;
        for (std::size_t j = 0; j < width; ++j) dst[j] += yr[j] * (gr[j] - dot);
      }
    }
  });
}

Var dropout(const Var& x, double p, std::uint64_t seed, bool training) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout: rate must lie in [0, 1), got " + std::to_string(p));
  require_finite("dropout", x);
  if (!training || p == 0.0) {
    return make_node("dropout", x.value(), {x.node()}, [](Node& self) {
      if (Tensor* g = grad_slot(self, 0)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    });
  }
  Rng rng(seed);
  std::vector<double> mask(x.value().size());
  const double keep_scale = 1.0 / (1.0 - p);
  for (auto& m : mask) m = rng.uniform() >= p ? keep_scale : 0.0;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return make_node("dropout", std::move(out), {x.node()}, [mask = std::move(mask)](Node& self) {
    if (Tensor* g = grad_slot(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * mask[i];
    }
  });
}

Var concat_channels(const Var& a, const Var& b) {
  require_rank("concat_channels", a, 4);
  require_rank("concat_channels", b, 4);
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3]) shape_mismatch("concat_channels", as, bs);
  require_finite("concat_channels", a);
  require_finite("concat_channels", b);
  const std::size_t batch = as[0], plane = as[2] * as[3];
  const std::size_t ca = as[1], cb = bs[1];
  Tensor out({batch, ca + cb, as[2], as[3]});
  for (std::size_t n = 0; n < batch; ++n) {
    std::copy_n(a.value().data().data() + n * ca * plane, ca * plane, out.data().data() + n * (ca + cb) * plane);
    std::copy_n(b.value().data().data() + n * cb * plane, cb * plane,
                out.data().data() + (n * (ca + cb) + ca) * plane);
  }
  return make_node("concat_channels", std::move(out), {a.node(), b.node()}, [batch, ca, cb, plane](Node& self) {
    const double* src = self.grad.data().data();
    if (Tensor* g = grad_slot(self, 0)) {
      for (std::size_t n = 0; n < batch; ++n) {
        const double* s = src + n * (ca + cb) * plane;
        double* d = g->data().data() + n * ca * plane;
        for (std::size_t i = 0; i < ca * plane; ++i) d[i] += s[i];
      }
    }
    if (Tensor* g = grad_slot(self, 1)) {
      for (std::size_t n = 0; n < batch; ++n) {
        const double* s = src + (n * (ca + cb) + ca) * plane;
        double* d = g->data().data() + n * cb * plane;
        for (std::size_t i = 0; i < cb * plane; ++i) d[i] += s[i];
      }
    }
  });
}

Tensor positional_encoding_table(std::size_t tokens, std::size_t width) {
  Tensor table({tokens, width});
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t j = 0; j < width; ++j) {
      const double pair = static_cast<double>(j / 2) * 2.0;
      const double freq = std::pow(10000.0, -pair / static_cast<double>(width));
      const double angle = static_cast<double>(t) * freq;
      table[t * width + j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return table;
}

Var add_positional_encoding(const Var& x) {
  require_rank("positional_encoding", x, 3);
  require_finite("positional_encoding", x);
  const auto& xs = x.shape();
  const Tensor table = positional_encoding_table(xs[1], xs[2]);
  Tensor out = x.value();
  const std::size_t block = xs[1] * xs[2];
  for (std::size_t b = 0; b < xs[0]; ++b) {
    for (std::size_t i = 0; i < block; ++i) out[b * block + i] += table[i];
  }
  return make_node("positional_encoding", std::move(out), {x.node()}, [](Node& self) {
    if (Tensor* g = grad_slot(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_node("reshape", std::move(out), {x.node()}, [](Node& self) {
    if (Tensor* g = grad_slot(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

Var permute(const Var& x, std::array<std::size_t, 4> perm) {
  require_rank("permute", x, 4);
  const auto& xs = x.shape();
  std::array<bool, 4> used{};
  for (auto a : perm) {
    if (a >= 4 || used[a]) throw ShapeError("permute: invalid axis permutation");
    used[a] = true;
  }
  const std::array<std::size_t, 4> in_stride{xs[1] * xs[2] * xs[3], xs[2] * xs[3], xs[3], 1};
  const Shape os{xs[perm[0]], xs[perm[1]], xs[perm[2]], xs[perm[3]]};
  // Input offset for each output element, reused by backward.
  std::vector<std::size_t> src(shape_size(os));
  std::size_t idx = 0;
  for (std::size_t i0 = 0; i0 < os[0]; ++i0) {
    for (std::size_t i1 = 0; i1 < os[1]; ++i1) {
      for (std::size_t i2 = 0; i2 < os[2]; ++i2) {
        for (std::size_t i3 = 0; i3 < os[3]; ++i3) {
          src[idx++] = i0 * in_stride[perm[0]] + i1 * in_stride[perm[1]] + i2 * in_stride[perm[2]] +
                       i3 * in_stride[perm[3]];
        }
      }
    }
  }
  Tensor out(os);
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = x.value()[src[i]];
  return make_node("permute", std::move(out), {x.node()}, [src = std::move(src)](Node& self) {
    if (Tensor* g = grad_slot(self, 0)) {
      for (std::size_t i = 0; i < src.size(); ++i) (*g)[src[i]] += self.grad[i];
    }
  });
}

Var batched_matmul(const Var& a, const Var& b, bool transpose_b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() < 2 || as.size() != bs.size() || !std::equal(as.begin(), as.end() - 2, bs.begin())) {
    shape_mismatch("batched_matmul", as, bs);
  }
  const std::size_t m = as[as.size() - 2], k = as.back();
  const std::size_t bk = transpose_b ? bs.back() : bs[bs.size() - 2];
  const std::size_t n = transpose_b ? bs[bs.size() - 2] : bs.back();
  if (bk != k) shape_mismatch("batched_matmul", as, bs);
  require_finite("batched_matmul", a);
  require_finite("batched_matmul", b);
  const std::size_t batches = a.value().size() / (m * k);
  Shape os = as;
  os.back() = n;
  Tensor out(os);
  for (std::size_t i = 0; i < batches; ++i) {
    ConstMapMat am(a.value().data().data() + i * m * k, m, k);
    MapMat om(out.data().data() + i * m * n, m, n);
    if (transpose_b) {
      om.noalias() = am * ConstMapMat(b.value().data().data() + i * n * k, n, k).transpose();
    } else {
      om.noalias() = am * ConstMapMat(b.value().data().data() + i * k * n, k, n);
    }
  }
  return make_node("batched_matmul", std::move(out), {a.node(), b.node()},
                   [batches, m, k, n, transpose_b](Node& self) {
                     const double* gptr = self.grad.data().data();
                     const double* aptr = self.inputs[0]->value.data().data();
                     const double* bptr = self.inputs[1]->value.data().data();
                     Tensor* ga = grad_slot(self, 0);
                     Tensor* gb = grad_slot(self, 1);
                     for (std::size_t i = 0; i < batches; ++i) {
                       ConstMapMat gm(gptr + i * m * n, m, n);
                       if (transpose_b) {
                         ConstMapMat bm(bptr + i * n * k, n, k);
                         if (ga) MapMat(ga->data().data() + i * m * k, m, k).noalias() += gm * bm;
                         if (gb) {
                           ConstMapMat am(aptr + i * m * k, m, k);
                           MapMat(gb->data().data() + i * n * k, n, k).noalias() += gm.transpose() * am;
                         }
                       } else {
                         ConstMapMat bm(bptr + i * k * n, k, n);
                         if (ga) MapMat(ga->data().data() + i * m * k, m, k).noalias() += gm * bm.transpose();
                         if (gb) {
                           ConstMapMat am(aptr + i * m * k, m, k);
                           MapMat(gb->data().data() + i * k * n, k, n).noalias() += am.transpose() * gm;
                         }
                       }
                     }
                   });
}

Var mse_loss(const Var& prediction, const Tensor& target) {
  if (prediction.shape() != target.shape()) shape_mismatch("mse_loss", prediction.shape(), target.shape());
  require_finite("mse_loss", prediction);
  const std::size_t n = target.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = prediction.value()[i] - target[i];
    total += e * e;
  }
  return make_node("mse_loss", Tensor::scalar(total / static_cast<double>(n)), {prediction.node()},
                   [target, n](Node& self) {
                     if (Tensor* g = grad_slot(self, 0)) {
                       const double s = 2.0 * self.grad[0] / static_cast<double>(n);
                       const Tensor& p = self.inputs[0]->value;
                       for (std::size_t i = 0; i < n; ++i) (*g)[i] += s * (p[i] - target[i]);
                     }
                   });
}

std::string to_string(Primitive kind) {
  switch (kind) {
    case Primitive::conv3x3: return "conv3x3";
    case Primitive::conv1x1: return "conv1x1";
    case Primitive::batchnorm2d: return "batchnorm2d";
    case Primitive::relu: return "relu";
    case Primitive::maxpool_2x1: return "maxpool_2x1";
    case Primitive::upsample_2x1: return "upsample_2x1";
    case Primitive::linear: return "linear";
    case Primitive::softmax_lastdim: return "softmax_lastdim";
    case Primitive::dropout: return "dropout";
    case Primitive::concat_channels: return "concat_channels";
    case Primitive::positional_encoding: return "positional_encoding";
  }
  return "unknown";
}

Var apply_primitive(Primitive kind, std::span<const Var> params, const Var& input, PrimitiveContext ctx) {
  auto param = [&](std::size_t i) -> Var {
    return i < params.size() ? params[i] : Var();
  };
  auto need = [&](std::size_t n) {
    if (params.size() < n) {
      throw ShapeError(to_string(kind) + ": expected " + std::to_string(n) + " parameter tensors, got " +
                       std::to_string(params.size()));
    }
  };
  switch (kind) {
    case Primitive::conv3x3: {
      need(1);
      if (params[0].shape().size() != 4 || params[0].shape()[2] != 3 || params[0].shape()[3] != 3) {
        throw ShapeError("conv3x3: weight must be (c_out, c_in, 3, 3), got " + to_string(params[0].shape()));
      }
      return conv2d(input, params[0], param(1), 1, 1);
    }
    case Primitive::conv1x1: {
      need(1);
      if (params[0].shape().size() != 4 || params[0].shape()[2] != 1 || params[0].shape()[3] != 1) {
        throw ShapeError("conv1x1: weight must be (c_out, c_in, 1, 1), got " + to_string(params[0].shape()));
      }
      return conv2d(input, params[0], param(1), 0, 0);
    }
    case Primitive::batchnorm2d: {
      need(2);
      if (!ctx.batchnorm) throw Error("batchnorm2d: no running-statistics state supplied");
      return batchnorm2d(input, params[0], params[1], *ctx.batchnorm, ctx.training);
    }
    case Primitive::relu: return relu(input);
    case Primitive::maxpool_2x1: return maxpool_2x1(input);
    case Primitive::upsample_2x1: return upsample_bilinear_2x1(input);
    case Primitive::linear: need(1); return linear(input, params[0], param(1));
    case Primitive::softmax_lastdim: return softmax_lastdim(input);
    case Primitive::dropout: return dropout(input, ctx.dropout_p, ctx.dropout_seed, ctx.training);
    case Primitive::concat_channels: need(1); return concat_channels(input, params[0]);
    case Primitive::positional_encoding: return add_positional_encoding(input);
  }
  throw Error("apply_primitive: unknown primitive");
}

}  // namespace lgf::ad
