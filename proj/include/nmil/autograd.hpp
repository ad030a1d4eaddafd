#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nmil/tensor.hpp"

namespace nmil {

enum class OpKind {
  input,      // leaf whose gradient is tracked but which is not trained
  parameter,  // trainable leaf
  constant,   // leaf without gradient
  conv2d,
  relu,
  maxpool2d,
  dense,
  flatten,
  softmax,
  hadamard,
  mean,
  max,
  concat,
  sum,
  kl_divergence,
  squared_distance,
};

struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

/// Output extent of a strided window sweep; throws unless it is a positive integer.
inline std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                      std::size_t padding, const char* axis) {
  const std::size_t padded = in + 2 * padding;
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (padded < kernel) {
    throw ShapeError(std::string("conv2d: kernel larger than padded input along ") + axis);
  }
  if ((padded - kernel) % stride != 0) {
    throw ShapeError(std::string("conv2d: non-integral output extent along ") + axis + " (" +
                     std::to_string(in) + " + 2*" + std::to_string(padding) + " - " +
                     std::to_string(kernel) + ") / " + std::to_string(stride));
  }
  return (padded - kernel) / stride + 1;
}

namespace detail {

// Output positions o in [lo, hi) such that 0 <= o*stride + k - pad < in.
inline void valid_range(std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                        std::size_t pad, std::size_t& lo, std::size_t& hi) {
  const auto ik = static_cast<long>(k), ip = static_cast<long>(pad), is = static_cast<long>(stride);
  const long first = ip > ik ? (ip - ik + is - 1) / is : 0;
  const long last = (static_cast<long>(in) - 1 + ip - ik);
  long end = last < 0 ? 0 : last / is + 1;
  end = std::min<long>(end, static_cast<long>(out));
  lo = static_cast<std::size_t>(std::min(first, end));
  hi = static_cast<std::size_t>(end);
}

struct ConvGeometry {
  std::size_t c_in, h, w, c_out, kh, kw, stride, pad, oh, ow;
};

inline void conv_forward(const ConvGeometry& g, const double* in, const double* kernels,
                         const double* bias, double* out) {
  const std::size_t oplane = g.oh * g.ow;
  for (std::size_t co = 0; co < g.c_out; ++co) {
    double* o = out + co * oplane;
    std::fill(o, o + oplane, bias[co]);
    for (std::size_t ci = 0; ci < g.c_in; ++ci) {
      const double* plane = in + ci * g.h * g.w;
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        std::size_t ylo, yhi;
        valid_range(g.h, g.oh, ky, g.stride, g.pad, ylo, yhi);
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          std::size_t xlo, xhi;
          valid_range(g.w, g.ow, kx, g.stride, g.pad, xlo, xhi);
          if (xlo >= xhi) continue;
          const double wv = kernels[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const double* src = plane + (oy * g.stride + ky - g.pad) * g.w + xlo * g.stride + kx - g.pad;
            double* dst = o + oy * g.ow + xlo;
            const std::size_t n = xhi - xlo;
            if (g.stride == 1) {
              for (std::size_t i = 0; i < n; ++i) dst[i] += wv * src[i];
            } else {
              for (std::size_t i = 0; i < n; ++i) dst[i] += wv * src[i * g.stride];
            }
          }
        }
      }
    }
  }
}

// Accumulates into grad_in / grad_kernels / grad_bias; any of them may be null.
inline void conv_backward(const ConvGeometry& g, const double* in, const double* kernels,
                          const double* grad_out, double* grad_in, double* grad_kernels,
                          double* grad_bias) {
  const std::size_t oplane = g.oh * g.ow;
  for (std::size_t co = 0; co < g.c_out; ++co) {
    const double* go = grad_out + co * oplane;
    if (grad_bias) {
      double s = 0.0;
      for (std::size_t i = 0; i < oplane; ++i) s += go[i];
      grad_bias[co] += s;
    }
    for (std::size_t ci = 0; ci < g.c_in; ++ci) {
      const double* plane = in + ci * g.h * g.w;
      double* gplane = grad_in ? grad_in + ci * g.h * g.w : nullptr;
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        std::size_t ylo, yhi;
        valid_range(g.h, g.oh, ky, g.stride, g.pad, ylo, yhi);
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          std::size_t xlo, xhi;
          valid_range(g.w, g.ow, kx, g.stride, g.pad, xlo, xhi);
          if (xlo >= xhi) continue;
          const std::size_t widx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
          const double wv = kernels[widx];
          double acc = 0.0;
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const std::size_t first = (oy * g.stride + ky - g.pad) * g.w + xlo * g.stride + kx - g.pad;
            const double* src = plane + first;
            const double* grow = go + oy * g.ow + xlo;
            const std::size_t n = xhi - xlo, st = g.stride;
            for (std::size_t i = 0; i < n; ++i) acc += grow[i] * src[i * st];
            if (gplane) {
              double* dst = gplane + first;
              for (std::size_t i = 0; i < n; ++i) dst[i * st] += wv * grow[i];
            }
          }
          if (grad_kernels) grad_kernels[widx] += acc;
        }
      }
    }
  }
}

}  // namespace detail

/// Standalone convolution: cross-correlation of input [C_in,H,W] with kernels
/// [C_out,C_in,kH,kW] plus a per-output-channel bias.
inline Tensor conv2d_forward(const Tensor& input, const Tensor& kernels, const Tensor& bias,
                             std::size_t stride, std::size_t padding) {
  if (input.rank() != 3) throw ShapeError("conv2d: input must be [C,H,W], got " + to_string(input.shape()));
  if (kernels.rank() != 4) {
    throw ShapeError("conv2d: kernels must be [C_out,C_in,kH,kW], got " + to_string(kernels.shape()));
  }
  if (kernels.dim(1) != input.dim(0)) {
    throw ShapeError("conv2d: input channel dimension " + std::to_string(input.dim(0)) +
                     " does not match kernel C_in " + std::to_string(kernels.dim(1)));
  }
  if (bias.rank() != 1 || bias.dim(0) != kernels.dim(0)) {
    throw ShapeError("conv2d: bias dimension " + to_string(bias.shape()) + " does not match C_out " +
                     std::to_string(kernels.dim(0)));
  }
  detail::ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), kernels.dim(0), kernels.dim(2),
                         kernels.dim(3), stride, padding, 0, 0};
  g.oh = conv_output_extent(g.h, g.kh, stride, padding, "height");
  g.ow = conv_output_extent(g.w, g.kw, stride, padding, "width");
  Tensor out({g.c_out, g.oh, g.ow});
  detail::conv_forward(g, input.data(), kernels.data(), bias.data(), out.data());
  return out;
}

struct GraphNode {
  OpKind kind = OpKind::constant;
  std::vector<std::size_t> inputs;
  Tensor value;
  Tensor grad;
  bool trainable = false;
  bool requires_grad = false;
  // op-specific state
  std::size_t stride = 1, padding = 0, window = 0;
  std::vector<std::size_t> routes;  // argmax indices for max-type ops
  Tensor target;                    // kl / squared-distance reference
};

/// Reverse-mode differentiation tape. Nodes are appended after their inputs,
/// so storage order is a topological order.
class Graph {
 public:
  static constexpr double kProbabilityFloor = 1e-12;

  NodeId input(Tensor value) { return leaf(OpKind::input, std::move(value), true, false); }
  NodeId parameter(Tensor value) { return leaf(OpKind::parameter, std::move(value), true, true); }
  NodeId constant(Tensor value) { return leaf(OpKind::constant, std::move(value), false, false); }

  NodeId conv2d(NodeId x, NodeId kernels, NodeId bias, std::size_t stride, std::size_t padding) {
    Tensor out = conv2d_forward(value(x), value(kernels), value(bias), stride, padding);
    GraphNode& n = push(OpKind::conv2d, {x.index, kernels.index, bias.index}, std::move(out));
    n.stride = stride;
    n.padding = padding;
    return last();
  }

  NodeId relu(NodeId x) {
    Tensor out = value(x);
    for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
    push(OpKind::relu, {x.index}, std::move(out));
    return last();
  }

  NodeId maxpool2d(NodeId x, std::size_t window, std::size_t stride) {
    const Tensor& in = value(x);
    if (in.rank() != 3) throw ShapeError("maxpool2d: input must be [C,H,W], got " + to_string(in.shape()));
    if (window == 0 || stride == 0) throw ShapeError("maxpool2d: window and stride must be positive");
    if (in.dim(1) < window || in.dim(2) < window) {
      throw ShapeError("maxpool2d: window " + std::to_string(window) + " larger than input " +
                       to_string(in.shape()));
    }
    const std::size_t c = in.dim(0), h = in.dim(1), w = in.dim(2);
    const std::size_t oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
    Tensor out({c, oh, ow});
    std::vector<std::size_t> routes(out.size());
    std::size_t o = 0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
          std::size_t best = (ch * h + oy * stride) * w + ox * stride;
          for (std::size_t dy = 0; dy < window; ++dy) {
            for (std::size_t dx = 0; dx < window; ++dx) {
              const std::size_t idx = (ch * h + oy * stride + dy) * w + ox * stride + dx;
              if (in[idx] > in[best]) best = idx;  // strict: ties keep the lowest index
            }
          }
          out[o] = in[best];
          routes[o] = best;
        }
      }
    }
    GraphNode& n = push(OpKind::maxpool2d, {x.index}, std::move(out));
    n.window = window;
    n.stride = stride;
    n.routes = std::move(routes);
    return last();
  }

  NodeId dense(NodeId x, NodeId weights, NodeId bias) {
    const Tensor& in = value(x);
    const Tensor& wt = value(weights);
    const Tensor& b = value(bias);
    if (in.rank() != 1) throw ShapeError("dense: input must be a vector, got " + to_string(in.shape()));
    if (wt.rank() != 2 || wt.dim(1) != in.dim(0)) {
      throw ShapeError("dense: weight shape " + to_string(wt.shape()) + " incompatible with input length " +
                       std::to_string(in.dim(0)));
    }
    if (b.rank() != 1 || b.dim(0) != wt.dim(0)) {
      throw ShapeError("dense: bias shape " + to_string(b.shape()) + " does not match " +
                       std::to_string(wt.dim(0)) + " units");
    }
    const std::size_t units = wt.dim(0), n_in = in.dim(0);
    Tensor out({units});
    for (std::size_t u = 0; u < units; ++u) {
      const double* row = wt.data() + u * n_in;
      double s = 0.0;
      for (std::size_t i = 0; i < n_in; ++i) s += row[i] * in[i];
      out[u] = s + b[u];
    }
    push(OpKind::dense, {x.index, weights.index, bias.index}, std::move(out));
    return last();
  }

  NodeId flatten(NodeId x) {
    const Tensor& in = value(x);
    push(OpKind::flatten, {x.index}, in.reshaped({in.size()}));
    return last();
  }

  NodeId softmax(NodeId x) {
    const Tensor& in = value(x);
    if (in.rank() != 1) throw ShapeError("softmax: input must be a vector, got " + to_string(in.shape()));
    Tensor out = in;
    const double m = *std::max_element(out.values().begin(), out.values().end());
    double z = 0.0;
    for (double& v : out.values()) {
      v = std::exp(v - m);
      z += v;
    }
    for (double& v : out.values()) v /= z;
    push(OpKind::softmax, {x.index}, std::move(out));
    return last();
  }

  /// Elementwise product of two equally shaped nodes.
  NodeId hadamard(NodeId a, NodeId b) {
    require_same_shape(value(a), value(b), "hadamard");
    Tensor out = value(a);
    const Tensor& bv = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    push(OpKind::hadamard, {a.index, b.index}, std::move(out));
    return last();
  }

  NodeId mean(std::span<const NodeId> xs) {
    NodeId s = reduce(OpKind::mean, xs);
    Tensor& out = nodes_.back().value;
    const double n = static_cast<double>(xs.size());
    for (double& v : out.values()) v /= n;
    return s;
  }

  /// Elementwise maximum; ties route the gradient to the earliest input.
  NodeId max(std::span<const NodeId> xs) { return reduce(OpKind::max, xs); }

  NodeId sum(std::span<const NodeId> xs) { return reduce(OpKind::sum, xs); }

  /// Concatenation of flattened inputs in the given order.
  NodeId concat(std::span<const NodeId> xs) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    std::vector<double> out;
    std::vector<std::size_t> idx;
    for (NodeId x : xs) {
      const auto v = value(x).values();
      out.insert(out.end(), v.begin(), v.end());
      idx.push_back(x.index);
    }
    push(OpKind::concat, std::move(idx), Tensor::vector(std::move(out)));
    return last();
  }

  /// Scalar KL(target || p), with p floored at kProbabilityFloor and 0·log 0 = 0.
  NodeId kl_divergence(NodeId p, const Tensor& target) {
    const Tensor& pv = value(p);
    require_same_shape(pv, target, "kl_divergence");
    double s = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
      if (target[i] > 0.0) {
        s += target[i] * (std::log(target[i]) - std::log(std::max(pv[i], kProbabilityFloor)));
      }
    }
    GraphNode& n = push(OpKind::kl_divergence, {p.index}, Tensor({1}, s));
    n.target = target;
    return last();
  }

  /// Scalar ||x - target||².
  NodeId squared_distance(NodeId x, const Tensor& target) {
    const Tensor& xv = value(x);
    if (xv.size() != target.size()) {
      throw ShapeError("squared_distance: length " + std::to_string(xv.size()) + " vs target " +
                       std::to_string(target.size()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double d = xv[i] - target[i];
      s += d * d;
    }
    GraphNode& n = push(OpKind::squared_distance, {x.index}, Tensor({1}, s));
    n.target = target;
    return last();
  }

  const Tensor& value(NodeId id) const { return node(id).value; }

  /// Gradient of the last backward() seed product; zeros for nodes outside the differentiated graph.
  Tensor grad(NodeId id) const {
    const GraphNode& n = node(id);
    return n.grad.empty() ? Tensor(n.value.shape()) : n.grad;
  }

  bool has_grad(NodeId id) const { return !node(id).grad.empty(); }

  const GraphNode& node(NodeId id) const {
    if (id.index >= nodes_.size()) throw std::out_of_range("graph node " + std::to_string(id.index));
    return nodes_[id.index];
  }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Propagates d<seed, output>/d(node) to every node that requires a gradient.
  void backward(NodeId output, const Tensor& seed) {
    GraphNode& out = nodes_.at(output.index);
    if (seed.shape() != out.value.shape()) {
      throw ShapeError("backward: seed shape " + to_string(seed.shape()) + " does not match output " +
                       to_string(out.value.shape()));
    }
    for (GraphNode& n : nodes_) n.grad = Tensor();
    if (!out.requires_grad) return;
    out.grad = seed;
    for (std::size_t i = output.index + 1; i-- > 0;) {
      GraphNode& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      propagate(n);
    }
  }

  void backward(NodeId output) { backward(output, Tensor(value(output).shape(), 1.0)); }

 private:
  NodeId leaf(OpKind kind, Tensor value, bool requires_grad, bool trainable) {
    GraphNode n;
    n.kind = kind;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.trainable = trainable;
    nodes_.push_back(std::move(n));
    return last();
  }

  GraphNode& push(OpKind kind, std::vector<std::size_t> inputs, Tensor value) {
    GraphNode n;
    n.kind = kind;
    for (std::size_t i : inputs) n.requires_grad = n.requires_grad || nodes_.at(i).requires_grad;
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return nodes_.back();
  }

  NodeId last() const { return NodeId{nodes_.size() - 1}; }

  NodeId reduce(OpKind kind, std::span<const NodeId> xs) {
    if (xs.empty()) throw ShapeError("aggregation over an empty list");
    Tensor out = value(xs[0]);
    std::vector<std::size_t> routes;
    if (kind == OpKind::max) routes.assign(out.size(), 0);
    std::vector<std::size_t> idx{xs[0].index};
    for (std::size_t k = 1; k < xs.size(); ++k) {
      const Tensor& v = value(xs[k]);
      if (v.shape() != out.shape()) {
        throw ShapeError("aggregation: element " + std::to_string(k) + " has shape " + to_string(v.shape()) +
                         ", expected " + to_string(out.shape()));
      }
      if (kind == OpKind::max) {
        for (std::size_t i = 0; i < out.size(); ++i) {
          if (v[i] > out[i]) {
            out[i] = v[i];
            routes[i] = k;
          }
        }
      } else {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
      }
      idx.push_back(xs[k].index);
    }
    GraphNode& n = push(kind, std::move(idx), std::move(out));
    n.routes = std::move(routes);
    return last();
  }

  Tensor& grad_slot(std::size_t i) {
    GraphNode& n = nodes_[i];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  bool wants(std::size_t i) const { return nodes_[i].requires_grad; }

  void propagate(const GraphNode& n) {
    const Tensor& g = n.grad;
    switch (n.kind) {
      case OpKind::input:
      case OpKind::parameter:
      case OpKind::constant:
        return;
      case OpKind::conv2d: {
        const Tensor& in = nodes_[n.inputs[0]].value;
        const Tensor& k = nodes_[n.inputs[1]].value;
        detail::ConvGeometry geo{in.dim(0), in.dim(1), in.dim(2), k.dim(0), k.dim(2), k.dim(3),
                                 n.stride, n.padding, n.value.dim(1), n.value.dim(2)};
        double* gi = wants(n.inputs[0]) ? grad_slot(n.inputs[0]).data() : nullptr;
        double* gk = wants(n.inputs[1]) ? grad_slot(n.inputs[1]).data() : nullptr;
        double* gb = wants(n.inputs[2]) ? grad_slot(n.inputs[2]).data() : nullptr;
        detail::conv_backward(geo, in.data(), k.data(), g.data(), gi, gk, gb);
        return;
      }
      case OpKind::relu: {
        if (!wants(n.inputs[0])) return;
        Tensor& gi = grad_slot(n.inputs[0]);
        const Tensor& in = nodes_[n.inputs[0]].value;
        // subgradient at exactly 0 is 0
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (in[i] > 0.0) gi[i] += g[i];
        }
        return;
      }
      case OpKind::maxpool2d: {
        if (!wants(n.inputs[0])) return;
        Tensor& gi = grad_slot(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gi[n.routes[i]] += g[i];
        return;
      }
      case OpKind::dense: {
        const Tensor& in = nodes_[n.inputs[0]].value;
        const Tensor& wt = nodes_[n.inputs[1]].value;
        const std::size_t units = wt.dim(0), n_in = wt.dim(1);
        if (wants(n.inputs[0])) {
          Tensor& gi = grad_slot(n.inputs[0]);
          for (std::size_t u = 0; u < units; ++u) {
            const double* row = wt.data() + u * n_in;
            const double gu = g[u];
            for (std::size_t i = 0; i < n_in; ++i) gi[i] += gu * row[i];
          }
        }
        if (wants(n.inputs[1])) {
          Tensor& gw = grad_slot(n.inputs[1]);
          for (std::size_t u = 0; u < units; ++u) {
            double* row = gw.data() + u * n_in;
            const double gu = g[u];
            for (std::size_t i = 0; i < n_in; ++i) row[i] += gu * in[i];
          }
        }
        if (wants(n.inputs[2])) {
          Tensor& gb = grad_slot(n.inputs[2]);
          for (std::size_t u = 0; u < units; ++u) gb[u] += g[u];
        }
        return;
      }
      case OpKind::flatten: {
        if (!wants(n.inputs[0])) return;
        Tensor& gi = grad_slot(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
        return;
      }
      case OpKind::softmax: {
        if (!wants(n.inputs[0])) return;
        Tensor& gi = grad_slot(n.inputs[0]);
        const Tensor& p = n.value;
        double dot = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) dot += p[i] * g[i];
        for (std::size_t i = 0; i < p.size(); ++i) gi[i] += p[i] * (g[i] - dot);
        return;
      }
      case OpKind::hadamard: {
        const Tensor& a = nodes_[n.inputs[0]].value;
        const Tensor& b = nodes_[n.inputs[1]].value;
        if (wants(n.inputs[0])) {
          Tensor& ga = grad_slot(n.inputs[0]);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
        }
        if (wants(n.inputs[1])) {
          Tensor& gb = grad_slot(n.inputs[1]);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
        }
        return;
      }
      case OpKind::mean:
      case OpKind::sum: {
        const double scale = n.kind == OpKind::mean ? 1.0 / static_cast<double>(n.inputs.size()) : 1.0;
        for (std::size_t in : n.inputs) {
          if (!wants(in)) continue;
          Tensor& gi = grad_slot(in);
          for (std::size_t i = 0; i < g.size(); ++i) gi[i] += scale * g[i];
        }
        return;
      }
      case OpKind::max: {
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t src = n.inputs[n.routes[i]];
          if (wants(src)) grad_slot(src)[i] += g[i];
        }
        return;
      }
      case OpKind::concat: {
        std::size_t offset = 0;
        for (std::size_t in : n.inputs) {
          const std::size_t len = nodes_[in].value.size();
          if (wants(in)) {
            Tensor& gi = grad_slot(in);
            for (std::size_t i = 0; i < len; ++i) gi[i] += g[offset + i];
          }
          offset += len;
        }
        return;
      }
      case OpKind::kl_divergence: {
        if (!wants(n.inputs[0])) return;
        Tensor& gi = grad_slot(n.inputs[0]);
        const Tensor& p = nodes_[n.inputs[0]].value;
        for (std::size_t i = 0; i < p.size(); ++i) {
          if (n.target[i] > 0.0 && p[i] >= kProbabilityFloor) gi[i] -= g[0] * n.target[i] / p[i];
        }
        return;
      }
      case OpKind::squared_distance: {
        if (!wants(n.inputs[0])) return;
        Tensor& gi = grad_slot(n.inputs[0]);
        const Tensor& x = nodes_[n.inputs[0]].value;
        for (std::size_t i = 0; i < x.size(); ++i) gi[i] += 2.0 * g[0] * (x[i] - n.target[i]);
        return;
      }
    }
  }

  std::vector<GraphNode> nodes_;
};

/// Plain SGD: p <- p - lr * g.
inline void sgd_step(Tensor& param, const Tensor& grad, double lr) {
  require_same_shape(param, grad, "sgd_step");
  double* p = param.data();
  const double* g = grad.data();
  for (std::size_t i = 0; i < param.size(); ++i) p[i] -= lr * g[i];
}

/// Exponentially decayed learning rate with a real-valued exponent.
inline double lr_at(std::size_t step, double base_lr, double decay_rate, std::size_t decay_steps) {
  if (!(base_lr > 0.0)) throw std::invalid_argument("lr_at: base_lr must be positive");
  if (!(decay_rate > 0.0 && decay_rate <= 1.0)) throw std::invalid_argument("lr_at: decay_rate must be in (0,1]");
  if (decay_steps == 0) throw std::invalid_argument("lr_at: decay_steps must be positive");
  return base_lr * std::pow(decay_rate, static_cast<double>(step) / static_cast<double>(decay_steps));
}

}  // namespace nmil
