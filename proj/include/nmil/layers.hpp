#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "nmil/autograd.hpp"
#include "nmil/tensor.hpp"

namespace nmil {

enum class LayerKind { conv2d, relu, maxpool2d, dense, flatten, softmax };

inline std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::dense: return "dense";
    case LayerKind::flatten: return "flatten";
    case LayerKind::softmax: return "softmax";
  }
  return "?";
}

inline LayerKind parse_layer_kind(std::string_view name) {
  for (LayerKind k : {LayerKind::conv2d, LayerKind::relu, LayerKind::maxpool2d, LayerKind::dense,
                      LayerKind::flatten, LayerKind::softmax}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown layer kind '" + std::string(name) + "'");
}

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t out_channels = 0;  // conv2d
  std::size_t kernel = 0;        // conv2d kernel extent, maxpool2d window
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t units = 0;  // dense

  static LayerSpec conv(std::size_t out_channels, std::size_t kernel, std::size_t padding = 0,
                        std::size_t stride = 1) {
    return {LayerKind::conv2d, out_channels, kernel, stride, padding, 0};
  }
  static LayerSpec relu() { return {LayerKind::relu}; }
  static LayerSpec maxpool(std::size_t window, std::size_t stride = 0) {
    return {LayerKind::maxpool2d, 0, window, stride ? stride : window, 0, 0};
  }
  static LayerSpec dense(std::size_t units) { return {LayerKind::dense, 0, 0, 1, 0, units}; }
  static LayerSpec flatten() { return {LayerKind::flatten}; }
  static LayerSpec softmax() { return {LayerKind::softmax}; }

  bool has_params() const { return kind == LayerKind::conv2d || kind == LayerKind::dense; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

using LayerStack = std::vector<LayerSpec>;

/// Output shape of every layer; element i is the output of layer i.
inline std::vector<Shape> infer_shapes(const LayerStack& layers, const Shape& input) {
  std::vector<Shape> shapes;
  Shape cur = input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    auto fail = [&](const std::string& why) {
      throw ShapeError("layer " + std::to_string(i) + " (" + std::string(to_string(l.kind)) + "): " + why +
                       "; input shape " + to_string(cur));
    };
    switch (l.kind) {
      case LayerKind::conv2d:
        if (cur.size() != 3) fail("expects [C,H,W]");
        if (l.out_channels == 0 || l.kernel == 0) fail("needs positive channels and kernel");
        try {
          cur = {l.out_channels, conv_output_extent(cur[1], l.kernel, l.stride, l.padding, "height"),
                 conv_output_extent(cur[2], l.kernel, l.stride, l.padding, "width")};
        } catch (const ShapeError& e) {
          fail(e.what());
        }
        break;
      case LayerKind::maxpool2d:
        if (cur.size() != 3) fail("expects [C,H,W]");
        if (l.kernel == 0 || l.stride == 0) fail("needs positive window and stride");
        if (cur[1] < l.kernel || cur[2] < l.kernel) fail("window larger than input");
        cur = {cur[0], (cur[1] - l.kernel) / l.stride + 1, (cur[2] - l.kernel) / l.stride + 1};
        break;
      case LayerKind::dense:
        if (cur.size() != 1) fail("expects a vector (add flatten first)");
        if (l.units == 0) fail("needs positive units");
        cur = {l.units};
        break;
      case LayerKind::flatten:
        cur = {element_count(cur)};
        break;
      case LayerKind::softmax:
        if (cur.size() != 1) fail("expects a vector");
        break;
      case LayerKind::relu:
        break;
    }
    shapes.push_back(cur);
  }
  return shapes;
}

inline Shape output_shape(const LayerStack& layers, const Shape& input) {
  auto s = infer_shapes(layers, input);
  return s.empty() ? input : s.back();
}

struct LayerWeights {
  Tensor weights;
  Tensor bias;
  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

/// A layer stack together with its parameters.
struct Network {
  LayerStack layers;
  Shape input_shape;
  std::vector<LayerWeights> params;  // one entry per layer, empty for parameterless layers

  Shape output_shape() const { return nmil::output_shape(layers, input_shape); }

  /// Visits every parameter tensor as (path, tensor); paths look like "L3.w".
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn&& fn) {
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      if (!self.layers[i].has_params()) continue;
      fn("L" + std::to_string(i) + ".w", self.params[i].weights);
      fn("L" + std::to_string(i) + ".b", self.params[i].bias);
    }
  }
  template <typename Fn>
  void for_each_param(Fn&& fn) { visit(*this, fn); }
  template <typename Fn>
  void for_each_param(Fn&& fn) const { visit(*this, fn); }

  std::vector<std::size_t> conv_layer_indices() const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].kind == LayerKind::conv2d) idx.push_back(i);
    }
    return idx;
  }

  friend bool operator==(const Network&, const Network&) = default;
};

/// Builds a network with Glorot-uniform weights and zero biases.
inline Network make_network(LayerStack layers, Shape input_shape, Rng& rng) {
  const auto shapes = infer_shapes(layers, input_shape);
  Network net{std::move(layers), std::move(input_shape), {}};
  net.params.resize(net.layers.size());
  Shape in = net.input_shape;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerSpec& l = net.layers[i];
    if (l.kind == LayerKind::conv2d) {
      const std::size_t fan_in = in[0] * l.kernel * l.kernel, fan_out = l.out_channels * l.kernel * l.kernel;
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      Tensor w({l.out_channels, in[0], l.kernel, l.kernel});
      for (double& v : w.values()) v = uniform(rng, -limit, limit);
      net.params[i] = {std::move(w), Tensor({l.out_channels})};
    } else if (l.kind == LayerKind::dense) {
      const std::size_t fan_in = in[0], fan_out = l.units;
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      Tensor w({l.units, in[0]});
      for (double& v : w.values()) v = uniform(rng, -limit, limit);
      net.params[i] = {std::move(w), Tensor({l.units})};
    }
    in = shapes[i];
  }
  return net;
}

/// Same structure with every parameter zeroed; used as a gradient accumulator.
inline Network zeros_like(const Network& net) {
  Network z = net;
  z.for_each_param([](const std::string&, Tensor& t) { t.fill(0.0); });
  return z;
}

inline void add_into(Network& acc, const Network& other) {
  for (std::size_t i = 0; i < acc.params.size(); ++i) {
    if (!acc.layers[i].has_params()) continue;
    for (auto [a, b] : {std::pair{&acc.params[i].weights, &other.params[i].weights},
                        std::pair{&acc.params[i].bias, &other.params[i].bias}}) {
      require_same_shape(*a, *b, "add_into");
      for (std::size_t k = 0; k < a->size(); ++k) (*a)[k] += (*b)[k];
    }
  }
}

/// Graph handles of a network's parameters.
struct BoundNetwork {
  std::vector<std::pair<NodeId, NodeId>> params;  // (weights, bias) per layer; unused for parameterless layers
  std::vector<bool> trainable;
};

using LayerPredicate = std::function<bool(std::size_t layer)>;

inline bool all_layers(std::size_t) { return true; }
inline bool no_layers(std::size_t) { return false; }

/// Adds the network's parameters to the graph; layers for which `trainable` is
/// false enter as constants and receive no gradient.
inline BoundNetwork bind_network(Graph& g, const Network& net, const LayerPredicate& trainable = all_layers) {
  BoundNetwork b;
  b.params.resize(net.layers.size());
  b.trainable.assign(net.layers.size(), false);
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    if (!net.layers[i].has_params()) continue;
    const bool t = trainable(i);
    b.trainable[i] = t;
    if (t) {
      b.params[i] = {g.parameter(net.params[i].weights), g.parameter(net.params[i].bias)};
    } else {
      b.params[i] = {g.constant(net.params[i].weights), g.constant(net.params[i].bias)};
    }
  }
  return b;
}

inline NodeId forward(Graph& g, const Network& net, const BoundNetwork& bound, NodeId x) {
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerSpec& l = net.layers[i];
    try {
      switch (l.kind) {
        case LayerKind::conv2d:
          x = g.conv2d(x, bound.params[i].first, bound.params[i].second, l.stride, l.padding);
          break;
        case LayerKind::relu: x = g.relu(x); break;
        case LayerKind::maxpool2d: x = g.maxpool2d(x, l.kernel, l.stride); break;
        case LayerKind::dense: x = g.dense(x, bound.params[i].first, bound.params[i].second); break;
        case LayerKind::flatten: x = g.flatten(x); break;
        case LayerKind::softmax: x = g.softmax(x); break;
      }
    } catch (const ShapeError& e) {
      throw ShapeError("layer " + std::to_string(i) + " (" + std::string(to_string(l.kind)) + "): " + e.what());
    }
  }
  return x;
}

struct ForwardPass {
  Graph graph;
  BoundNetwork bound;
  NodeId input;
  NodeId output;
};

/// One-shot forward pass retaining the graph; the input node tracks gradients.
inline ForwardPass forward(const Network& net, const Tensor& input, const LayerPredicate& trainable = all_layers) {
  ForwardPass fp;
  fp.input = fp.graph.input(input);
  fp.bound = bind_network(fp.graph, net, trainable);
  fp.output = forward(fp.graph, net, fp.bound, fp.input);
  return fp;
}

/// Adds the bound trainable parameters' gradients into `grads`.
inline void accumulate_grads(const Graph& g, const BoundNetwork& bound, Network& grads) {
  for (std::size_t i = 0; i < grads.layers.size(); ++i) {
    if (!grads.layers[i].has_params() || !bound.trainable[i]) continue;
    if (!g.has_grad(bound.params[i].first)) continue;  // layer outside the differentiated graph
    const Tensor& gw = g.node(bound.params[i].first).grad;
    const Tensor& gb = g.node(bound.params[i].second).grad;
    Tensor& aw = grads.params[i].weights;
    Tensor& ab = grads.params[i].bias;
    for (std::size_t k = 0; k < aw.size(); ++k) aw[k] += gw[k];
    for (std::size_t k = 0; k < ab.size(); ++k) ab[k] += gb[k];
  }
}

/// SGD over the layers selected by `update`; the others stay bitwise unchanged.
inline void sgd_step(Network& params, const Network& grads, double lr, const LayerPredicate& update = all_layers) {
  if (params.layers.size() != grads.layers.size()) throw ShapeError("sgd_step: layer count mismatch");
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    if (!params.layers[i].has_params() || !update(i)) continue;
    sgd_step(params.params[i].weights, grads.params[i].weights, lr);
    sgd_step(params.params[i].bias, grads.params[i].bias, lr);
  }
}

}  // namespace nmil
