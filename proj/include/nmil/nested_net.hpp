#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "nmil/autograd.hpp"
#include "nmil/bag.hpp"
#include "nmil/checkpoint.hpp"
#include "nmil/dropout.hpp"
#include "nmil/layers.hpp"
#include "nmil/tensor.hpp"

namespace nmil {

enum class Aggregation { average, max };

inline const char* to_string(Aggregation a) { return a == Aggregation::average ? "average" : "max"; }

inline Aggregation parse_aggregation(const std::string& s) {
  if (s == "average" || s == "mean") return Aggregation::average;
  if (s == "max") return Aggregation::max;
  throw std::invalid_argument("unknown aggregation '" + s + "'");
}

inline LayerStack default_encoder() {
  return {LayerSpec::conv(16, 3, 1), LayerSpec::relu(), LayerSpec::maxpool(2),
          LayerSpec::conv(32, 3, 1), LayerSpec::relu(), LayerSpec::maxpool(2), LayerSpec::flatten()};
}

inline LayerStack default_head(std::size_t num_classes, std::size_t hidden = 64) {
  return {LayerSpec::dense(hidden), LayerSpec::relu(), LayerSpec::dense(num_classes)};
}

struct ModelSpec {
  std::size_t num_subbags = 3;
  std::size_t num_classes = 8;
  Shape instance_shape{3, 32, 32};
  LayerStack encoder = default_encoder();
  LayerStack head = default_head(8);
  Aggregation aggregation = Aggregation::average;
  bool shared_encoder = false;
};

inline void check_encoder_stack(const LayerStack& layers, const Shape& instance_shape) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerKind k = layers[i].kind;
    if (k == LayerKind::dense || k == LayerKind::softmax) {
      throw ShapeError("encoder layer " + std::to_string(i) + " is " + std::string(to_string(k)) +
                       "; encoders hold convolutional layers only");
    }
  }
  if (output_shape(layers, instance_shape).size() != 1) {
    throw ShapeError("encoder must end in a flat embedding (append flatten)");
  }
}

/// Per-sub-bag encoders plus the fully connected head.
struct ModelParams {
  std::vector<Network> encoders;  // s entries, or one when shared across sub-bags
  Network head;
  Aggregation aggregation = Aggregation::average;
  std::size_t num_subbags = 0;

  bool shared() const { return encoders.size() == 1 && num_subbags > 1; }
  const Network& encoder(std::size_t j) const { return encoders.at(shared() ? 0 : j); }
  Network& encoder(std::size_t j) { return encoders.at(shared() ? 0 : j); }
  std::size_t embedding_length() const { return encoders.at(0).output_shape().at(0); }
  std::size_t num_classes() const { return head.output_shape().at(0); }

  template <typename Fn>
  void for_each_param(Fn&& fn) {
    for (std::size_t j = 0; j < encoders.size(); ++j) {
      encoders[j].for_each_param([&](const std::string& p, Tensor& t) { fn("enc" + std::to_string(j) + "." + p, t); });
    }
    head.for_each_param([&](const std::string& p, Tensor& t) { fn("head." + p, t); });
  }
  template <typename Fn>
  void for_each_param(Fn&& fn) const {
    const_cast<ModelParams*>(this)->for_each_param(
        [&](const std::string& p, Tensor& t) { fn(p, static_cast<const Tensor&>(t)); });
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

inline ModelParams make_model(const ModelSpec& spec, Rng& rng) {
  check_encoder_stack(spec.encoder, spec.instance_shape);
  ModelParams m;
  m.aggregation = spec.aggregation;
  m.num_subbags = spec.num_subbags;
  const std::size_t n_enc = spec.shared_encoder ? 1 : spec.num_subbags;
  for (std::size_t j = 0; j < n_enc; ++j) m.encoders.push_back(make_network(spec.encoder, spec.instance_shape, rng));
  const std::size_t e = m.embedding_length();
  for (const Network& enc : m.encoders) {
    if (enc.output_shape().at(0) != e) throw ShapeError("encoder embedding lengths differ");
  }
  m.head = make_network(spec.head, {spec.num_subbags * e}, rng);
  if (m.head.output_shape() != Shape{spec.num_classes}) {
    throw ShapeError("head output " + to_string(m.head.output_shape()) + " does not match " +
                     std::to_string(spec.num_classes) + " classes");
  }
  return m;
}

inline ModelParams zeros_like(const ModelParams& m) {
  ModelParams z = m;
  z.for_each_param([](const std::string&, Tensor& t) { t.fill(0.0); });
  return z;
}

inline void add_into(ModelParams& acc, const ModelParams& other) {
  for (std::size_t j = 0; j < acc.encoders.size(); ++j) add_into(acc.encoders[j], other.encoders.at(j));
  add_into(acc.head, other.head);
}

inline Checkpoint to_checkpoint(const ModelParams& m) {
  Checkpoint ck;
  ck.meta["aggregation"] = to_string(m.aggregation);
  ck.meta["num_subbags"] = std::to_string(m.num_subbags);
  ck.meta["shared"] = m.shared() ? "1" : "0";
  m.for_each_param([&](const std::string& p, const Tensor& t) { ck.add(p, t); });
  return ck;
}

/// Loads parameter values into a model already built with the matching spec.
inline void load_checkpoint(ModelParams& m, const Checkpoint& ck) {
  m.for_each_param([&](const std::string& p, Tensor& t) {
    const Tensor& src = ck.get(p);
    require_same_shape(t, src, "checkpoint tensor '" + p + "'");
    t = src;
  });
}

/// A bag whose present sub-bags each hold exactly I_j instances.
struct MaterializedBag {
  std::size_t id = 0;
  std::size_t label = 0;
  std::vector<std::vector<Instance>> sub_bags;  // empty vector for an absent sub-bag
};

/// Which parameter groups receive gradients.
struct TrainableSet {
  LayerPredicate encoder_layers = all_layers;
  bool head = true;

  static TrainableSet everything() { return {}; }
  static TrainableSet head_only() { return {no_layers, true}; }
  static TrainableSet nothing() { return {no_layers, false}; }
  static TrainableSet encoder_layer(std::size_t layer) {
    return {[layer](std::size_t i) { return i == layer; }, false};
  }
};

inline std::vector<Tensor> encode_subbag(const Network& encoder, const std::vector<Instance>& instances,
                                         std::size_t expected_count) {
  if (instances.size() != expected_count) {
    throw ShapeError("encode_subbag: got " + std::to_string(instances.size()) + " instances, expected " +
                     std::to_string(expected_count));
  }
  std::vector<Tensor> out;
  out.reserve(instances.size());
  for (const Instance& inst : instances) {
    if (inst.image.shape() != encoder.input_shape) {
      throw ShapeError("encode_subbag: instance shape " + to_string(inst.image.shape()) + ", encoder expects " +
                       to_string(encoder.input_shape));
    }
    Graph g;
    const BoundNetwork b = bind_network(g, encoder, no_layers);
    out.push_back(g.value(forward(g, encoder, b, g.constant(inst.image))));
  }
  return out;
}

/// Elementwise mean or max; summation runs in list order.
inline Tensor aggregate(const std::vector<Tensor>& embeddings, Aggregation mode) {
  if (embeddings.empty()) throw ShapeError("aggregate: empty embedding list");
  Tensor out = embeddings[0];
  for (std::size_t k = 1; k < embeddings.size(); ++k) {
    const Tensor& e = embeddings[k];
    if (e.shape() != out.shape()) {
      throw ShapeError("aggregate: embedding " + std::to_string(k) + " has length " + std::to_string(e.size()) +
                       ", expected " + std::to_string(out.size()));
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = mode == Aggregation::max ? std::max(out[i], e[i]) : out[i] + e[i];
    }
  }
  if (mode == Aggregation::average) {
    const double n = static_cast<double>(embeddings.size());
    for (double& v : out.values()) v /= n;
  }
  return out;
}

/// KL(y || P) with P floored at 1e-12 and 0·log 0 = 0.
inline double kl_loss(const Tensor& y, const Tensor& p) {
  if (y.size() != p.size()) {
    throw ShapeError("kl_loss: target length " + std::to_string(y.size()) + " vs " + std::to_string(p.size()));
  }
  double total = 0.0;
  for (double v : y.values()) {
    if (v < 0.0 || !std::isfinite(v)) throw std::invalid_argument("kl_loss: target is not a distribution");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("kl_loss: target does not sum to 1");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] > 0.0) s += y[i] * (std::log(y[i]) - std::log(std::max(p[i], Graph::kProbabilityFloor)));
  }
  return s;
}

inline Tensor one_hot(std::size_t label, std::size_t classes) {
  if (label >= classes) throw std::out_of_range("label " + std::to_string(label) + " >= " + std::to_string(classes));
  Tensor t({classes});
  t[label] = 1.0;
  return t;
}

/// Node handles for one bag's forward pass.
struct BagGraph {
  std::vector<BoundNetwork> encoders;
  BoundNetwork head;
  std::vector<std::vector<NodeId>> embeddings;
  std::vector<NodeId> aggregates;
  NodeId concatenated, masked, logits, probs;
};

struct BagGraphOptions {
  // Encode materialized sub-bags even when the configuration drops them and
  // rely on the mask alone. The default skips them and inserts a zero block.
  bool encode_dropped = false;
};

inline BagGraph build_bag_graph(Graph& g, const ModelParams& m, const MaterializedBag& bag, const Configuration& config,
                                const TrainableSet& trainable = TrainableSet::nothing(),
                                const BagGraphOptions& opts = {}) {
  const std::size_t s = m.num_subbags;
  if (config.size() != s || bag.sub_bags.size() != s) {
    throw ShapeError("forward_bag: expected " + std::to_string(s) + " sub-bags");
  }
  if (config.is_empty()) throw BagError("forward_bag: all-zero configuration");
  BagGraph bg;
  for (const Network& enc : m.encoders) bg.encoders.push_back(bind_network(g, enc, trainable.encoder_layers));
  const std::size_t e = m.embedding_length();
  bg.embeddings.resize(s);
  for (std::size_t j = 0; j < s; ++j) {
    const auto& insts = bag.sub_bags[j];
    const bool present = config[j];
    if (present && insts.empty()) {
      throw BagError("forward_bag: bag " + std::to_string(bag.id) + " sub-bag " + std::to_string(j) +
                     " is present but not materialized");
    }
    if (!present && (insts.empty() || !opts.encode_dropped)) {
      bg.aggregates.push_back(g.constant(Tensor({e})));
      continue;
    }
    const Network& enc = m.encoder(j);
    const BoundNetwork& bound = bg.encoders[m.shared() ? 0 : j];
    for (const Instance& inst : insts) {
      if (inst.image.shape() != enc.input_shape) {
        throw ShapeError("forward_bag: instance shape " + to_string(inst.image.shape()) + ", expected " +
                         to_string(enc.input_shape));
      }
      bg.embeddings[j].push_back(forward(g, enc, bound, g.constant(inst.image)));
    }
    bg.aggregates.push_back(m.aggregation == Aggregation::max ? g.max(bg.embeddings[j]) : g.mean(bg.embeddings[j]));
  }
  bg.concatenated = g.concat(bg.aggregates);
  bg.masked = apply_mask(g, bg.concatenated, build_mask(config, std::vector<std::size_t>(s, e)));
  bg.head = bind_network(g, m.head, trainable.head ? all_layers : LayerPredicate(no_layers));
  bg.logits = forward(g, m.head, bg.head, bg.masked);
  bg.probs = g.softmax(bg.logits);
  return bg;
}

struct BagForwardTrace {
  std::vector<std::vector<Tensor>> embeddings;
  std::vector<Tensor> aggregates;
  Tensor concatenated;
  Tensor masked;
  Tensor logits;
  Tensor probs;
};

inline BagForwardTrace forward_bag(const ModelParams& m, const MaterializedBag& bag, const Configuration& config,
                                   const BagGraphOptions& opts = {}) {
  Graph g;
  const BagGraph bg = build_bag_graph(g, m, bag, config, TrainableSet::nothing(), opts);
  BagForwardTrace t;
  for (const auto& sub : bg.embeddings) {
    auto& dst = t.embeddings.emplace_back();
    for (NodeId n : sub) dst.push_back(g.value(n));
  }
  for (NodeId n : bg.aggregates) t.aggregates.push_back(g.value(n));
  t.concatenated = g.value(bg.concatenated);
  t.masked = g.value(bg.masked);
  t.logits = g.value(bg.logits);
  t.probs = g.value(bg.probs);
  return t;
}

/// Forward + backward for one bag; adds trainable-parameter gradients into `grads`
/// and returns the bag's KL loss.
inline double accumulate_bag_gradient(const ModelParams& m, const MaterializedBag& bag, const Configuration& config,
                                      const TrainableSet& trainable, ModelParams& grads,
                                      Tensor* probs_out = nullptr) {
  Graph g;
  const BagGraph bg = build_bag_graph(g, m, bag, config, trainable);
  const NodeId loss = g.kl_divergence(bg.probs, one_hot(bag.label, m.num_classes()));
  g.backward(loss);
  for (std::size_t j = 0; j < m.encoders.size(); ++j) accumulate_grads(g, bg.encoders[j], grads.encoders[j]);
  accumulate_grads(g, bg.head, grads.head);
  if (probs_out) *probs_out = g.value(bg.probs);
  return g.value(loss)[0];
}

/// Summed (not averaged) KL loss over a batch.
inline double batch_loss(const ModelParams& m, const std::vector<MaterializedBag>& bags,
                         const std::vector<Configuration>& configs) {
  if (bags.size() != configs.size()) throw ShapeError("batch_loss: one configuration per bag required");
  double total = 0.0;
  for (std::size_t i = 0; i < bags.size(); ++i) {
    const BagForwardTrace t = forward_bag(m, bags[i], configs[i]);
    total += kl_loss(one_hot(bags[i].label, m.num_classes()), t.probs);
  }
  return total;
}

}  // namespace nmil
