#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "nmil/autograd.hpp"
#include "nmil/bag.hpp"
#include "nmil/fill_in.hpp"
#include "nmil/layers.hpp"
#include "nmil/nested_net.hpp"
#include "nmil/tensor.hpp"

namespace nmil {

class PlanError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Plans

enum class StepKind { phase1, fc1, cl, fc2 };

inline const char* to_string(StepKind k) {
  switch (k) {
    case StepKind::phase1: return "phase1";
    case StepKind::fc1: return "fc1";
    case StepKind::cl: return "cl";
    case StepKind::fc2: return "fc2";
  }
  return "?";
}

inline StepKind parse_step_kind(const std::string& s) {
  for (StepKind k : {StepKind::phase1, StepKind::fc1, StepKind::cl, StepKind::fc2}) {
    if (s == to_string(k)) return k;
  }
  throw PlanError("unknown training step '" + s + "'");
}

struct StepPlan {
  StepKind kind = StepKind::phase1;
  std::size_t epochs = 1;  // for CL: epochs per unlocked conv layer
  double base_lr = 0.01;
  double decay_rate = 0.95;  // per epoch
  friend bool operator==(const StepPlan&, const StepPlan&) = default;
};

struct TrainPlan {
  std::vector<StepPlan> steps;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  friend bool operator==(const TrainPlan&, const TrainPlan&) = default;
};

inline TrainPlan default_plan(std::uint64_t seed = 0) {
  return {{{StepKind::phase1, 15, 0.01, 0.95},
           {StepKind::fc1, 10, 0.003, 0.95},
           {StepKind::cl, 5, 0.001, 0.95},
           {StepKind::fc2, 10, 0.003, 0.95}},
          16,
          seed,
          1};
}

/// Phase 1 may only lead; Phase 2 steps, when present, must be exactly FC1, CL, FC2 in that order.
inline void validate(const TrainPlan& plan) {
  if (plan.batch_size == 0) throw PlanError("batch size must be positive");
  std::vector<StepKind> phase2;
  for (std::size_t i = 0; i < plan.steps.size(); ++i) {
    const StepPlan& s = plan.steps[i];
    if (!(s.base_lr >= 0.0) || !(s.decay_rate > 0.0 && s.decay_rate <= 1.0)) {
      throw PlanError("step " + std::to_string(i) + ": bad learning-rate schedule");
    }
    if (s.kind == StepKind::phase1) {
      if (i != 0) throw PlanError("phase1 must be the first step");
    } else {
      phase2.push_back(s.kind);
    }
  }
  if (!phase2.empty() && phase2 != std::vector<StepKind>{StepKind::fc1, StepKind::cl, StepKind::fc2}) {
    throw PlanError("phase 2 must consist of fc1, cl, fc2 in this order");
  }
}

/// A concrete training step: CL expands to one sub-step per conv layer, top to bottom.
struct ExpandedStep {
  std::string id;  // "phase1", "fc1", "cl.L3", "fc2"
  StepKind kind;
  TrainableSet trainable;
  std::size_t epochs;
  double base_lr, decay_rate;
  bool full_configuration_only;
};

inline std::vector<ExpandedStep> expand(const TrainPlan& plan, const ModelParams& m) {
  validate(plan);
  std::vector<ExpandedStep> out;
  for (const StepPlan& s : plan.steps) {
    switch (s.kind) {
      case StepKind::phase1:
        out.push_back({"phase1", s.kind, TrainableSet::everything(), s.epochs, s.base_lr, s.decay_rate, true});
        break;
      case StepKind::fc1:
      case StepKind::fc2:
        out.push_back({to_string(s.kind), s.kind, TrainableSet::head_only(), s.epochs, s.base_lr, s.decay_rate, false});
        break;
      case StepKind::cl: {
        auto convs = m.encoders.at(0).conv_layer_indices();
        std::reverse(convs.begin(), convs.end());
        for (std::size_t layer : convs) {
          out.push_back({"cl.L" + std::to_string(layer), s.kind, TrainableSet::encoder_layer(layer), s.epochs,
                         s.base_lr, s.decay_rate, false});
        }
        break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Minibatches

struct Minibatch {
  Configuration config;
  std::vector<std::size_t> bag_ids;
};

/// Configuration-homogeneous minibatches; classes by decreasing l1 norm, ties in
/// random class order, bags shuffled within each class.
inline std::vector<Minibatch> order_minibatches(const DatasetPartition& partition, std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw PlanError("order_minibatches: batch size must be positive");
  std::map<std::size_t, std::vector<Configuration>, std::greater<>> by_norm;
  for (const auto& [cfg, ids] : partition.classes) {
    if (!ids.empty()) by_norm[cfg.l1()].push_back(cfg);
  }
  std::vector<Minibatch> out;
  for (auto& [norm, cfgs] : by_norm) {
    shuffle(cfgs, rng);
    for (const Configuration& cfg : cfgs) {
      std::vector<std::size_t> ids = partition.classes.at(cfg);
      shuffle(ids, rng);
      for (std::size_t start = 0; start < ids.size(); start += batch_size) {
        const std::size_t end = std::min(ids.size(), start + batch_size);
        out.push_back({cfg, std::vector<std::size_t>(ids.begin() + static_cast<std::ptrdiff_t>(start),
                                                     ids.begin() + static_cast<std::ptrdiff_t>(end))});
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricsRecord {
  std::string stage;
  std::size_t epoch = 0;
  double train_loss = std::numeric_limits<double>::quiet_NaN();
  double full_accuracy = std::numeric_limits<double>::quiet_NaN();
  double all_accuracy = std::numeric_limits<double>::quiet_NaN();
  double full_loss = std::numeric_limits<double>::quiet_NaN();
  double all_loss = std::numeric_limits<double>::quiet_NaN();
  std::map<std::string, double> config_accuracy;
};

struct EvalResult {
  std::size_t count = 0, correct = 0;
  double loss = 0.0;  // mean KL per bag
  struct Tally {
    std::size_t correct = 0, count = 0;
    double loss = 0.0;  // summed
  };
  std::map<Configuration, Tally> per_config;
  std::vector<std::size_t> predictions;

  double accuracy() const {
    if (count == 0) throw std::invalid_argument("accuracy of an empty subset");
    return static_cast<double>(correct) / static_cast<double>(count);
  }
};

// ---------------------------------------------------------------------------
// Neutral-instance cache: entries are recomputed when their tag goes stale,
// warm-started from the previous solution.

class NeutralCache {
 public:
  struct Stats {
    std::size_t solves = 0, iterations = 0, unconverged = 0;
    double worst_residual = 0.0;
  };

  void clear() { entries_.clear(); }

  Instance get(std::size_t bag_id, std::size_t subbag, std::uint64_t tag, const Network& encoder,
               const std::vector<Instance>& existing, const InversionOptions& opts) {
    auto it = entries_.find({bag_id, subbag});
    if (it != entries_.end() && it->second.tag == tag) return it->second.neutral;
    const Tensor mu = aggregate(encode_subbag(encoder, existing, existing.size()), Aggregation::average);
    const Tensor init = it != entries_.end() ? it->second.neutral.image : mid_gray(encoder.input_shape);
    InversionResult r = neutral_instance(encoder, mu, init, opts);
    stats_.solves++;
    stats_.iterations += r.trace.size() - 1;
    if (!r.converged) stats_.unconverged++;
    stats_.worst_residual = std::max(stats_.worst_residual, r.relative_residual);
    entries_[{bag_id, subbag}] = {tag, r.neutral};
    return r.neutral;
  }

  const Stats& stats() const { return stats_; }

 private:
  struct Entry {
    std::uint64_t tag;
    Instance neutral;
  };
  std::map<std::pair<std::size_t, std::size_t>, Entry> entries_;
  Stats stats_;
};

struct DataOptions {
  std::vector<std::size_t> instances_per_subbag{2, 2, 2};
  FillPolicy fill;
  Shape instance_shape{3, 32, 32};
  std::size_t eval_samples = 5;  // random draws for oversampled sub-bags at test time
};

namespace detail {

template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t w = std::min(workers, n);
  for (std::size_t t = 0; t < w; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += w) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace detail

/// Runs the phased schedule for one nested model.
class Trainer {
 public:
  using StepCallback = std::function<void(std::size_t step_index, const ExpandedStep&, const ModelParams&)>;

  Trainer(ModelParams params, std::vector<Bag> train, std::vector<Bag> test, DataOptions data)
      : params_(std::move(params)), train_(std::move(train)), test_(std::move(test)), data_(std::move(data)) {
    if (data_.instances_per_subbag.size() != params_.num_subbags) {
      throw PlanError("instances_per_subbag needs one entry per sub-bag");
    }
    for (const Bag& b : train_) validate(b);
    for (const Bag& b : test_) validate(b);
  }

  const ModelParams& params() const { return params_; }
  ModelParams& params() { return params_; }
  const std::vector<Bag>& train_bags() const { return train_; }
  const std::vector<Bag>& test_bags() const { return test_; }
  const NeutralCache::Stats& inversion_stats() const { return neutral_.stats(); }

  /// Instances for every present sub-bag of `bag`.
  MaterializedBag materialize(const Bag& bag, Rng& rng, std::uint64_t tag) {
    MaterializedBag mb{bag.id, bag.label, std::vector<std::vector<Instance>>(bag.sub_bags.size())};
    for (std::size_t j = 0; j < bag.sub_bags.size(); ++j) {
      const SubBag& sb = bag.sub_bags[j];
      if (sb.empty()) continue;
      const Network& enc = params_.encoder(j);
      NeutralProvider provider = [&, j](const std::vector<Instance>& existing) {
        return neutral_.get(bag.id, j, tag, enc, existing, data_.fill.inversion);
      };
      mb.sub_bags[j] = materialize_subbag(sb.images, data_.instances_per_subbag[j], data_.fill, params_.aggregation,
                                          rng, data_.instance_shape, &provider);
    }
    return mb;
  }

  /// Runs expanded steps [first, end). Returns one record per epoch plus an end-of-step evaluation.
  std::vector<MetricsRecord> run(const TrainPlan& plan, std::size_t first = 0, const StepCallback& on_step = {}) {
    const auto steps = expand(plan, params_);
    std::vector<MetricsRecord> records;
    for (std::size_t i = first; i < steps.size(); ++i) {
      auto r = run_step(steps[i], plan);
      records.insert(records.end(), r.begin(), r.end());
      if (on_step) on_step(i, steps[i], params_);
    }
    return records;
  }

  std::vector<MetricsRecord> run_step(const ExpandedStep& step, const TrainPlan& plan) {
    neutral_.clear();  // cold start per step keeps resumed runs identical
    std::vector<Bag> pool;
    for (const Bag& b : train_) {
      if (!step.full_configuration_only || configuration_of(b).is_full()) pool.push_back(b);
    }
    if (pool.empty()) throw PlanError(step.id + ": no training bags (phase 1 needs full-configuration bags)");
    const DatasetPartition partition = partition_dataset(pool);
    const auto idx = index_by_id(pool);
    const bool encoders_train = step.kind == StepKind::phase1 || step.kind == StepKind::cl;

    std::vector<MetricsRecord> records;
    std::size_t batch_counter = 0;
    std::size_t batches_per_epoch = 0;
    {
      Rng probe(0);
      batches_per_epoch = order_minibatches(partition, plan.batch_size, probe).size();
    }
    for (std::size_t epoch = 0; epoch < step.epochs; ++epoch) {
      Rng order_rng(derive_seed(plan.seed, "batches/" + step.id, epoch));
      const auto batches = order_minibatches(partition, plan.batch_size, order_rng);
      const std::uint64_t tag = encoders_train ? epoch : 0;
      double epoch_loss = 0.0;
      std::size_t seen = 0;
      for (const Minibatch& mb : batches) {
        const double lr = step.base_lr > 0.0
                              ? lr_at(batch_counter, step.base_lr, step.decay_rate, std::max<std::size_t>(1, batches_per_epoch))
                              : 0.0;
        ++batch_counter;
        std::vector<MaterializedBag> mats;
        for (std::size_t id : mb.bag_ids) {
          Rng rng(derive_seed(plan.seed, "fill/" + step.id + "/" + std::to_string(epoch), id));
          mats.push_back(materialize(pool[idx.at(id)], rng, tag));
        }
        std::vector<ModelParams> grads(mats.size());
        std::vector<double> losses(mats.size());
        detail::parallel_for(mats.size(), plan.workers, [&](std::size_t k) {
          grads[k] = zeros_like(params_);
          losses[k] = accumulate_bag_gradient(params_, mats[k], mb.config, step.trainable, grads[k]);
        });
        ModelParams total = std::move(grads[0]);
        for (std::size_t k = 1; k < grads.size(); ++k) add_into(total, grads[k]);
        for (double l : losses) epoch_loss += l;
        seen += mats.size();
        apply_update(total, step.trainable, lr);
      }
      MetricsRecord rec;
      rec.stage = step.id;
      rec.epoch = epoch;
      rec.train_loss = seen ? epoch_loss / static_cast<double>(seen) : 0.0;
      records.push_back(rec);
    }
    MetricsRecord end = evaluate_test(step.id, step.epochs);
    end.train_loss = records.empty() ? std::numeric_limits<double>::quiet_NaN() : records.back().train_loss;
    records.push_back(end);
    return records;
  }

  /// Accuracy over `bags`, each under its own configuration unless `override_config` is given.
  EvalResult evaluate(const std::vector<Bag>& bags, const std::optional<Configuration>& override_config = std::nullopt,
                      std::uint64_t seed = 0) {
    EvalResult res;
    for (const Bag& bag : bags) {
      const Configuration cfg = override_config ? *override_config : configuration_of(bag);
      if (cfg.is_empty()) throw BagError("evaluate: all-zero configuration");
      bool oversampled = false;
      for (std::size_t j = 0; j < bag.sub_bags.size(); ++j) {
        oversampled = oversampled || bag.sub_bags[j].images.size() > data_.instances_per_subbag[j];
      }
      const std::size_t samples = oversampled ? std::max<std::size_t>(1, data_.eval_samples) : 1;
      Tensor best;
      double best_norm = -1.0;
      for (std::size_t k = 0; k < samples; ++k) {
        Rng rng(derive_seed(seed, "eval/" + std::to_string(k), bag.id));
        const MaterializedBag mb = materialize(bag, rng, eval_tag_);
        Tensor p = forward_bag(params_, mb, cfg).probs;
        const double norm = max_abs(p.values());
        if (norm > best_norm) {
          best_norm = norm;
          best = std::move(p);
        }
      }
      const auto pred = static_cast<std::size_t>(
          std::distance(best.values().begin(), std::max_element(best.values().begin(), best.values().end())));
      res.predictions.push_back(pred);
      const double loss = kl_loss(one_hot(bag.label, params_.num_classes()), best);
      const bool ok = pred == bag.label;
      res.loss += loss;
      res.count++;
      res.correct += ok;
      auto& pc = res.per_config[configuration_of(bag)];
      pc.correct += ok;
      pc.count++;
      pc.loss += loss;
    }
    if (res.count) res.loss /= static_cast<double>(res.count);
    return res;
  }

  MetricsRecord evaluate_test(const std::string& stage, std::size_t epoch) {
    // encoder weights may have moved since the last evaluation
    ++eval_tag_;
    MetricsRecord rec;
    rec.stage = stage;
    rec.epoch = epoch;
    if (!test_.empty()) {
      const EvalResult all = evaluate(test_);
      rec.all_accuracy = all.accuracy();
      rec.all_loss = all.loss;
      for (const auto& [cfg, pc] : all.per_config) {
        rec.config_accuracy[cfg.to_string()] = static_cast<double>(pc.correct) / static_cast<double>(pc.count);
      }
      const auto it = all.per_config.find(Configuration::full(params_.num_subbags));
      if (it != all.per_config.end()) {
        rec.full_accuracy = static_cast<double>(it->second.correct) / static_cast<double>(it->second.count);
        rec.full_loss = it->second.loss / static_cast<double>(it->second.count);
      }
    }
    return rec;
  }

 private:
  void apply_update(const ModelParams& grads, const TrainableSet& trainable, double lr) {
    for (std::size_t j = 0; j < params_.encoders.size(); ++j) {
      sgd_step(params_.encoders[j], grads.encoders[j], lr, trainable.encoder_layers);
    }
    if (trainable.head) sgd_step(params_.head, grads.head, lr);
  }

  ModelParams params_;
  std::vector<Bag> train_;
  std::vector<Bag> test_;
  DataOptions data_;
  NeutralCache neutral_;
  std::uint64_t eval_tag_ = 1000000;
};

// ---------------------------------------------------------------------------
// Pretraining of single-instance networks

struct PretrainOptions {
  std::size_t epochs = 5;
  double base_lr = 0.01;
  double decay_rate = 0.95;
  std::size_t batch_size = 16;
  std::size_t head_hidden = 64;
};

/// A single-instance classifier: encoder layers followed by a dense head.
inline LayerStack single_instance_stack(const LayerStack& encoder, std::size_t num_classes, std::size_t hidden) {
  LayerStack s = encoder;
  for (const LayerSpec& l : default_head(num_classes, hidden)) s.push_back(l);
  return s;
}

/// Leading `count` layers (the convolutional part) of a pretrained network.
inline Network leading_layers(const Network& net, std::size_t count) {
  if (count > net.layers.size()) throw ShapeError("leading_layers: network too short");
  Network out{LayerStack(net.layers.begin(), net.layers.begin() + static_cast<std::ptrdiff_t>(count)),
              net.input_shape, std::vector<LayerWeights>(net.params.begin(), net.params.begin() + static_cast<std::ptrdiff_t>(count))};
  return out;
}

inline Tensor predict_instance(const Network& net, const Tensor& image) {
  Graph g;
  const BoundNetwork b = bind_network(g, net, no_layers);
  return g.value(g.softmax(forward(g, net, b, g.constant(image))));
}

struct LabeledImage {
  const SourceImage* image;
  std::size_t label;
};

/// Trains one single-instance network on (image, bag label) pairs.
inline Network train_single_instance(Network net, const std::vector<LabeledImage>& data, const PretrainOptions& opts,
                                     const Shape& instance_shape, std::uint64_t seed,
                                     std::vector<double>* epoch_losses = nullptr) {
  if (data.empty()) throw PlanError("pretraining: no images for this network");
  const std::size_t classes = net.output_shape().at(0);
  const std::size_t batches_per_epoch = (data.size() + opts.batch_size - 1) / opts.batch_size;
  std::size_t counter = 0;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    Rng rng(derive_seed(seed, "pretrain", epoch));
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle(order, rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      Network grads = zeros_like(net);
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      for (std::size_t k = start; k < end; ++k) {
        const LabeledImage& li = data[order[k]];
        const Instance inst = crop_instance(*li.image, CropKind::random, instance_shape, &rng);
        Graph g;
        const BoundNetwork b = bind_network(g, net);
        const NodeId p = g.softmax(forward(g, net, b, g.constant(inst.image)));
        const NodeId loss = g.kl_divergence(p, one_hot(li.label, classes));
        g.backward(loss);
        accumulate_grads(g, b, grads);
        total += g.value(loss)[0];
      }
      const double lr = opts.base_lr > 0 ? lr_at(counter++, opts.base_lr, opts.decay_rate, batches_per_epoch) : 0.0;
      sgd_step(net, grads, lr);
    }
    if (epoch_losses) epoch_losses->push_back(total / static_cast<double>(data.size()));
  }
  return net;
}

struct PretrainResult {
  std::vector<Network> subbag_nets;  // one full single-instance net per sub-bag
  std::optional<Network> shared_net; // trained on the union of all sub-bags' images
};

/// One single-instance network per sub-bag, trained on that sub-bag's images with bag labels.
inline PretrainResult pretrain_subbag_nets(const std::vector<Bag>& train, std::size_t num_subbags,
                                           std::size_t num_classes, const LayerStack& encoder,
                                           const Shape& instance_shape, const PretrainOptions& opts,
                                           std::uint64_t seed, bool with_shared = false) {
  PretrainResult res;
  const LayerStack stack = single_instance_stack(encoder, num_classes, opts.head_hidden);
  std::vector<LabeledImage> all;
  for (std::size_t j = 0; j < num_subbags; ++j) {
    std::vector<LabeledImage> data;
    for (const Bag& b : train) {
      if (j >= b.sub_bags.size()) throw BagError("pretraining: bag " + std::to_string(b.id) + " lacks sub-bag " + std::to_string(j));
      for (const SourceImage& img : b.sub_bags[j].images) data.push_back({&img, b.label});
    }
    if (data.empty()) throw PlanError("pretraining: sub-bag " + std::to_string(j) + " has no images in the training set");
    Rng init(derive_seed(seed, "pretrain-init", j));
    Network net = make_network(stack, instance_shape, init);
    res.subbag_nets.push_back(train_single_instance(std::move(net), data, opts, instance_shape,
                                                    derive_seed(seed, "pretrain-data", j)));
    all.insert(all.end(), data.begin(), data.end());
  }
  if (with_shared) {
    Rng init(derive_seed(seed, "pretrain-init-shared"));
    Network net = make_network(stack, instance_shape, init);
    res.shared_net = train_single_instance(std::move(net), all, opts, instance_shape, derive_seed(seed, "pretrain-data-shared"));
  }
  return res;
}

/// Nested model whose encoders are the convolutional parts of pretrained nets; head freshly initialised.
inline ModelParams model_from_pretrained(const ModelSpec& spec, const std::vector<Network>& pretrained, Rng& rng) {
  ModelParams m = make_model(spec, rng);
  const std::size_t n = spec.encoder.size();
  if (pretrained.size() != m.encoders.size()) {
    throw ShapeError("model_from_pretrained: " + std::to_string(pretrained.size()) + " pretrained nets for " +
                     std::to_string(m.encoders.size()) + " encoders");
  }
  for (std::size_t j = 0; j < m.encoders.size(); ++j) {
    Network enc = leading_layers(pretrained[j], n);
    if (enc.layers != m.encoders[j].layers) throw ShapeError("pretrained encoder layers differ from the model spec");
    m.encoders[j] = std::move(enc);
  }
  return m;
}

/// Single-image accuracy of a pretrained net on sub-bag j's images (center crops).
inline double single_instance_accuracy(const Network& net, const std::vector<Bag>& bags, std::size_t j,
                                       const Shape& instance_shape) {
  std::size_t n = 0, ok = 0;
  for (const Bag& b : bags) {
    for (const SourceImage& img : b.sub_bags.at(j).images) {
      const Tensor p = predict_instance(net, crop_instance(img, CropKind::center, instance_shape).image);
      const auto pred = static_cast<std::size_t>(
          std::distance(p.values().begin(), std::max_element(p.values().begin(), p.values().end())));
      ok += pred == b.label;
      ++n;
    }
  }
  if (n == 0) throw std::invalid_argument("single_instance_accuracy: no images");
  return static_cast<double>(ok) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Analyses and baselines

struct AblationRow {
  std::size_t subbag;
  double full_accuracy;     // in [0,1]
  double dropped_accuracy;  // with only this sub-bag zeroed
  double drop_points;       // 100 * (full - dropped); positive means the sub-bag helps
};

/// Accuracy change from dropping each sub-bag individually on full-configuration bags.
inline std::vector<AblationRow> subbag_ablation(Trainer& trainer, const std::vector<Bag>& full_bags, std::uint64_t seed = 0) {
  for (const Bag& b : full_bags) {
    if (!configuration_of(b).is_full()) throw BagError("subbag_ablation: bag " + std::to_string(b.id) + " is not full");
  }
  const std::size_t s = trainer.params().num_subbags;
  if (s < 2) throw BagError("subbag_ablation: dropping the only sub-bag leaves an all-zero configuration");
  const double full = trainer.evaluate(full_bags, Configuration::full(s), seed).accuracy();
  std::vector<AblationRow> rows;
  for (std::size_t j = 0; j < s; ++j) {
    std::vector<std::uint8_t> bits(s, 1);
    bits[j] = 0;
    const double acc = trainer.evaluate(full_bags, Configuration(bits), seed).accuracy();
    rows.push_back({j, full, acc, 100.0 * (full - acc)});
  }
  return rows;
}

/// "Individual nets" baseline: mean class-probability vector of the pretrained
/// per-sub-bag nets over all present instances (center crops).
inline Tensor individual_nets_probs(const std::vector<Network>& nets, const Bag& bag, const Shape& instance_shape) {
  validate(bag);
  Tensor sum;
  std::size_t n = 0;
  for (std::size_t j = 0; j < bag.sub_bags.size(); ++j) {
    for (const SourceImage& img : bag.sub_bags[j].images) {
      Tensor p = predict_instance(nets.at(j), crop_instance(img, CropKind::center, instance_shape).image);
      if (sum.empty()) {
        sum = std::move(p);
      } else {
        for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += p[k];
      }
      ++n;
    }
  }
  for (double& v : sum.values()) v /= static_cast<double>(n);
  return sum;
}

inline double individual_nets_accuracy(const std::vector<Network>& nets, const std::vector<Bag>& bags,
                                       const Shape& instance_shape) {
  if (bags.empty()) throw std::invalid_argument("individual_nets_accuracy: no bags");
  std::size_t ok = 0;
  for (const Bag& b : bags) {
    const Tensor p = individual_nets_probs(nets, b, instance_shape);
    const auto pred = static_cast<std::size_t>(
        std::distance(p.values().begin(), std::max_element(p.values().begin(), p.values().end())));
    ok += pred == b.label;
  }
  return static_cast<double>(ok) / static_cast<double>(bags.size());
}

}  // namespace nmil
