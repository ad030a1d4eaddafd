#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nmil/bag.hpp"
#include "nmil/config.hpp"
#include "nmil/fill_in.hpp"
#include "nmil/nested_net.hpp"
#include "nmil/synth.hpp"
#include "nmil/training.hpp"

namespace nmil {

/// Named sub-seeds expanded from the experiment's top-level seed.
struct RunSeeds {
  std::uint64_t data, split, pretrain, drop, init, batching, eval;
};

inline RunSeeds run_seeds(std::uint64_t seed) {
  return {derive_seed(seed, "data"),   derive_seed(seed, "split"),    derive_seed(seed, "pretrain"),
          derive_seed(seed, "drop"),   derive_seed(seed, "init"),     derive_seed(seed, "batching"),
          derive_seed(seed, "eval")};
}

inline std::vector<Bag> generate_bags(const ExperimentConfig& cfg) {
  synth::DatasetOptions opts;
  opts.num_bags = cfg.dataset.num_bags;
  opts.num_classes = cfg.dataset.num_classes;
  opts.render.size = cfg.dataset.image_size;
  opts.render.noise = cfg.dataset.noise;
  return synth::generate_dataset(opts, run_seeds(cfg.seed).data);
}

inline TestSplit make_split(const ExperimentConfig& cfg, const std::vector<Bag>& bags) {
  return split_test(bags, cfg.dataset.test_fraction, run_seeds(cfg.seed).split);
}

/// Per-sub-bag single-instance nets (and the shared one) trained on the undropped training split.
inline PretrainResult run_pretraining(const ExperimentConfig& cfg, const std::vector<Bag>& full_bags,
                                      const TestSplit& split, bool with_shared = true) {
  return pretrain_subbag_nets(select_bags(full_bags, split.train), 3, cfg.dataset.num_classes, cfg.model.encoder,
                              cfg.instance_shape(), cfg.pretrain, run_seeds(cfg.seed).pretrain, with_shared);
}

/// Correct-class probability of an instance under its sub-bag's pretrained net (center crop).
inline synth::RelevanceFn relevance_from(const std::vector<Network>& nets, const Shape& instance_shape) {
  return [&nets, instance_shape](const Bag& bag, std::size_t j, std::size_t k) {
    const Tensor p = predict_instance(nets.at(j), crop_instance(bag.sub_bags.at(j).images.at(k), CropKind::center,
                                                                instance_shape).image);
    return p[bag.label];
  };
}

inline synth::DropResult apply_dropping(const ExperimentConfig& cfg, const std::vector<Bag>& full_bags,
                                        const std::vector<Network>* pretrained) {
  synth::RelevanceFn rel;
  if (pretrained) rel = relevance_from(*pretrained, cfg.instance_shape());
  return synth::drop_instances(full_bags, cfg.dataset.drop, rel, run_seeds(cfg.seed).drop);
}

inline TrainPlan seeded_plan(const ExperimentConfig& cfg) {
  TrainPlan p = cfg.plan;
  p.seed = run_seeds(cfg.seed).batching;
  if (cfg.deterministic) p.workers = 1;
  return p;
}

/// Nested model seeded from pretraining: s encoders, or one shared encoder taken from the shared net.
inline ModelParams initial_model(const ExperimentConfig& cfg, const PretrainResult& pre, bool shared) {
  Rng rng(derive_seed(run_seeds(cfg.seed).init, shared ? "shared" : "nested"));
  if (shared) {
    if (!pre.shared_net) throw PlanError("shared-encoder model needs the shared pretrained net");
    return model_from_pretrained(cfg.model_spec(true), {*pre.shared_net}, rng);
  }
  return model_from_pretrained(cfg.model_spec(false), pre.subbag_nets, rng);
}

inline Trainer make_trainer(const ExperimentConfig& cfg, ModelParams params, const std::vector<Bag>& bags,
                            const TestSplit& split) {
  return Trainer(std::move(params), select_bags(bags, split.train), select_bags(bags, split.test), cfg.data_options());
}

/// Last evaluation record of the named stage.
inline std::optional<MetricsRecord> stage_result(const std::vector<MetricsRecord>& records, const std::string& stage) {
  std::optional<MetricsRecord> out;
  for (const MetricsRecord& r : records) {
    if (r.stage == stage && !std::isnan(r.all_accuracy)) out = r;
  }
  return out;
}

inline std::vector<Bag> full_configuration_bags(const std::vector<Bag>& bags) {
  std::vector<Bag> out;
  for (const Bag& b : bags) {
    if (configuration_of(b).is_full()) out.push_back(b);
  }
  return out;
}

}  // namespace nmil
