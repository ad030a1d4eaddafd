#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "nmil/bag.hpp"
#include "nmil/fill_in.hpp"
#include "nmil/layers.hpp"
#include "nmil/nested_net.hpp"
#include "nmil/synth.hpp"
#include "nmil/training.hpp"

namespace nmil {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr int kConfigSchemaVersion = 1;

struct DatasetConfig {
  std::size_t num_bags = 4000;
  std::size_t num_classes = 8;
  std::size_t image_size = 38;
  double noise = 0.02;
  double test_fraction = 0.1;
  synth::DropMethod drop = synth::DropMethod::random;
  double min_class_fraction = 0.0;  // ingestion filter; generated data is balanced
  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct ModelConfig {
  std::size_t instance_size = 32;
  LayerStack encoder = default_encoder();
  std::size_t head_hidden = 64;
  Aggregation aggregation = Aggregation::average;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct FillConfig {
  FillStrategy strategy = FillStrategy::reproduction;
  CropKind crop = CropKind::center;
  std::size_t instances_per_subbag = 2;
  bool replicate_before_neutral = true;
  InversionOptions inversion;
  std::size_t eval_samples = 5;
  std::vector<std::size_t> sweep;  // instances-per-sub-bag values for the sweep mode
};

inline bool operator==(const InversionOptions& a, const InversionOptions& b) {
  return a.method == b.method && a.max_iters == b.max_iters && a.lr == b.lr && a.lr_growth == b.lr_growth && a.beta1 == b.beta1 && a.beta2 == b.beta2 &&
         a.tolerance == b.tolerance && a.plateau_window == b.plateau_window && a.plateau_rel == b.plateau_rel &&
         a.max_nonfinite == b.max_nonfinite;
}

inline bool operator==(const FillConfig& a, const FillConfig& b) {
  return a.strategy == b.strategy && a.crop == b.crop && a.instances_per_subbag == b.instances_per_subbag &&
         a.replicate_before_neutral == b.replicate_before_neutral && a.inversion == b.inversion &&
         a.eval_samples == b.eval_samples && a.sweep == b.sweep;
}

inline bool operator==(const PretrainOptions& a, const PretrainOptions& b) {
  return a.epochs == b.epochs && a.base_lr == b.base_lr && a.decay_rate == b.decay_rate &&
         a.batch_size == b.batch_size && a.head_hidden == b.head_hidden;
}

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  DatasetConfig dataset;
  ModelConfig model;
  FillConfig fill;
  PretrainOptions pretrain;
  TrainPlan plan = default_plan();
  bool deterministic = false;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;

  Shape instance_shape() const { return {3, model.instance_size, model.instance_size}; }

  ModelSpec model_spec(bool shared_encoder = false) const {
    ModelSpec s;
    s.num_subbags = 3;
    s.num_classes = dataset.num_classes;
    s.instance_shape = instance_shape();
    s.encoder = model.encoder;
    s.head = default_head(dataset.num_classes, model.head_hidden);
    s.aggregation = model.aggregation;
    s.shared_encoder = shared_encoder;
    return s;
  }

  DataOptions data_options() const {
    DataOptions d;
    d.instances_per_subbag.assign(3, fill.instances_per_subbag);
    d.fill.strategy = fill.strategy;
    d.fill.crop = fill.crop;
    d.fill.replicate_before_neutral = fill.replicate_before_neutral;
    d.fill.inversion = fill.inversion;
    d.instance_shape = instance_shape();
    d.eval_samples = fill.eval_samples;
    return d;
  }
};

inline void validate(const ExperimentConfig& c) {
  if (c.schema_version != kConfigSchemaVersion) {
    throw ConfigError("unsupported schema_version " + std::to_string(c.schema_version));
  }
  if (c.dataset.num_bags == 0) throw ConfigError("dataset.num_bags must be positive");
  if (c.dataset.num_classes < 2 || c.dataset.num_classes > synth::max_classes()) {
    throw ConfigError("dataset.num_classes must be in [2, " + std::to_string(synth::max_classes()) + "]");
  }
  if (!(c.dataset.test_fraction > 0.0 && c.dataset.test_fraction < 1.0)) {
    throw ConfigError("dataset.test_fraction must be in (0,1)");
  }
  if (c.model.instance_size == 0 || c.model.instance_size > c.dataset.image_size) {
    throw ConfigError("model.instance_size must be in [1, dataset.image_size]");
  }
  if (c.model.aggregation == Aggregation::max && c.fill.strategy == FillStrategy::optimization) {
    throw ConfigError("aggregation=max with fill strategy optimization is redundant; use reproduction");
  }
  if (c.fill.instances_per_subbag == 0) throw ConfigError("fill.instances_per_subbag must be positive");
  for (std::size_t i : c.fill.sweep) {
    if (i < 2 || i > 4) throw ConfigError("fill.sweep values must lie in [2, 4]");
  }
  if (c.pretrain.batch_size == 0) throw ConfigError("pretrain.batch_size must be positive");
  try {
    check_encoder_stack(c.model.encoder, c.instance_shape());
    validate(c.plan);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json layer_to_json(const LayerSpec& l) {
  nlohmann::json j{{"kind", std::string(to_string(l.kind))}};
  switch (l.kind) {
    case LayerKind::conv2d:
      j["out_channels"] = l.out_channels;
      j["kernel"] = l.kernel;
      j["stride"] = l.stride;
      j["padding"] = l.padding;
      break;
    case LayerKind::maxpool2d:
      j["window"] = l.kernel;
      j["stride"] = l.stride;
      break;
    case LayerKind::dense:
      j["units"] = l.units;
      break;
    default:
      break;
  }
  return j;
}

inline LayerSpec layer_from_json(const nlohmann::json& j) {
  const LayerKind kind = parse_layer_kind(j.at("kind").get<std::string>());
  switch (kind) {
    case LayerKind::conv2d:
      return LayerSpec::conv(j.at("out_channels"), j.at("kernel"), j.value("padding", std::size_t{0}),
                             j.value("stride", std::size_t{1}));
    case LayerKind::maxpool2d:
      return LayerSpec::maxpool(j.at("window"), j.value("stride", std::size_t{0}));
    case LayerKind::dense:
      return LayerSpec::dense(j.at("units"));
    case LayerKind::relu:
      return LayerSpec::relu();
    case LayerKind::flatten:
      return LayerSpec::flatten();
    case LayerKind::softmax:
      return LayerSpec::softmax();
  }
  throw ConfigError("unknown layer kind");
}

inline CropKind parse_crop_kind(const std::string& s) {
  for (CropKind k : {CropKind::center, CropKind::top_left, CropKind::top_right, CropKind::bottom_left,
                     CropKind::bottom_right, CropKind::random, CropKind::full}) {
    if (s == to_string(k)) return k;
  }
  throw ConfigError("unknown crop kind '" + s + "'");
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json enc = nlohmann::json::array();
  for (const LayerSpec& l : c.model.encoder) enc.push_back(layer_to_json(l));
  nlohmann::json steps = nlohmann::json::array();
  for (const StepPlan& s : c.plan.steps) {
    steps.push_back({{"kind", to_string(s.kind)}, {"epochs", s.epochs}, {"base_lr", s.base_lr}, {"decay_rate", s.decay_rate}});
  }
  const InversionOptions& inv = c.fill.inversion;
  return {
      {"schema_version", c.schema_version},
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"deterministic", c.deterministic},
      {"dataset",
       {{"num_bags", c.dataset.num_bags},
        {"num_classes", c.dataset.num_classes},
        {"image_size", c.dataset.image_size},
        {"noise", c.dataset.noise},
        {"test_fraction", c.dataset.test_fraction},
        {"drop", synth::to_string(c.dataset.drop)},
        {"min_class_fraction", c.dataset.min_class_fraction}}},
      {"model",
       {{"instance_size", c.model.instance_size},
        {"encoder", enc},
        {"head_hidden", c.model.head_hidden},
        {"aggregation", to_string(c.model.aggregation)}}},
      {"fill",
       {{"strategy", to_string(c.fill.strategy)},
        {"crop", to_string(c.fill.crop)},
        {"instances_per_subbag", c.fill.instances_per_subbag},
        {"replicate_before_neutral", c.fill.replicate_before_neutral},
        {"eval_samples", c.fill.eval_samples},
        {"sweep", c.fill.sweep},
        {"inversion",
         {{"method", to_string(inv.method)},
          {"max_iters", inv.max_iters},
          {"lr", inv.lr},
          {"lr_growth", inv.lr_growth},
          {"beta1", inv.beta1},
          {"beta2", inv.beta2},
          {"tolerance", inv.tolerance},
          {"plateau_window", inv.plateau_window},
          {"plateau_rel", inv.plateau_rel},
          {"max_nonfinite", inv.max_nonfinite}}}}},
      {"pretrain",
       {{"epochs", c.pretrain.epochs},
        {"base_lr", c.pretrain.base_lr},
        {"decay_rate", c.pretrain.decay_rate},
        {"batch_size", c.pretrain.batch_size},
        {"head_hidden", c.pretrain.head_hidden}}},
      {"plan", {{"batch_size", c.plan.batch_size}, {"workers", c.plan.workers}, {"steps", steps}}},
  };
}

namespace detail {

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

}  // namespace detail

/// Missing keys keep their defaults; unknown enum names and bad types are errors.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    if (!j.contains("schema_version")) throw ConfigError("config lacks schema_version");
    using detail::read_opt;
    read_opt(j, "schema_version", c.schema_version);
    if (c.schema_version != kConfigSchemaVersion) {
      throw ConfigError("unsupported schema_version " + std::to_string(c.schema_version));
    }
    read_opt(j, "seed", c.seed);
    read_opt(j, "output_dir", c.output_dir);
    read_opt(j, "deterministic", c.deterministic);
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      read_opt(d, "num_bags", c.dataset.num_bags);
      read_opt(d, "num_classes", c.dataset.num_classes);
      read_opt(d, "image_size", c.dataset.image_size);
      read_opt(d, "noise", c.dataset.noise);
      read_opt(d, "test_fraction", c.dataset.test_fraction);
      if (d.contains("drop")) c.dataset.drop = synth::parse_drop_method(d.at("drop").get<std::string>());
      read_opt(d, "min_class_fraction", c.dataset.min_class_fraction);
    }
    if (j.contains("model")) {
      const auto& m = j.at("model");
      read_opt(m, "instance_size", c.model.instance_size);
      if (m.contains("encoder")) {
        c.model.encoder.clear();
        for (const auto& l : m.at("encoder")) c.model.encoder.push_back(layer_from_json(l));
      }
      read_opt(m, "head_hidden", c.model.head_hidden);
      if (m.contains("aggregation")) c.model.aggregation = parse_aggregation(m.at("aggregation").get<std::string>());
    }
    if (j.contains("fill")) {
      const auto& f = j.at("fill");
      if (f.contains("strategy")) c.fill.strategy = parse_fill_strategy(f.at("strategy").get<std::string>());
      if (f.contains("crop")) c.fill.crop = parse_crop_kind(f.at("crop").get<std::string>());
      read_opt(f, "instances_per_subbag", c.fill.instances_per_subbag);
      read_opt(f, "replicate_before_neutral", c.fill.replicate_before_neutral);
      read_opt(f, "eval_samples", c.fill.eval_samples);
      read_opt(f, "sweep", c.fill.sweep);
      if (f.contains("inversion")) {
        const auto& v = f.at("inversion");
        auto& inv = c.fill.inversion;
        if (v.contains("method")) inv.method = parse_inversion_method(v.at("method").get<std::string>());
        read_opt(v, "max_iters", inv.max_iters);
        read_opt(v, "lr", inv.lr);
        read_opt(v, "lr_growth", inv.lr_growth);
        read_opt(v, "beta1", inv.beta1);
        read_opt(v, "beta2", inv.beta2);
        read_opt(v, "tolerance", inv.tolerance);
        read_opt(v, "plateau_window", inv.plateau_window);
        read_opt(v, "plateau_rel", inv.plateau_rel);
        read_opt(v, "max_nonfinite", inv.max_nonfinite);
      }
    }
    if (j.contains("pretrain")) {
      const auto& p = j.at("pretrain");
      read_opt(p, "epochs", c.pretrain.epochs);
      read_opt(p, "base_lr", c.pretrain.base_lr);
      read_opt(p, "decay_rate", c.pretrain.decay_rate);
      read_opt(p, "batch_size", c.pretrain.batch_size);
      read_opt(p, "head_hidden", c.pretrain.head_hidden);
    }
    if (j.contains("plan")) {
      const auto& p = j.at("plan");
      read_opt(p, "batch_size", c.plan.batch_size);
      read_opt(p, "workers", c.plan.workers);
      if (p.contains("steps")) {
        c.plan.steps.clear();
        for (const auto& s : p.at("steps")) {
          StepPlan sp;
          sp.kind = parse_step_kind(s.at("kind").get<std::string>());
          read_opt(s, "epochs", sp.epochs);
          read_opt(s, "base_lr", sp.base_lr);
          read_opt(s, "decay_rate", sp.decay_rate);
          c.plan.steps.push_back(sp);
        }
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  validate(c);
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return config_from_json(j);
}

inline std::string serialize_config(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

}  // namespace nmil
