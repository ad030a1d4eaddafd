#pragma once

// Command implementations behind the nmil executable. Every command reads the
// run directory written by the earlier ones:
//
//   <out>/config.json         materialized configuration
//   <out>/data/               manifest.json (after dropping), manifest_source.json, images/
//   <out>/pretrain/           subbag{j}.ckpt, shared.ckpt, accuracy.csv
//   <out>/train/<variant>/    step{ii}_{id}.ckpt, step{ii}_{id}.csv, metrics.csv, final.ckpt
//   <out>/evaluate/           metrics.csv
//   <out>/ablate/             ablation.csv
//   <out>/invert/             neutral_{k}.ppm, trace_{k}.csv, summary.csv
//   <out>/report.txt

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nmil/checkpoint.hpp"
#include "nmil/config.hpp"
#include "nmil/io.hpp"
#include "nmil/pipeline.hpp"

namespace nmil::cmd {

namespace fs = std::filesystem;

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool deterministic = false;
  std::string resume;
  std::string variant = "all";  // train: nested, shared, nested_i{I} or all
  std::ostream* log = &std::cerr;
};

struct InvertOptions {
  std::string encoder;                  // checkpoint; defaults to the trained nested model
  std::string target = "from-subbag";   // or a JSON file holding the embedding
  std::size_t count = 5;
  std::size_t subbag = 0;               // encoder index for an embedding-file target
};

struct RunPaths {
  fs::path root;
  fs::path config() const { return root / "config.json"; }
  fs::path data() const { return root / "data"; }
  fs::path pretrain() const { return root / "pretrain"; }
  fs::path subbag_net(std::size_t j) const { return pretrain() / ("subbag" + std::to_string(j) + ".ckpt"); }
  fs::path shared_net() const { return pretrain() / "shared.ckpt"; }
  fs::path train(const std::string& variant) const { return root / "train" / variant; }
  fs::path final_model(const std::string& variant) const { return train(variant) / "final.ckpt"; }
  fs::path evaluate() const { return root / "evaluate"; }
  fs::path ablate() const { return root / "ablate"; }
  fs::path invert() const { return root / "invert"; }
  fs::path report() const { return root / "report.txt"; }
};

/// Digest of everything that affects results; output location and worker count excluded.
inline std::string config_digest(ExperimentConfig c) {
  c.output_dir.clear();
  c.deterministic = false;
  c.plan.workers = 1;
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << derive_seed(0, serialize_config(c));
  return ss.str();
}

inline ExperimentConfig read_config_file(const fs::path& path) {
  try {
    return parse_config(read_file(path));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline void require_file(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path)) throw IoError("missing " + path.string() + " (run " + producer + " first)");
}

/// Resolves the configuration: --config, else <out>/config.json, else defaults; then flag overrides.
/// Commands other than gen-data also require the stored configuration to match.
inline ExperimentConfig load_config(const GlobalOptions& o, bool creating) {
  ExperimentConfig cfg;
  if (!o.config_path.empty()) {
    cfg = read_config_file(o.config_path);
  } else {
    const fs::path stored = fs::path(o.out.empty() ? cfg.output_dir : o.out) / "config.json";
    if (fs::exists(stored)) cfg = read_config_file(stored);
  }
  if (o.seed) cfg.seed = *o.seed;
  if (!o.out.empty()) cfg.output_dir = o.out;
  if (o.deterministic) cfg.deterministic = true;
  validate(cfg);
  if (!creating) {
    const RunPaths paths{cfg.output_dir};
    require_file(paths.config(), "gen-data");
    if (config_digest(read_config_file(paths.config())) != config_digest(cfg)) {
      throw ConfigError("configuration differs from " + paths.config().string() + "; rerun gen-data with it");
    }
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Checkpoints of single networks

inline Checkpoint network_checkpoint(const Network& net, const std::string& digest) {
  Checkpoint ck;
  ck.meta["kind"] = "network";
  ck.meta["config_digest"] = digest;
  net.for_each_param([&](const std::string& p, const Tensor& t) { ck.add(p, t); });
  return ck;
}

inline Network load_network(const Checkpoint& ck, const LayerStack& stack, const Shape& input_shape,
                            const std::string& what) {
  if (ck.meta.count("kind") == 0 || ck.meta.at("kind") != "network") throw IoError(what + ": not a network checkpoint");
  Rng unused(0);
  Network net = make_network(stack, input_shape, unused);
  net.for_each_param([&](const std::string& p, Tensor& t) {
    if (!ck.contains(p)) throw IoError(what + ": missing tensor " + p);
    require_same_shape(t, ck.get(p), what + " tensor '" + p + "'");
    t = ck.get(p);
  });
  return net;
}

inline void check_digest(const Checkpoint& ck, const std::string& digest, const fs::path& file) {
  const auto it = ck.meta.find("config_digest");
  if (it == ck.meta.end() || it->second != digest) {
    throw ConfigError(file.string() + " was produced under a different configuration; rerun the command that wrote it");
  }
}

inline Checkpoint read_checked(const fs::path& file, const std::string& producer, const std::string& digest) {
  require_file(file, producer);
  Checkpoint ck = read_checkpoint(file);
  check_digest(ck, digest, file);
  return ck;
}

inline LayerStack pretrain_stack(const ExperimentConfig& cfg) {
  return single_instance_stack(cfg.model.encoder, cfg.dataset.num_classes, cfg.pretrain.head_hidden);
}

inline PretrainResult load_pretrained(const ExperimentConfig& cfg, bool need_shared) {
  const RunPaths paths{cfg.output_dir};
  const std::string digest = config_digest(cfg);
  PretrainResult pre;
  for (std::size_t j = 0; j < 3; ++j) {
    const fs::path f = paths.subbag_net(j);
    pre.subbag_nets.push_back(load_network(read_checked(f, "pretrain", digest), pretrain_stack(cfg), cfg.instance_shape(), f.string()));
  }
  if (need_shared) {
    const fs::path f = paths.shared_net();
    pre.shared_net = load_network(read_checked(f, "pretrain", digest), pretrain_stack(cfg), cfg.instance_shape(), f.string());
  }
  return pre;
}

// ---------------------------------------------------------------------------
// Data

struct LoadedData {
  std::vector<Bag> bags;  // after instance dropping
  TestSplit split;
};

inline LoadedData load_data(const ExperimentConfig& cfg, bool source = false) {
  const RunPaths paths{cfg.output_dir};
  require_file(paths.data() / kManifest, "gen-data");
  LoadedData d;
  d.bags = read_dataset(paths.data(), cfg.dataset.min_class_fraction, source ? kSourceManifest : kManifest);
  if (d.bags.empty()) throw IoError(paths.data().string() + ": dataset is empty");
  d.split = make_split(cfg, d.bags);
  return d;
}

inline void gen_data(const GlobalOptions& o) {
  const ExperimentConfig cfg = load_config(o, true);
  const RunPaths paths{cfg.output_dir};
  const std::vector<Bag> full = generate_bags(cfg);
  std::optional<PretrainResult> pre;
  if (cfg.dataset.drop == synth::DropMethod::most_relevant || cfg.dataset.drop == synth::DropMethod::least_relevant) {
    *o.log << "gen-data: pretraining relevance nets\n";
    pre = run_pretraining(cfg, full, make_split(cfg, full), false);
  }
  const synth::DropResult dropped = apply_dropping(cfg, full, pre ? &pre->subbag_nets : nullptr);
  nlohmann::json meta;
  meta["num_bags"] = full.size();
  meta["num_classes"] = cfg.dataset.num_classes;
  meta["seed"] = cfg.seed;
  meta["drop"] = synth::to_string(cfg.dataset.drop);
  meta["dropped_images"] = dropped.log.size();
  meta["config_digest"] = config_digest(cfg);
  std::map<std::string, std::size_t> configs;
  for (const Bag& b : dropped.bags) configs[configuration_of(b).to_string()]++;
  meta["configurations"] = configs;
  fs::create_directories(paths.root);
  atomic_write(paths.config(), serialize_config(cfg));
  write_dataset(paths.data(), dropped.bags, meta,
                cfg.dataset.drop == synth::DropMethod::none ? std::string{} : drop_log_csv(dropped.log), &full);
  *o.log << "gen-data: " << full.size() << " bags, " << dropped.log.size() << " images dropped -> " << paths.data().string()
         << "\n";
}

inline void pretrain(const GlobalOptions& o) {
  const ExperimentConfig cfg = load_config(o, false);
  const RunPaths paths{cfg.output_dir};
  const LoadedData d = load_data(cfg, true);
  const std::string digest = config_digest(cfg);
  const PretrainResult pre = run_pretraining(cfg, d.bags, d.split, true);
  const fs::path staging = paths.pretrain().string() + ".tmp";
  fs::remove_all(staging);
  fs::create_directories(staging);
  const std::vector<Bag> test = select_bags(d.bags, d.split.test);
  std::string csv = "net,accuracy\n";
  for (std::size_t j = 0; j < pre.subbag_nets.size(); ++j) {
    write_checkpoint(staging / paths.subbag_net(j).filename(), network_checkpoint(pre.subbag_nets[j], digest));
    const double acc = single_instance_accuracy(pre.subbag_nets[j], test, j, cfg.instance_shape());
    csv += "subbag" + std::to_string(j) + "," + format_double(acc) + "\n";
    *o.log << "pretrain: sub-bag " << j << " test accuracy " << acc << "\n";
  }
  write_checkpoint(staging / paths.shared_net().filename(), network_checkpoint(*pre.shared_net, digest));
  double shared = 0.0;
  for (std::size_t j = 0; j < 3; ++j) shared += single_instance_accuracy(*pre.shared_net, test, j, cfg.instance_shape()) / 3.0;
  csv += "shared," + format_double(shared) + "\n";
  atomic_write(staging / "accuracy.csv", csv);
  publish_directory(staging, paths.pretrain());
}

// ---------------------------------------------------------------------------
// Training

inline std::vector<std::string> all_variants(const ExperimentConfig& cfg) {
  std::vector<std::string> v{"nested", "shared"};
  for (std::size_t i : cfg.fill.sweep) v.push_back("nested_i" + std::to_string(i));
  return v;
}

/// The configuration a variant trains under.
inline ExperimentConfig variant_config(const ExperimentConfig& cfg, const std::string& variant) {
  ExperimentConfig v = cfg;
  if (variant == "nested" || variant == "shared") return v;
  const std::string prefix = "nested_i";
  if (variant.rfind(prefix, 0) == 0 && variant.size() > prefix.size()) {
    const std::string digits = variant.substr(prefix.size());
    if (std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      v.fill.instances_per_subbag = std::stoul(digits);
      return v;
    }
  }
  throw ConfigError("unknown variant '" + variant + "' (expected nested, shared or nested_i<I>)");
}

inline bool is_shared(const std::string& variant) { return variant == "shared"; }

inline std::string step_file(std::size_t index, const std::string& id, const std::string& ext) {
  std::ostringstream ss;
  ss << "step" << std::setw(2) << std::setfill('0') << index << "_" << id << ext;
  return ss.str();
}

inline ModelParams empty_model(const ExperimentConfig& cfg, bool shared) {
  Rng unused(0);
  return make_model(cfg.model_spec(shared), unused);
}

inline ModelParams load_model(const ExperimentConfig& cfg, const std::string& variant, const fs::path& file) {
  const Checkpoint ck = read_checked(file, "train", config_digest(cfg));
  ModelParams m = empty_model(variant_config(cfg, variant), is_shared(variant));
  load_checkpoint(m, ck);
  return m;
}

inline void train_variant(const ExperimentConfig& cfg, const std::string& variant, const LoadedData& d,
                          const PretrainResult& pre, const std::optional<Checkpoint>& resume_from,
                          const fs::path& resume_path, std::ostream& log) {
  const RunPaths paths{cfg.output_dir};
  const ExperimentConfig vcfg = variant_config(cfg, variant);
  const std::string digest = config_digest(cfg);
  ModelParams params = initial_model(vcfg, pre, is_shared(variant));
  const TrainPlan plan = seeded_plan(vcfg);
  const auto steps = expand(plan, params);
  const fs::path staging = paths.train(variant).string() + ".partial";

  std::size_t first = 0;
  if (resume_from) {
    const std::size_t done = std::stoul(resume_from->meta.at("step_index"));
    if (done >= steps.size() || resume_from->meta.at("step_id") != steps[done].id) {
      throw ConfigError(resume_path.string() + ": step does not match the configured plan");
    }
    load_checkpoint(params, *resume_from);
    first = done + 1;
    const fs::path src = resume_path.parent_path();
    if (fs::absolute(src).lexically_normal() != fs::absolute(staging).lexically_normal()) {
      fs::remove_all(staging);
      fs::create_directories(staging);
      for (std::size_t i = 0; i < first; ++i) {
        for (const char* ext : {".csv", ".ckpt"}) {
          const fs::path f = src / step_file(i, steps[i].id, ext);
          require_file(f, "train");
          fs::copy_file(f, staging / f.filename(), fs::copy_options::overwrite_existing);
        }
      }
    }
  } else {
    fs::remove_all(staging);
    fs::create_directories(staging);
  }

  Trainer trainer = make_trainer(vcfg, std::move(params), d.bags, d.split);
  for (std::size_t i = first; i < steps.size(); ++i) {
    const auto records = trainer.run_step(steps[i], plan);
    atomic_write(staging / step_file(i, steps[i].id, ".csv"), metrics_csv_rows(records));
    Checkpoint ck = to_checkpoint(trainer.params());
    ck.meta["variant"] = variant;
    ck.meta["step_index"] = std::to_string(i);
    ck.meta["step_id"] = steps[i].id;
    ck.meta["config_digest"] = digest;
    write_checkpoint(staging / step_file(i, steps[i].id, ".ckpt"), ck);
    const MetricsRecord& last = records.back();
    log << "train[" << variant << "] " << steps[i].id << ": full " << last.full_accuracy << " all " << last.all_accuracy
        << " loss " << last.train_loss << "\n";
  }

  std::string metrics = metrics_csv_header();
  for (std::size_t i = 0; i < steps.size(); ++i) metrics += read_file(staging / step_file(i, steps[i].id, ".csv"));
  atomic_write(staging / "metrics.csv", metrics);
  Checkpoint fin = to_checkpoint(trainer.params());
  fin.meta["variant"] = variant;
  fin.meta["config_digest"] = digest;
  write_checkpoint(staging / "final.ckpt", fin);
  publish_directory(staging, paths.train(variant));
}

inline void train(const GlobalOptions& o) {
  const ExperimentConfig cfg = load_config(o, false);
  std::vector<std::string> variants = o.variant == "all" ? all_variants(cfg) : std::vector<std::string>{o.variant};
  std::optional<Checkpoint> resume;
  if (!o.resume.empty()) {
    resume = read_checked(o.resume, "train", config_digest(cfg));
    if (resume->meta.count("step_index") == 0) throw ConfigError(o.resume + ": not a step checkpoint");
    const std::string v = resume->meta.at("variant");
    if (o.variant != "all" && o.variant != v) throw ConfigError(o.resume + " belongs to variant " + v);
    variants = {v};
  }
  for (const std::string& v : variants) variant_config(cfg, v);
  const bool need_shared = std::find(variants.begin(), variants.end(), "shared") != variants.end();
  const PretrainResult pre = load_pretrained(cfg, need_shared);
  const LoadedData d = load_data(cfg);
  for (const std::string& v : variants) train_variant(cfg, v, d, pre, resume, o.resume, *o.log);
}

// ---------------------------------------------------------------------------
// Evaluation and analyses

inline std::vector<std::string> trained_variants(const ExperimentConfig& cfg) {
  const RunPaths paths{cfg.output_dir};
  require_file(paths.final_model("nested"), "train");
  std::vector<std::string> out;
  for (const std::string& v : all_variants(cfg)) {
    if (fs::exists(paths.final_model(v))) out.push_back(v);
  }
  return out;
}

inline Trainer trained(const ExperimentConfig& cfg, const std::string& variant, const LoadedData& d) {
  const RunPaths paths{cfg.output_dir};
  return make_trainer(variant_config(cfg, variant), load_model(cfg, variant, paths.final_model(variant)), d.bags, d.split);
}

inline std::string evaluate(const GlobalOptions& o) {
  const ExperimentConfig cfg = load_config(o, false);
  const RunPaths paths{cfg.output_dir};
  const auto variants = trained_variants(cfg);
  const LoadedData d = load_data(cfg);
  std::vector<MetricsRecord> records;
  for (const std::string& v : variants) {
    Trainer t = trained(cfg, v, d);
    records.push_back(t.evaluate_test(v, 0));
    *o.log << "evaluate[" << v << "]: full " << records.back().full_accuracy << " all " << records.back().all_accuracy << "\n";
  }
  std::string csv = metrics_csv_header() + metrics_csv_rows(records);
  const PretrainResult pre = load_pretrained(cfg, false);
  const std::vector<Bag> test = select_bags(d.bags, d.split.test);
  const std::vector<Bag> test_full = full_configuration_bags(test);
  if (!test_full.empty()) {
    csv += "individual,0,full," + format_double(individual_nets_accuracy(pre.subbag_nets, test_full, cfg.instance_shape())) + ",\n";
  }
  csv += "individual,0,all," + format_double(individual_nets_accuracy(pre.subbag_nets, test, cfg.instance_shape())) + ",\n";
  atomic_write(paths.evaluate() / "metrics.csv", csv);
  return csv;
}

inline std::vector<AblationRow> ablate(const GlobalOptions& o) {
  const ExperimentConfig cfg = load_config(o, false);
  const RunPaths paths{cfg.output_dir};
  require_file(paths.final_model("nested"), "train");
  const LoadedData d = load_data(cfg);
  Trainer t = trained(cfg, "nested", d);
  const std::vector<Bag> full = full_configuration_bags(t.test_bags());
  if (full.empty()) throw BagError("ablate: the test split has no full-configuration bags");
  const auto rows = subbag_ablation(t, full, run_seeds(cfg.seed).eval);
  std::string csv = "subbag,full_accuracy,dropped_accuracy,drop_points\n";
  for (const AblationRow& r : rows) {
    csv += std::to_string(r.subbag) + "," + format_double(r.full_accuracy) + "," + format_double(r.dropped_accuracy) + "," +
           format_double(r.drop_points) + "\n";
    *o.log << "ablate: sub-bag " << r.subbag << " drop " << r.drop_points << " points\n";
  }
  atomic_write(paths.ablate() / "ablation.csv", csv);
  return rows;
}

// ---------------------------------------------------------------------------
// Inversion diagnostics

struct InversionRun {
  std::size_t bag_id = 0;
  std::size_t subbag = 0;
  InversionResult result;
  bool plateau = false;
};

/// Relative change of the trace over its trailing tenth is below `rel`.
inline bool reached_plateau(const std::vector<std::pair<std::size_t, double>>& trace, double rel = 1e-3) {
  if (trace.size() < 2) return true;
  const std::size_t w = std::max<std::size_t>(1, (trace.size() - 1) / 10);
  const double before = trace[trace.size() - 1 - w].second, now = trace.back().second;
  return before == 0.0 || (before - now) / before < rel;
}

/// Encoders for sub-bags 0..2 taken from a model or single-network checkpoint.
inline std::vector<Network> encoders_from(const ExperimentConfig& cfg, const fs::path& file) {
  require_file(file, "train");
  const Checkpoint ck = read_checkpoint(file);
  check_digest(ck, config_digest(cfg), file);
  const auto kind = ck.meta.find("kind");
  if (kind != ck.meta.end() && kind->second == "network") {
    const Network enc = leading_layers(load_network(ck, pretrain_stack(cfg), cfg.instance_shape(), file.string()),
                                       cfg.model.encoder.size());
    return {enc, enc, enc};
  }
  const bool shared = ck.meta.count("shared") && ck.meta.at("shared") == "1";
  ModelParams m = empty_model(cfg, shared);
  load_checkpoint(m, ck);
  return {m.encoder(0), m.encoder(1), m.encoder(2)};
}

inline Tensor read_embedding(const fs::path& file) {
  require_file(file, "an embedding export");
  std::vector<double> v;
  try {
    v = nlohmann::json::parse(read_file(file)).get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(file.string() + ": expected a JSON array of numbers (" + e.what() + ")");
  }
  return Tensor::vector(v);
}

inline std::vector<InversionRun> invert_targets(const std::vector<Network>& encoders,
                                                const std::vector<std::pair<std::size_t, std::size_t>>& picks,
                                                const std::vector<Bag>& bags, const Shape& instance_shape,
                                                const InversionOptions& opts) {
  std::map<std::size_t, const Bag*> by_id;
  for (const Bag& b : bags) by_id[b.id] = &b;
  std::vector<InversionRun> runs;
  for (const auto& [bag_id, j] : picks) {
    std::vector<Instance> inst;
    for (const SourceImage& img : by_id.at(bag_id)->sub_bags.at(j).images) {
      inst.push_back(crop_instance(img, CropKind::center, instance_shape));
    }
    const Network& enc = encoders.at(j);
    const Tensor mu = aggregate(encode_subbag(enc, inst, inst.size()), Aggregation::average);
    InversionRun r{bag_id, j, neutral_instance(enc, mu, mid_gray(enc.input_shape), opts), false};
    r.plateau = r.result.converged || reached_plateau(r.result.trace);
    runs.push_back(std::move(r));
  }
  return runs;
}

inline std::vector<InversionRun> invert(const GlobalOptions& o, const InvertOptions& io) {
  const ExperimentConfig cfg = load_config(o, false);
  const RunPaths paths{cfg.output_dir};
  const fs::path enc_file = io.encoder.empty() ? paths.final_model("nested") : fs::path(io.encoder);
  const std::vector<Network> encoders = encoders_from(cfg, enc_file);
  const InversionOptions& opts = cfg.fill.inversion;

  std::vector<InversionRun> runs;
  if (io.target == "from-subbag") {
    const LoadedData d = load_data(cfg);
    const std::vector<Bag> test = select_bags(d.bags, d.split.test);
    std::vector<std::pair<std::size_t, std::size_t>> candidates;
    for (const Bag& b : test) {
      for (std::size_t j = 0; j < b.sub_bags.size(); ++j) {
        if (!b.sub_bags[j].empty()) candidates.emplace_back(b.id, j);
      }
    }
    Rng rng(derive_seed(run_seeds(cfg.seed).eval, "invert"));
    std::shuffle(candidates.begin(), candidates.end(), rng);
    candidates.resize(std::min(io.count, candidates.size()));
    runs = invert_targets(encoders, candidates, test, cfg.instance_shape(), opts);
  } else {
    const Network& enc = encoders.at(io.subbag);
    InversionRun r{0, io.subbag, neutral_instance(enc, read_embedding(io.target), mid_gray(enc.input_shape), opts), false};
    r.plateau = r.result.converged || reached_plateau(r.result.trace);
    runs.push_back(std::move(r));
  }

  const fs::path staging = paths.invert().string() + ".tmp";
  fs::remove_all(staging);
  fs::create_directories(staging);
  std::string summary = "k,bag_id,subbag,iterations,final_norm,relative_residual,converged,plateau\n";
  for (std::size_t k = 0; k < runs.size(); ++k) {
    const InversionRun& r = runs[k];
    atomic_write(staging / ("neutral_" + std::to_string(k) + ".ppm"), encode_ppm(r.result.neutral.image));
    atomic_write(staging / ("trace_" + std::to_string(k) + ".csv"), trace_csv(r.result.trace));
    summary += std::to_string(k) + "," + std::to_string(r.bag_id) + "," + std::to_string(r.subbag) + "," +
               std::to_string(r.result.trace.back().first) + "," + format_double(r.result.trace.back().second) + "," +
               format_double(r.result.relative_residual) + "," + (r.result.converged ? "1" : "0") + "," +
               (r.plateau ? "1" : "0") + "\n";
    if (!r.result.converged) {
      *o.log << "warning: inversion " << k << " stopped at relative residual " << r.result.relative_residual
             << " (tolerance " << opts.tolerance << ")\n";
    }
  }
  atomic_write(staging / "summary.csv", summary);
  publish_directory(staging, paths.invert());
  return runs;
}

// ---------------------------------------------------------------------------
// Report

namespace detail {

inline std::string pct(double v) {
  if (std::isnan(v)) return "-";
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(1) << 100.0 * v;
  return ss.str();
}

/// Last full/all accuracies per stage, in first-appearance order.
inline std::vector<std::pair<std::string, std::pair<double, double>>> stage_table(const std::vector<MetricsRow>& rows) {
  std::vector<std::pair<std::string, std::pair<double, double>>> out;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const MetricsRow& r : rows) {
    if (r.subset != "full" && r.subset != "all") continue;
    auto it = std::find_if(out.begin(), out.end(), [&](const auto& e) { return e.first == r.stage; });
    if (it == out.end()) it = out.insert(out.end(), {r.stage, {nan, nan}});
    (r.subset == "full" ? it->second.first : it->second.second) = r.accuracy;
  }
  return out;
}

inline void row(std::ostream& os, const std::string& name, const std::vector<std::string>& cells) {
  os << "  " << std::left << std::setw(14) << name;
  for (const std::string& c : cells) os << std::right << std::setw(10) << c;
  os << "\n";
}

}  // namespace detail

inline std::string report(const GlobalOptions& o) {
  const ExperimentConfig cfg = load_config(o, false);
  const RunPaths paths{cfg.output_dir};
  require_file(paths.train("nested") / "metrics.csv", "train");
  std::ostringstream os;
  os << "run " << paths.root.string() << " (seed " << cfg.seed << ", " << cfg.dataset.num_bags << " bags, drop "
     << synth::to_string(cfg.dataset.drop) << ", aggregation " << to_string(cfg.model.aggregation) << ", fill "
     << to_string(cfg.fill.strategy) << ")\n\n";

  auto load_rows = [](const fs::path& f) { return parse_metrics_csv(read_file(f), f.string()); };

  os << "Test accuracy (%) at the end of each training step, nested model\n";
  detail::row(os, "step", {"full", "all"});
  for (const auto& [stage, acc] : detail::stage_table(load_rows(paths.train("nested") / "metrics.csv"))) {
    detail::row(os, stage, {detail::pct(acc.first), detail::pct(acc.second)});
  }

  const fs::path eval = paths.evaluate() / "metrics.csv";
  if (fs::exists(eval)) {
    os << "\nModel comparison, test accuracy (%)\n";
    detail::row(os, "model", {"full", "all"});
    for (const auto& [stage, acc] : detail::stage_table(load_rows(eval))) {
      detail::row(os, stage, {detail::pct(acc.first), detail::pct(acc.second)});
    }
  }

  bool sweep_header = false;
  for (std::size_t i : cfg.fill.sweep) {
    const fs::path f = paths.train("nested_i" + std::to_string(i)) / "metrics.csv";
    if (!fs::exists(f)) continue;
    if (!sweep_header) {
      os << "\nInstances per sub-bag, final test accuracy (%)\n";
      detail::row(os, "I", {"full", "all"});
      sweep_header = true;
    }
    const auto table = detail::stage_table(load_rows(f));
    if (!table.empty()) detail::row(os, std::to_string(i), {detail::pct(table.back().second.first), detail::pct(table.back().second.second)});
  }

  const fs::path abl = paths.ablate() / "ablation.csv";
  if (fs::exists(abl)) {
    os << "\nAccuracy drop (points) from dropping one sub-bag, full-configuration test bags\n";
    detail::row(os, "sub-bag", {"drop"});
    std::istringstream in(read_file(abl));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto f = split_csv_line(line);
      if (f.size() != 4) throw IoError(abl.string() + ": expected 4 fields");
      std::ostringstream v;
      v << std::fixed << std::setprecision(1) << std::stod(f[3]);
      detail::row(os, f[0], {v.str()});
    }
  }
  const std::string text = os.str();
  atomic_write(paths.report(), text);
  return text;
}

}  // namespace nmil::cmd
