#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

#include "nmil/commands.hpp"

using namespace nmil;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("nmil_test_cli_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p.parent_path());
  return p;
}

ExperimentConfig tiny_config(const fs::path& out) {
  ExperimentConfig c;
  c.seed = 4;
  c.output_dir = out.string();
  c.dataset.num_bags = 60;
  c.dataset.num_classes = 4;
  c.dataset.image_size = 12;
  c.model.instance_size = 10;
  c.model.head_hidden = 8;
  c.model.encoder = {LayerSpec::conv(3, 3, 1), LayerSpec::relu(), LayerSpec::maxpool(2), LayerSpec::flatten()};
  c.pretrain.epochs = 1;
  c.pretrain.head_hidden = 8;
  c.plan.batch_size = 8;
  c.plan.workers = 2;
  c.plan.steps = {{StepKind::phase1, 1, 0.01, 0.95},
                  {StepKind::fc1, 1, 0.01, 0.95},
                  {StepKind::cl, 1, 0.01, 0.95},
                  {StepKind::fc2, 1, 0.01, 0.95}};
  c.fill.inversion.max_iters = 200;
  return c;
}

cmd::GlobalOptions options_for(const ExperimentConfig& c, std::ostream& log) {
  const fs::path file = fs::path(c.output_dir).string() + ".json";
  atomic_write(file, serialize_config(c));
  cmd::GlobalOptions o;
  o.config_path = file.string();
  o.log = &log;
  return o;
}

void run_through_train(const cmd::GlobalOptions& o) {
  cmd::gen_data(o);
  cmd::pretrain(o);
  cmd::train(o);
}

int run_binary(const std::string& args) {
  const std::string line = std::string(NMIL_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(line.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, RoundTrip) {
  ExperimentConfig c = tiny_config("runs/x");
  c.fill.sweep = {2, 3, 4};
  c.fill.inversion.method = InversionMethod::sgd;
  c.model.aggregation = Aggregation::max;
  c.dataset.drop = synth::DropMethod::least_relevant;
  const ExperimentConfig back = parse_config(serialize_config(c));
  EXPECT_EQ(back, c);
  EXPECT_EQ(serialize_config(back), serialize_config(c));
  EXPECT_EQ(parse_config(serialize_config(ExperimentConfig{})), ExperimentConfig{});
}

TEST(Config, Validation) {
  ExperimentConfig c = tiny_config("runs/x");
  c.model.aggregation = Aggregation::max;
  c.fill.strategy = FillStrategy::optimization;
  EXPECT_THROW(validate(c), ConfigError);
  c = tiny_config("runs/x");
  c.fill.sweep = {2, 5};
  EXPECT_THROW(validate(c), ConfigError);
  c.fill.sweep = {1};
  EXPECT_THROW(validate(c), ConfigError);
  EXPECT_THROW(parse_config("{\"seed\": 1}"), ConfigError);
  EXPECT_THROW(parse_config("{\"schema_version\": 1, \"fill\": {\"strategy\": \"magic\"}}"), ConfigError);
}

TEST(GenData, DeterministicManifestAndDropLog) {
  std::ostringstream log;
  const ExperimentConfig ca = tiny_config(scratch("gen_a")), cb = tiny_config(scratch("gen_b"));
  cmd::gen_data(options_for(ca, log));
  cmd::gen_data(options_for(cb, log));
  const cmd::RunPaths pa{ca.output_dir}, pb{cb.output_dir};
  EXPECT_EQ(read_file(pa.data() / "manifest.json"), read_file(pb.data() / "manifest.json"));
  EXPECT_EQ(read_file(pa.data() / "drop_log.csv"), read_file(pb.data() / "drop_log.csv"));
  EXPECT_EQ(read_file(pa.data() / "drop_log.csv").rfind("bag_id,subbag,image_id,relevance\n", 0), 0u);
  EXPECT_EQ(read_file(pa.config()), serialize_config(ca));

  const auto dropped = read_dataset(pa.data());
  const auto source = read_dataset(pa.data(), 0.0, kSourceManifest);
  ASSERT_EQ(dropped.size(), 60u);
  ASSERT_EQ(source.size(), 60u);
  std::size_t removed = 0;
  for (std::size_t i = 0; i < source.size(); ++i) {
    EXPECT_TRUE(configuration_of(source[i]).is_full());
    EXPECT_EQ(dropped[i].label, source[i].label);
    for (std::size_t j = 0; j < 3; ++j) removed += source[i].sub_bags[j].images.size() - dropped[i].sub_bags[j].images.size();
  }
  EXPECT_EQ(removed, nlohmann::json::parse(read_file(pa.data() / "metadata.json")).at("dropped_images").get<std::size_t>());
  EXPECT_GT(removed, 0u);
}

TEST(GenData, NoDropKeepsFullConfigurations) {
  std::ostringstream log;
  ExperimentConfig c = tiny_config(scratch("gen_none"));
  c.dataset.drop = synth::DropMethod::none;
  cmd::gen_data(options_for(c, log));
  const cmd::RunPaths p{c.output_dir};
  EXPECT_FALSE(fs::exists(p.data() / "drop_log.csv"));
  for (const Bag& b : read_dataset(p.data())) EXPECT_TRUE(configuration_of(b).is_full());
}

TEST(Commands, MissingPrerequisiteNamesTheFile) {
  std::ostringstream log;
  const ExperimentConfig c = tiny_config(scratch("missing"));
  const auto o = options_for(c, log);
  try {
    cmd::pretrain(o);
    FAIL() << "pretrain ran without a dataset";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("config.json"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("gen-data"), std::string::npos) << e.what();
  }
  cmd::gen_data(o);
  try {
    cmd::train(o);
    FAIL() << "train ran without pretrained nets";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find((fs::path("pretrain") / "subbag0.ckpt").string()), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("run pretrain"), std::string::npos) << e.what();
  }
  cmd::pretrain(o);
  EXPECT_THROW(cmd::evaluate(o), IoError);
  EXPECT_THROW(cmd::ablate(o), IoError);
  EXPECT_THROW(cmd::report(o), IoError);
}

TEST(Commands, ChangedConfigurationIsRejected) {
  std::ostringstream log;
  ExperimentConfig c = tiny_config(scratch("changed"));
  cmd::gen_data(options_for(c, log));
  c.plan.steps[0].epochs = 2;
  EXPECT_THROW(cmd::pretrain(options_for(c, log)), ConfigError);
  // worker count and determinism do not change results
  c = tiny_config(c.output_dir);
  c.plan.workers = 1;
  c.deterministic = true;
  EXPECT_NO_THROW(cmd::pretrain(options_for(c, log)));
}

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    cfg_ = new ExperimentConfig(tiny_config(scratch("pipeline")));
    cfg_->fill.sweep = {3};
    static std::ostringstream log;
    opts_ = new cmd::GlobalOptions(options_for(*cfg_, log));
    run_through_train(*opts_);
  }
  static void TearDownTestSuite() {
    delete cfg_;
    delete opts_;
  }
  static ExperimentConfig* cfg_;
  static cmd::GlobalOptions* opts_;
  cmd::RunPaths paths() const { return {cfg_->output_dir}; }
};
ExperimentConfig* Pipeline::cfg_ = nullptr;
cmd::GlobalOptions* Pipeline::opts_ = nullptr;

TEST_F(Pipeline, TrainWritesStepsAndMetrics) {
  for (const char* v : {"nested", "shared", "nested_i3"}) {
    const fs::path dir = paths().train(v);
    EXPECT_TRUE(fs::exists(dir / "final.ckpt")) << v;
    EXPECT_FALSE(fs::exists(dir.string() + ".partial")) << v;
    const auto rows = parse_metrics_csv(read_file(dir / "metrics.csv"));
    ASSERT_FALSE(rows.empty());
    EXPECT_EQ(rows.front().stage, "phase1");
    EXPECT_EQ(rows.back().stage, "fc2");
  }
  EXPECT_TRUE(fs::exists(paths().train("nested") / "step00_phase1.ckpt"));
  EXPECT_TRUE(fs::exists(paths().train("nested") / "step02_cl.L0.ckpt"));
  EXPECT_EQ(read_file(paths().train("nested") / "metrics.csv").substr(0, metrics_csv_header().size()),
            "stage,epoch,subset,accuracy,loss\n");
}

TEST_F(Pipeline, EvaluateEmitsFullAndAllRows) {
  const auto rows = parse_metrics_csv(cmd::evaluate(*opts_));
  EXPECT_EQ(read_file(paths().evaluate() / "metrics.csv").rfind(metrics_csv_header(), 0), 0u);
  for (const char* model : {"nested", "shared", "nested_i3", "individual"}) {
    bool full = false, all = false;
    for (const MetricsRow& r : rows) {
      if (r.stage != model) continue;
      full = full || r.subset == "full";
      all = all || r.subset == "all";
      if (r.subset == "full" || r.subset == "all") {
        EXPECT_GE(r.accuracy, 0.0);
        EXPECT_LE(r.accuracy, 1.0);
      }
    }
    EXPECT_TRUE(full) << model;
    EXPECT_TRUE(all) << model;
  }
  // evaluation of the final model reproduces the end-of-training record
  const auto train_rows = parse_metrics_csv(read_file(paths().train("nested") / "metrics.csv"));
  for (const MetricsRow& r : rows) {
    if (r.stage != "nested" || r.subset != "all") continue;
    for (const MetricsRow& t : train_rows) {
      if (t.stage == "fc2" && t.subset == "all") {
        EXPECT_EQ(t.accuracy, r.accuracy);
      }
    }
  }
}

TEST_F(Pipeline, AblateEmitsOneRowPerSubbag) {
  const auto rows = cmd::ablate(*opts_);
  ASSERT_EQ(rows.size(), 3u);
  const std::string csv = read_file(paths().ablate() / "ablation.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(rows[j].subbag, j);
    EXPECT_DOUBLE_EQ(rows[j].drop_points, 100.0 * (rows[j].full_accuracy - rows[j].dropped_accuracy));
  }
}

TEST_F(Pipeline, InvertTracesAreMonotone) {
  cmd::InvertOptions io;
  io.count = 5;
  const auto runs = cmd::invert(*opts_, io);
  ASSERT_EQ(runs.size(), 5u);
  for (std::size_t k = 0; k < runs.size(); ++k) {
    const std::string csv = read_file(paths().invert() / ("trace_" + std::to_string(k) + ".csv"));
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "iteration,l2_norm");
    double prev = std::numeric_limits<double>::infinity();
    std::size_t n = 0;
    while (std::getline(in, line)) {
      const auto f = split_csv_line(line);
      ASSERT_EQ(f.size(), 2u);
      EXPECT_EQ(std::stoul(f[0]), n++);
      const double v = std::stod(f[1]);
      EXPECT_LE(v, prev);
      prev = v;
    }
    EXPECT_EQ(n, runs[k].result.trace.size());
    EXPECT_TRUE(fs::exists(paths().invert() / ("neutral_" + std::to_string(k) + ".ppm")));
  }
}

TEST_F(Pipeline, ReportRendersTables) {
  cmd::evaluate(*opts_);
  cmd::ablate(*opts_);
  const std::string text = cmd::report(*opts_);
  for (const char* needle : {"phase1", "fc1", "cl.L0", "fc2", "individual", "shared", "Instances per sub-bag", "drop"}) {
    EXPECT_NE(text.find(needle), std::string::npos) << needle;
  }
  EXPECT_EQ(read_file(paths().report()), text);
}

TEST_F(Pipeline, ResumeFromStepBoundaryIsBitwiseIdentical) {
  const fs::path dir = paths().train("nested");
  const std::string straight = read_file(dir / "metrics.csv");
  const std::string straight_ckpt = read_file(dir / "final.ckpt");
  for (const char* step : {"step00_phase1.ckpt", "step02_cl.L0.ckpt"}) {
    const fs::path saved = scratch(std::string("resume_") + step);
    fs::create_directories(saved);
    for (const auto& e : fs::directory_iterator(dir)) fs::copy_file(e.path(), saved / e.path().filename());
    cmd::GlobalOptions o = *opts_;
    o.deterministic = true;
    o.resume = (saved / step).string();
    cmd::train(o);
    EXPECT_EQ(read_file(dir / "metrics.csv"), straight) << step;
    EXPECT_EQ(read_file(dir / "final.ckpt"), straight_ckpt) << step;
  }
}

TEST_F(Pipeline, ResumeRejectsForeignCheckpoint) {
  cmd::GlobalOptions o = *opts_;
  o.resume = (paths().train("nested") / "step01_fc1.ckpt").string();
  o.variant = "shared";
  EXPECT_THROW(cmd::train(o), ConfigError);
  o.resume = paths().subbag_net(0).string();
  o.variant = "all";
  EXPECT_THROW(cmd::train(o), ConfigError);
}

TEST(Commands, DeterministicRunsMatchBitwise) {
  std::ostringstream log;
  std::string metrics[2];
  for (int r = 0; r < 2; ++r) {
    ExperimentConfig c = tiny_config(scratch("determinism_" + std::to_string(r)));
    c.deterministic = true;
    const auto o = options_for(c, log);
    run_through_train(o);
    const cmd::RunPaths p{c.output_dir};
    metrics[r] = read_file(p.train("nested") / "metrics.csv") + read_file(p.train("shared") / "metrics.csv") +
                 cmd::evaluate(o);
  }
  EXPECT_EQ(metrics[0], metrics[1]);
}

TEST(Commands, IdentityEncoderInvertsInOneStep) {
  std::ostringstream log;
  ExperimentConfig c = tiny_config(scratch("identity"));
  c.model.encoder = {LayerSpec::flatten()};
  c.fill.inversion.method = InversionMethod::sgd;
  c.fill.inversion.lr = 0.5;  // x - 0.5 * 2 (x - mu) = mu
  c.fill.inversion.tolerance = 1e-12;
  const auto o = options_for(c, log);
  cmd::gen_data(o);
  cmd::pretrain(o);
  cmd::InvertOptions io;
  io.encoder = cmd::RunPaths{c.output_dir}.subbag_net(1).string();
  io.count = 4;
  const auto runs = cmd::invert(o, io);
  ASSERT_EQ(runs.size(), 4u);
  for (const auto& r : runs) {
    ASSERT_EQ(r.result.trace.size(), 2u);
    EXPECT_GT(r.result.trace[0].second, 0.0);
    EXPECT_EQ(r.result.trace[1].first, 1u);
    EXPECT_LE(r.result.trace[1].second, 1e-12);
    EXPECT_TRUE(r.result.converged);
  }
}

TEST(Commands, PlateauDetection) {
  EXPECT_TRUE(cmd::reached_plateau({{0, 1.0}}));
  std::vector<std::pair<std::size_t, double>> t;
  for (std::size_t i = 0; i <= 100; ++i) t.emplace_back(i, 1.0 / static_cast<double>(i + 1));
  EXPECT_FALSE(cmd::reached_plateau(t));
  for (std::size_t i = 101; i <= 1000; ++i) t.emplace_back(i, t.back().second);
  EXPECT_TRUE(cmd::reached_plateau(t));
}

TEST(Binary, ExitStatus) {
  EXPECT_NE(run_binary(""), 0);
  EXPECT_NE(run_binary("no-such-command"), 0);
  const fs::path out = scratch("binary");
  EXPECT_NE(run_binary("--out " + out.string() + " train"), 0);
  std::ostringstream log;
  const ExperimentConfig c = tiny_config(out);
  const auto o = options_for(c, log);
  EXPECT_EQ(run_binary("--config " + o.config_path + " gen-data"), 0);
  EXPECT_TRUE(fs::exists(out / "data" / "manifest.json"));
  EXPECT_NE(run_binary("--out " + out.string() + " --seed 99 pretrain"), 0);
  EXPECT_EQ(run_binary("--out " + out.string() + " pretrain"), 0);
}
