#include <cstdint>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "nmil/commands.hpp"

int main(int argc, char** argv) {
  namespace cmd = nmil::cmd;
  CLI::App app{"Nested multiple instance learning with sub-bag dropout"};
  app.require_subcommand(1);
  app.fallthrough();

  cmd::GlobalOptions g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config_path, "experiment configuration (JSON)")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "top-level seed");
  app.add_option("--out", g.out, "run directory");
  app.add_flag("--deterministic", g.deterministic, "single worker; reproducible outputs");

  auto* gen = app.add_subcommand("gen-data", "render the synthetic dataset and apply instance dropping");
  auto* pre = app.add_subcommand("pretrain", "train the per-sub-bag single-instance nets");
  auto* train = app.add_subcommand("train", "phased training of the nested model and its variants");
  train->add_option("--resume", g.resume, "step checkpoint to continue from")->check(CLI::ExistingFile);
  train->add_option("--variant", g.variant, "nested, shared, nested_i<I> or all");
  auto* eval = app.add_subcommand("evaluate", "test accuracy of trained models and the individual-nets baseline");
  auto* inv = app.add_subcommand("invert", "neutral-instance optimization traces");
  cmd::InvertOptions io;
  inv->add_option("--encoder", io.encoder, "model or network checkpoint (default: trained nested model)");
  inv->add_option("--target", io.target, "from-subbag, or a JSON file holding an embedding");
  inv->add_option("--count", io.count, "number of sub-bags for from-subbag");
  inv->add_option("--subbag", io.subbag, "encoder index for an embedding target");
  auto* abl = app.add_subcommand("ablate", "accuracy drop from dropping each sub-bag");
  auto* rep = app.add_subcommand("report", "summary tables from the run's metrics");

  CLI11_PARSE(app, argc, argv);
  if (*seed_opt) g.seed = seed;

  try {
    if (*gen) cmd::gen_data(g);
    if (*pre) cmd::pretrain(g);
    if (*train) cmd::train(g);
    if (*eval) std::cout << cmd::evaluate(g);
    if (*inv) cmd::invert(g, io);
    if (*abl) cmd::ablate(g);
    if (*rep) std::cout << cmd::report(g);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
