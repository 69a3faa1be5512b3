#include <CLI11.hpp>
#include <exception>
#include <filesystem>
#include <iostream>

#include "clp/errors.hpp"
#include "clp/pipeline.hpp"

namespace fs = std::filesystem;

int main(int argc, char** argv) {
  CLI::App app{"clp: causal logit perturbation training and evaluation"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_override;
  std::string mode_name = "clp";
  std::string checkpoint;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "INI run configuration")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out_override, "output directory (overrides [run] output_dir)");
  };

  auto* synth = app.add_subcommand("synth", "synthesize train/test/meta datasets");
  add_common(synth);
  auto* train = app.add_subcommand("train", "train a classifier");
  add_common(train);
  train->add_option("--mode", mode_name, "clp, erm or meta_lp")->check(CLI::IsMember({"clp", "erm", "meta_lp"}));
  auto* evalc = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_common(evalc);
  evalc->add_option("--checkpoint", checkpoint, "checkpoint file (default <out>/<mode>.clpw)");
  evalc->add_option("--mode", mode_name, "mode used to locate the default checkpoint")
      ->check(CLI::IsMember({"clp", "erm", "meta_lp"}));
  auto* report = app.add_subcommand("report", "evaluate every checkpoint and write report.json");
  add_common(report);

  CLI11_PARSE(app, argc, argv);

  try {
    const auto cfg = clp::run::load_config(config_path);
    const fs::path out = out_override.empty() ? fs::path(cfg.output_dir) : fs::path(out_override);
    const auto mode = clp::run::parse_mode(mode_name);
    if (*synth) {
      clp::run::cmd_synth(cfg, out, std::cout);
    } else if (*train) {
      clp::run::cmd_train(cfg, mode, out, std::cout);
    } else if (*evalc) {
      const fs::path ck = checkpoint.empty() ? out / (clp::run::to_string(mode) + ".clpw") : fs::path(checkpoint);
      clp::run::cmd_eval(cfg, ck, out, std::cout);
    } else if (*report) {
      clp::run::cmd_report(cfg, out, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
