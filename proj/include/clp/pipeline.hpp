#pragma once

// Config-driven pipeline behind the command-line tool:
// synthesize -> augment -> train -> evaluate -> report.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "clp/causalaug.hpp"
#include "clp/evalreport.hpp"
#include "clp/metatrain.hpp"
#include "clp/synthdata.hpp"

namespace clp::run {

struct DataSection {
  data::SpurShapesConfig train;
  std::size_t test_per_cell = 50;
  std::uint64_t test_seed = 1;
  std::size_t meta_per_class = 10;
  std::uint64_t meta_seed = 2;
  double longtail_ratio = 1.0;
  data::NoiseKind noise = data::NoiseKind::None;
  double noise_ratio = 0.0;
  std::uint64_t noise_seed = 3;
};

enum class AugmentMode { Both, Counterfactual, Factual, None };

struct AugmentSection {
  AugmentMode mode = AugmentMode::Both;
  aug::AugmentPlan plan;
};

struct ModelSection {
  std::vector<std::size_t> hidden_widths{256, 128};
  std::size_t pnet_hidden = 100;
  std::uint64_t init_seed = 0;
};

struct EvalSection {
  std::vector<std::size_t> saliency_indices;
};

struct RunConfig {
  std::string run_name = "run";
  std::string output_dir = "out";
  DataSection data;
  AugmentSection augment;
  ModelSection model;
  train::TrainConfig train;
  // The baseline trains with plain cross-entropy unless this is set.
  bool erm_saliency = false;
  EvalSection eval;
};

// Sectioned "key = value" text. Unknown sections or keys are rejected.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
// Canonical dump of every setting; parse_config(dump_config(c)) reproduces c.
std::string dump_config(const RunConfig& cfg);

enum class TrainMode { Clp, Erm, MetaLp };
TrainMode parse_mode(const std::string& s);
std::string to_string(TrainMode m);

struct Datasets {
  data::DatasetContainer train;
  data::DatasetContainer test;
  data::DatasetContainer meta;
};

Datasets synthesize(const RunConfig& cfg);
Datasets load_datasets(const std::filesystem::path& dir);

struct TrainOutcome {
  train::TrainResult result;
  std::size_t meta_size = 0;
  aug::AugmentSummary augment;
};

TrainOutcome run_training(const RunConfig& cfg, TrainMode mode, const Datasets& ds);

models::Checkpoint make_checkpoint(const train::TrainState& st, const RunConfig& cfg);

struct LoadedModel {
  models::Classifier clf;
  models::PerturbNet pnet;
  chars::ClassStats stats;
  chars::FeatureNormalizer norm;
};
LoadedModel load_model(const RunConfig& cfg, const models::Checkpoint& ckpt, std::size_t input_dim,
                       std::size_t classes);

// Commands. Each writes its artifacts under out_dir atomically.
void cmd_synth(const RunConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log);
void cmd_train(const RunConfig& cfg, TrainMode mode, const std::filesystem::path& out_dir, std::ostream& log);
eval::MetricsReport cmd_eval(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                             const std::filesystem::path& out_dir, std::ostream& log);
void cmd_report(const RunConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log);

}  // namespace clp::run
