#pragma once

// Losses and the three-step meta-learning loop:
//   1. virtual step   What(Omega) = W - eta1 * grad_W [CE(u + delta(Omega)) + R_sal]
//   2. meta step      Omega <- Omega - eta2 * grad_Omega meta_loss(What(Omega))
//   3. actual step    W <- optimizer step on CE(u + delta(Omega_new)) + R_sal
// plus the plain cross-entropy baseline trainer.

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "clp/characteristics.hpp"
#include "clp/models.hpp"
#include "clp/synthdata.hpp"

namespace clp::train {

using ad::Var;

struct TrainConfig {
  double eta1 = 0.05;
  double eta2 = 1e-3;
  std::size_t batch_n = 32;
  std::size_t batch_m = 32;
  std::size_t iters = 1000;
  double lambda = 0.6;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  // Treat the input gradient inside the saliency term as a constant on the
  // meta path (virtual step and meta loss).
  bool detach_saliency = false;
  // Apply the saliency term to training batches (needs masks).
  bool train_saliency = true;
  double stats_momentum = 0.9;
  double norm_momentum = 0.99;
  double norm_clamp = 5.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// A minibatch laid out for the networks.
struct Batch {
  Tensor x;          // n x 3HW
  Tensor bg_weight;  // n x 3HW, (1 - r) / sum(1 - r) per sample, zero row for all-ones masks
  std::vector<std::size_t> labels;  // loss labels (orig_label for counterfactual samples)
  std::vector<bool> counterfactual;
  std::size_t size() const noexcept { return labels.size(); }
  bool any_counterfactual() const;
  bool all_counterfactual() const;
};

Batch make_batch(const data::DatasetContainer& ds, std::span<const std::size_t> indices);

// Mean -log S(z)_y.
Var ce_loss(const Var& logits, std::span<const std::size_t> labels);
// Mean -log(1 - S(z)_y), with S_y clipped to <= 1 - 1e-12.
Var cf_loss(const Var& logits, std::span<const std::size_t> orig_labels);
// cf_loss on counterfactual rows, ce_loss on the rest, averaged over the batch.
Var routed_loss(const Var& logits, const Batch& batch);
inline constexpr double kCfClip = 1e-12;

// lambda / n * sum_i sum_j (d S(u_i + delta_i)_{y_i} / d x_ij)^2 * bg_weight_ij.
// With create_graph the term stays differentiable w.r.t. the parameters.
Var saliency_reg(const models::Classifier& clf, std::span<const Var> params, const Batch& batch, const Var& delta,
                 double lambda, bool create_graph = true);

struct TrainState {
  models::Classifier clf;
  models::PerturbNet pnet;
  chars::ClassStats stats;
  chars::FeatureNormalizer norm;
  Tensor velocity;  // classifier momentum buffer, flat
  std::size_t iteration = 0;
};

TrainState init_state(models::Classifier clf, models::PerturbNet pnet, const data::DatasetContainer& train_ds,
                      const TrainConfig& cfg);

// Unperturbed forward pass summary used for characteristics.
struct BatchChars {
  std::vector<chars::CharVector> raw;
  std::vector<chars::ClassObservation> observations;
};
BatchChars batch_characteristics(const Tensor& logits, const Tensor& features, const Batch& batch,
                                 const Tensor& final_weight, const chars::ClassStats& stats);
// Raw characteristics at the given classifier parameter values.
BatchChars batch_characteristics(const models::Classifier& clf, std::span<const Tensor> params, const Batch& batch,
                                 const chars::ClassStats& stats);

// Eq. 8 style lookahead: returns What as graph-connected Vars.
std::vector<Var> inner_virtual_step(const models::Classifier& clf, std::span<const Var> w, const Batch& batch,
                                    const Tensor& cv, const models::PerturbNet& pnet, std::span<const Var> omega,
                                    const TrainConfig& cfg);

// Meta objective at What with fixed (normalized) meta characteristics.
Var meta_objective(const models::Classifier& clf, std::span<const Var> w_hat, const Batch& meta,
                   const Tensor& meta_cv, const models::PerturbNet& pnet, std::span<const Var> omega,
                   const TrainConfig& cfg);

struct MetaStepResult {
  Tensor omega;  // updated flat parameters
  double meta_loss = 0.0;
};
// Runs the virtual step and one gradient step on the perturbation network.
MetaStepResult meta_update(const TrainState& state, const Batch& batch, const Tensor& cv, const Batch& meta,
                           const TrainConfig& cfg);

// Classifier update with Omega fixed; returns the batch loss before the step.
// A null pnet means delta = 0.
double actual_step(TrainState& state, const Batch& batch, const Tensor* cv, const TrainConfig& cfg, bool use_pnet);

struct IterationRecord {
  std::size_t iter = 0;
  double train_loss = 0.0;
  double meta_loss = 0.0;
  bool has_meta = false;
  friend bool operator==(const IterationRecord&, const IterationRecord&) = default;
};

struct TrainResult {
  TrainState state;
  std::vector<IterationRecord> history;
};

TrainResult train(const TrainConfig& cfg, TrainState state, const data::DatasetContainer& train_ds,
                  const data::DatasetContainer& meta_ds);
TrainResult train_erm(const TrainConfig& cfg, TrainState state, const data::DatasetContainer& train_ds);

// Shuffled-epoch index stream over a dataset.
class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::uint64_t seed);
  std::vector<std::size_t> next(std::size_t batch);

 private:
  std::size_t n_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

}  // namespace clp::train
