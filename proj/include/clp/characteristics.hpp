#pragma once

// The ten per-sample training characteristics fed to the perturbation
// network, and the class-level running statistics they depend on.
//
//   g1  sample loss
//   g2  margin  S(u)_y - max_{j!=y} S(u)_j
//   g3  ||onehot(y) - S(u)||_2 (logit-gradient norm of CE)
//   g4  cos(feature, W^C_y)
//   g5  softmax entropy in bits
//   g6  class proportion N_y / N
//   g7  running class mean loss
//   g8  ||W^C_y||_2^2
//   g9  g1 - g7
//   g10 g2 - running class mean margin
//
// Counterfactual samples use their original label y for the class-level
// entries and report the negated margin (how strongly the model avoids y).

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "clp/tensor.hpp"

namespace clp::chars {

inline constexpr std::size_t kNumCharacteristics = 10;

struct CharVector {
  std::array<double, kNumCharacteristics> g{};
  // Set when the feature or weight row had zero norm and g4 was defined as 0.
  bool cosine_degenerate = false;

  // 1-based, matching g1..g10.
  double operator()(std::size_t i) const { return g.at(i - 1); }
  double& operator()(std::size_t i) { return g.at(i - 1); }

  friend bool operator==(const CharVector&, const CharVector&) = default;
};

struct ClassObservation {
  std::size_t label;
  double loss;
  double margin;
};

class ClassStats {
 public:
  ClassStats() = default;
  ClassStats(std::vector<std::size_t> class_counts, double momentum = 0.9);

  std::size_t classes() const noexcept { return counts_.size(); }
  std::size_t count(std::size_t y) const { return counts_.at(y); }
  std::size_t total() const noexcept { return total_; }
  double proportion(std::size_t y) const;
  double momentum() const noexcept { return momentum_; }
  bool initialized(std::size_t y) const { return initialized_.at(y); }
  // Throw ContractError for classes never observed.
  double ema_loss(std::size_t y) const;
  double ema_margin(std::size_t y) const;

  // Per class present in the batch: ema <- m*ema + (1-m)*batch_mean; the
  // first observation of a class sets the EMA to the batch mean.
  void update(std::span<const ClassObservation> batch);

  // Raw state for checkpoints.
  Tensor to_tensor() const;
  static ClassStats from_tensor(const Tensor& t);

 private:
  std::vector<std::size_t> counts_;
  std::size_t total_ = 0;
  double momentum_ = 0.9;
  std::vector<double> loss_;
  std::vector<double> margin_;
  std::vector<bool> initialized_;
};

ClassStats update_class_stats(ClassStats stats, std::span<const ClassObservation> batch);

// Margin g2 for a softmax row, negated for counterfactual samples.
double margin(std::span<const double> probs, std::size_t y, bool counterfactual = false);

// Single-sample extraction. logits has C entries, feature F entries;
// final_weight is C x F. loss is g1 (CE, or the counterfactual loss).
CharVector extract(std::span<const double> logits, std::span<const double> feature, std::size_t y,
                   const Tensor& final_weight, const ClassStats& stats, double loss, bool counterfactual = false);

// Streaming per-feature z-scoring with EMA mean/variance, clamped to [-kappa, kappa].
class FeatureNormalizer {
 public:
  explicit FeatureNormalizer(double momentum = 0.99, double kappa = 5.0);

  double momentum() const noexcept { return momentum_; }
  double kappa() const noexcept { return kappa_; }
  std::uint64_t updates() const noexcept { return updates_; }
  const std::array<double, kNumCharacteristics>& mean() const noexcept { return mean_; }
  const std::array<double, kNumCharacteristics>& variance() const noexcept { return var_; }

  void update(const CharVector& cv);
  // Requires at least one prior update.
  CharVector transform(const CharVector& cv) const;
  // update then transform.
  CharVector normalize(const CharVector& cv);

  Tensor to_tensor() const;
  static FeatureNormalizer from_tensor(const Tensor& t);

 private:
  double momentum_;
  double kappa_;
  std::uint64_t updates_ = 0;
  std::array<double, kNumCharacteristics> mean_{};
  std::array<double, kNumCharacteristics> var_{};
};

CharVector normalize(const CharVector& cv, FeatureNormalizer& norm);

// Packs a batch of CharVectors into an N x 10 tensor.
Tensor stack(std::span<const CharVector> batch);

}  // namespace clp::chars
