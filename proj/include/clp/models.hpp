#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "clp/autodiff.hpp"

namespace clp::models {

using ad::Var;

// Named parameter tensors owned by a model. Weights are stored out x in,
// so a layer computes x * W^T + b.
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Tensor> values;

  std::size_t count() const;  // total scalar parameters
  std::vector<Shape> shapes() const;
  // Fresh leaves, one per tensor.
  std::vector<Var> leaves(bool requires_grad) const;
  Tensor flatten() const;
  void assign(const Tensor& flat);
  // Graph-connected views into `flat`: gradients w.r.t. the returned Vars
  // flow back into whatever produced `flat`.
  std::vector<Var> bind(const Var& flat) const;
};

struct ForwardOut {
  Var features;  // penultimate activations (the input itself for a linear model)
  Var logits;
};

// Fully connected ReLU classifier: input_dim -> hidden... -> classes.
class Classifier {
 public:
  Classifier() = default;
  Classifier(std::size_t input_dim, std::vector<std::size_t> hidden, std::size_t classes, std::uint64_t seed);

  std::size_t input_dim() const noexcept { return input_dim_; }
  std::size_t classes() const noexcept { return classes_; }
  const std::vector<std::size_t>& hidden() const noexcept { return hidden_; }
  std::size_t feature_dim() const noexcept { return hidden_.empty() ? input_dim_ : hidden_.back(); }

  ParamSet& params() noexcept { return params_; }
  const ParamSet& params() const noexcept { return params_; }

  // Final-layer weight W^C, classes x feature_dim.
  const Tensor& final_weight() const { return params_.values[params_.values.size() - 2]; }

  ForwardOut forward(std::span<const Var> params, const Var& x) const;
  // Using the stored parameter values as constants.
  ForwardOut forward(const Var& x) const;

 private:
  std::size_t input_dim_ = 0;
  std::vector<std::size_t> hidden_;
  std::size_t classes_ = 0;
  ParamSet params_;
};

// Two-layer MLP mapping the ten training characteristics to a logit
// perturbation. The output layer starts at zero, so delta = 0 initially.
class PerturbNet {
 public:
  static constexpr std::size_t kInputs = 10;

  PerturbNet() = default;
  PerturbNet(std::size_t classes, std::size_t hidden, std::uint64_t seed);

  std::size_t classes() const noexcept { return classes_; }
  std::size_t hidden() const noexcept { return hidden_; }
  ParamSet& params() noexcept { return params_; }
  const ParamSet& params() const noexcept { return params_; }

  // cv: batch x 10 -> delta: batch x classes
  Var forward(std::span<const Var> params, const Var& cv) const;
  Var forward(const Var& cv) const;

 private:
  std::size_t classes_ = 0;
  std::size_t hidden_ = 0;
  ParamSet params_;
};

// Convenience wrappers mirroring the two model entry points.
ForwardOut classify(const Classifier& clf, const Var& x);
Var perturb(const PerturbNet& pnet, const Var& cv);

// CLPW checkpoint: magic "CLPW", u16 version, u32 block count, then per
// block: u16 name length, name bytes, u16 rank, u32 extents, f64 values.
using Checkpoint = std::map<std::string, Tensor>;

void add_params(Checkpoint& ckpt, const std::string& prefix, const ParamSet& params);
// Copies prefix-matching blocks into params; shapes must agree exactly.
void load_params(const Checkpoint& ckpt, const std::string& prefix, ParamSet& params);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace clp::models
