#pragma once

// Counterfactual and factual metadata augmentation.
//
//   counterfactual: x' = (1 - r) * x + r * xhat   (foreground replaced, label "not y")
//   factual:        x' = r * x + (1 - r) * xhat   (background replaced, label kept)

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "clp/models.hpp"
#include "clp/synthdata.hpp"

namespace clp::aug {

enum class Mode { Counterfactual, Factual };
enum class Method { Grey, Random, Shuffle, Tile, MixRand, Fgsm };
enum class FgsmTarget { RandomOtherClass, Untargeted };

Method parse_method(const std::string& s);
std::string to_string(Method m);
FgsmTarget parse_fgsm_target(const std::string& s);
std::string to_string(FgsmTarget t);

struct InfillSpec {
  Mode mode = Mode::Counterfactual;
  Method method = Method::Grey;
  double epsilon = 0.5;
  FgsmTarget fgsm_target = FgsmTarget::RandomOtherClass;

  // Grey/Tile are counterfactual-only, MixRand/Fgsm factual-only.
  void validate() const;
};

struct ImageGeometry {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t pixels() const noexcept { return height * width; }
};

struct Infill {
  std::vector<float> values;  // 3 x H x W
  bool grey_fallback = false;  // tile found no background to copy
};

// Optional collaborators for the donor- and model-based generators.
struct InfillContext {
  const data::SampleRecord* donor = nullptr;
  const models::Classifier* model = nullptr;
};

Infill infill_value(const data::SampleRecord& sample, const InfillSpec& spec, const ImageGeometry& geom,
                    std::mt19937_64& rng, const InfillContext& ctx = {});

// Pieces of the Random generator: a low-frequency uniform base and the base
// plus per-pixel N(0, 0.2) noise before truncation to [0, 1].
struct RandomInfillParts {
  std::vector<double> base;
  std::vector<double> noisy;
};
inline constexpr std::size_t kRandomCell = 8;
inline constexpr double kRandomNoiseStd = 0.2;
RandomInfillParts random_infill_parts(const ImageGeometry& geom, std::mt19937_64& rng);

// Mask bounding-box strip used by Tile: rows [r0, r1), cols [c0, c1).
struct Rect {
  std::size_t r0 = 0, r1 = 0, c0 = 0, c1 = 0;
  std::size_t area() const noexcept { return (r1 - r0) * (c1 - c0); }
};
std::optional<Rect> largest_background_strip(std::span<const std::uint8_t> mask, const ImageGeometry& geom);

// Mixes x and xhat under the mask for the given mode. No mask checks.
std::vector<float> blend(std::span<const float> x, std::span<const float> xhat, std::span<const std::uint8_t> mask,
                         Mode mode);

data::SampleRecord counterfactual_augment(const data::SampleRecord& sample, const InfillSpec& spec,
                                          const ImageGeometry& geom, std::mt19937_64& rng,
                                          const InfillContext& ctx = {}, bool* grey_fallback = nullptr);
data::SampleRecord factual_augment(const data::SampleRecord& sample, const InfillSpec& spec,
                                   const ImageGeometry& geom, std::mt19937_64& rng, const InfillContext& ctx = {});

struct AugmentPlan {
  double cf_fraction = 0.5;
  Method cf_method = Method::Tile;
  Method f_method = Method::MixRand;
  double epsilon = 0.5;
  FgsmTarget fgsm_target = FgsmTarget::RandomOtherClass;
  std::uint64_t seed = 0;

  void validate() const;
};

struct AugmentSummary {
  std::size_t counterfactual = 0;
  std::size_t factual = 0;
  std::size_t grey_fallbacks = 0;
};

// Returns meta followed by 2 * |meta| augmented samples: the counterfactual
// ones first, then the factual ones. Source k is meta[k mod |meta|] and each
// augmented sample draws from its own stream seeded by seed ^ k.
data::DatasetContainer augment_metadata(const data::DatasetContainer& meta, const AugmentPlan& plan,
                                        const models::Classifier* model = nullptr,
                                        AugmentSummary* summary = nullptr);

}  // namespace clp::aug
