#include "clp/causalaug.hpp"

#include <algorithm>
#include <cmath>

#include "clp/errors.hpp"

namespace clp::aug {

using data::SampleRecord;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

bool in_region(std::uint8_t m, Mode mode) { return mode == Mode::Counterfactual ? m != 0 : m == 0; }

void check_sample(const SampleRecord& s, const ImageGeometry& geom) {
  if (s.pixels.size() != 3 * geom.pixels() || s.mask.size() != geom.pixels()) {
    throw ShapeError("augment: sample does not match the " + std::to_string(geom.height) + "x" +
                     std::to_string(geom.width) + " geometry");
  }
}

std::vector<float> grey(const ImageGeometry& geom) { return std::vector<float>(3 * geom.pixels(), 0.5f); }

std::vector<float> tile_fill(const SampleRecord& s, const ImageGeometry& geom, bool& fallback) {
  const auto strip = largest_background_strip(s.mask, geom);
  if (!strip) {
    fallback = true;
    return grey(geom);
  }
  const std::size_t H = geom.height, W = geom.width;
  const std::size_t sh = strip->r1 - strip->r0, sw = strip->c1 - strip->c0;
  std::vector<float> out(3 * H * W);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < H; ++i) {
      for (std::size_t j = 0; j < W; ++j) {
        out[(c * H + i) * W + j] = s.pixels[(c * H + strip->r0 + i % sh) * W + strip->c0 + j % sw];
      }
    }
  }
  return out;
}

std::vector<float> shuffle_fill(const SampleRecord& s, const ImageGeometry& geom, Mode mode, std::mt19937_64& rng) {
  const std::size_t G = geom.pixels();
  std::vector<std::size_t> pos;
  for (std::size_t p = 0; p < G; ++p) {
    if (in_region(s.mask[p], mode)) pos.push_back(p);
  }
  auto src = pos;
  std::shuffle(src.begin(), src.end(), rng);
  std::vector<float> out = s.pixels;
  for (std::size_t k = 0; k < pos.size(); ++k) {
    for (std::size_t c = 0; c < 3; ++c) out[c * G + pos[k]] = s.pixels[c * G + src[k]];
  }
  return out;
}

std::vector<float> random_fill(const ImageGeometry& geom, std::mt19937_64& rng) {
  auto parts = random_infill_parts(geom, rng);
  std::vector<float> out(parts.noisy.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(std::clamp(parts.noisy[i], 0.0, 1.0));
  return out;
}

std::vector<float> fgsm_fill(const SampleRecord& s, const InfillSpec& spec, const models::Classifier& model,
                             std::mt19937_64& rng) {
  const std::size_t D = s.pixels.size();
  if (model.input_dim() != D) throw ShapeError("fgsm: classifier input width does not match the image");
  const std::size_t C = model.classes();
  std::size_t target = s.orig_label;
  if (spec.fgsm_target == FgsmTarget::RandomOtherClass) {
    std::uniform_int_distribution<std::size_t> pick(0, C - 2);
    target = pick(rng);
    if (target >= s.orig_label) ++target;
  }
  Tensor xt(Shape{1, D});
  for (std::size_t i = 0; i < D; ++i) xt[i] = s.pixels[i];
  const ad::Var x = ad::Var::leaf(xt, true);
  const std::size_t idx[1] = {target};
  const ad::Var loss = ad::neg(ad::sum(ad::row_gather(ad::log_softmax(model.forward(x).logits), idx)));
  const Tensor g = ad::grad(loss, x).value();
  // Targeted: descend the loss of the target class. Untargeted: ascend the true-class loss.
  const double dir = spec.fgsm_target == FgsmTarget::RandomOtherClass ? -1.0 : 1.0;
  std::vector<float> out(D);
  for (std::size_t i = 0; i < D; ++i) {
    const double sg = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
    out[i] = static_cast<float>(std::clamp(xt[i] + dir * spec.epsilon * sg, 0.0, 1.0));
  }
  return out;
}

std::size_t mask_count(const SampleRecord& s) {
  return static_cast<std::size_t>(std::count_if(s.mask.begin(), s.mask.end(), [](std::uint8_t m) { return m != 0; }));
}

}  // namespace

Method parse_method(const std::string& s) {
  if (s == "grey") return Method::Grey;
  if (s == "random") return Method::Random;
  if (s == "shuffle") return Method::Shuffle;
  if (s == "tile") return Method::Tile;
  if (s == "mix_rand") return Method::MixRand;
  if (s == "fgsm") return Method::Fgsm;
  throw ConfigError("unknown infill method '" + s + "' (grey, random, shuffle, tile, mix_rand, fgsm)");
}

std::string to_string(Method m) {
  switch (m) {
    case Method::Grey: return "grey";
    case Method::Random: return "random";
    case Method::Shuffle: return "shuffle";
    case Method::Tile: return "tile";
    case Method::MixRand: return "mix_rand";
    case Method::Fgsm: return "fgsm";
  }
  return "?";
}

FgsmTarget parse_fgsm_target(const std::string& s) {
  if (s == "random_other_class") return FgsmTarget::RandomOtherClass;
  if (s == "untargeted") return FgsmTarget::Untargeted;
  throw ConfigError("unknown fgsm_target '" + s + "' (random_other_class, untargeted)");
}

std::string to_string(FgsmTarget t) {
  return t == FgsmTarget::RandomOtherClass ? "random_other_class" : "untargeted";
}

void InfillSpec::validate() const {
  const bool cf = mode == Mode::Counterfactual;
  if (cf && (method == Method::MixRand || method == Method::Fgsm)) {
    throw ConfigError(to_string(method) + " infill is only valid for factual augmentation");
  }
  if (!cf && (method == Method::Grey || method == Method::Tile)) {
    throw ConfigError(to_string(method) + " infill is only valid for counterfactual augmentation");
  }
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ConfigError("fgsm epsilon must be positive");
}

RandomInfillParts random_infill_parts(const ImageGeometry& geom, std::mt19937_64& rng) {
  const std::size_t H = geom.height, W = geom.width;
  const std::size_t gh = (H + kRandomCell - 1) / kRandomCell, gw = (W + kRandomCell - 1) / kRandomCell;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> n(0.0, kRandomNoiseStd);
  std::vector<double> grid(3 * gh * gw);
  for (auto& v : grid) v = u(rng);
  RandomInfillParts parts;
  parts.base.resize(3 * H * W);
  parts.noisy.resize(3 * H * W);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < H; ++i) {
      for (std::size_t j = 0; j < W; ++j) {
        const std::size_t k = (c * H + i) * W + j;
        parts.base[k] = grid[(c * gh + i / kRandomCell) * gw + j / kRandomCell];
        parts.noisy[k] = parts.base[k] + n(rng);
      }
    }
  }
  return parts;
}

std::optional<Rect> largest_background_strip(std::span<const std::uint8_t> mask, const ImageGeometry& geom) {
  const std::size_t H = geom.height, W = geom.width;
  std::size_t r0 = H, r1 = 0, c0 = W, c1 = 0;
  for (std::size_t i = 0; i < H; ++i) {
    for (std::size_t j = 0; j < W; ++j) {
      if (mask[i * W + j] == 0) continue;
      r0 = std::min(r0, i);
      r1 = std::max(r1, i + 1);
      c0 = std::min(c0, j);
      c1 = std::max(c1, j + 1);
    }
  }
  if (r0 >= r1) return Rect{0, H, 0, W};
  const Rect strips[4] = {{0, r0, 0, W}, {r1, H, 0, W}, {0, H, 0, c0}, {0, H, c1, W}};
  const Rect* best = nullptr;
  for (const auto& s : strips) {
    if (s.area() > 0 && (!best || s.area() > best->area())) best = &s;
  }
  if (!best) return std::nullopt;
  return *best;
}

Infill infill_value(const SampleRecord& sample, const InfillSpec& spec, const ImageGeometry& geom,
                    std::mt19937_64& rng, const InfillContext& ctx) {
  check_sample(sample, geom);
  Infill out;
  switch (spec.method) {
    case Method::Grey:
      out.values = grey(geom);
      break;
    case Method::Random:
      out.values = random_fill(geom, rng);
      break;
    case Method::Shuffle:
      out.values = shuffle_fill(sample, geom, spec.mode, rng);
      break;
    case Method::Tile:
      out.values = tile_fill(sample, geom, out.grey_fallback);
      break;
    case Method::MixRand: {
      if (!ctx.donor) throw AugmentError("mix_rand needs a donor sample from a different class");
      if (ctx.donor->orig_label == sample.orig_label) throw AugmentError("mix_rand donor must come from a different class");
      check_sample(*ctx.donor, geom);
      bool fb = false;
      const auto bg = tile_fill(*ctx.donor, geom, fb);
      out.values = blend(ctx.donor->pixels, bg, ctx.donor->mask, Mode::Counterfactual);
      out.grey_fallback = fb;
      break;
    }
    case Method::Fgsm:
      if (!ctx.model) throw AugmentError("fgsm infill needs a classifier");
      out.values = fgsm_fill(sample, spec, *ctx.model, rng);
      break;
  }
  return out;
}

std::vector<float> blend(std::span<const float> x, std::span<const float> xhat, std::span<const std::uint8_t> mask,
                         Mode mode) {
  const std::size_t G = mask.size();
  std::vector<float> out(x.begin(), x.end());
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t p = 0; p < G; ++p) {
      if (in_region(mask[p], mode)) out[c * G + p] = xhat[c * G + p];
    }
  }
  return out;
}

SampleRecord counterfactual_augment(const SampleRecord& sample, const InfillSpec& spec, const ImageGeometry& geom,
                                    std::mt19937_64& rng, const InfillContext& ctx, bool* grey_fallback) {
  if (spec.mode != Mode::Counterfactual) throw ContractError("counterfactual_augment needs a counterfactual spec");
  spec.validate();
  check_sample(sample, geom);
  if (mask_count(sample) == 0) throw AugmentError("counterfactual augmentation needs a non-empty mask");
  const Infill fill = infill_value(sample, spec, geom, rng, ctx);
  if (grey_fallback) *grey_fallback = fill.grey_fallback;
  SampleRecord out = sample;
  out.pixels = blend(sample.pixels, fill.values, sample.mask, Mode::Counterfactual);
  out.label = sample.orig_label;
  out.flags = static_cast<std::uint8_t>((sample.flags & ~data::kFactual) | data::kCounterfactual);
  return out;
}

SampleRecord factual_augment(const SampleRecord& sample, const InfillSpec& spec, const ImageGeometry& geom,
                             std::mt19937_64& rng, const InfillContext& ctx) {
  if (spec.mode != Mode::Factual) throw ContractError("factual_augment needs a factual spec");
  spec.validate();
  check_sample(sample, geom);
  if (mask_count(sample) == 0) throw AugmentError("factual augmentation needs a non-empty mask");
  const Infill fill = infill_value(sample, spec, geom, rng, ctx);
  SampleRecord out = sample;
  out.pixels = blend(sample.pixels, fill.values, sample.mask, Mode::Factual);
  out.flags = static_cast<std::uint8_t>((sample.flags & ~data::kCounterfactual) | data::kFactual);
  return out;
}

void AugmentPlan::validate() const {
  if (!(cf_fraction >= 0.0 && cf_fraction <= 1.0)) throw ConfigError("cf_fraction must lie in [0,1]");
  if (cf_fraction > 0.0) InfillSpec{Mode::Counterfactual, cf_method, epsilon, fgsm_target}.validate();
  if (cf_fraction < 1.0) InfillSpec{Mode::Factual, f_method, epsilon, fgsm_target}.validate();
}

data::DatasetContainer augment_metadata(const data::DatasetContainer& meta, const AugmentPlan& plan,
                                        const models::Classifier* model, AugmentSummary* summary) {
  plan.validate();
  if (meta.empty()) throw ContractError("augment_metadata: metadata is empty");
  const std::size_t M = meta.size();
  const std::size_t total = 2 * M;
  const auto n_cf = static_cast<std::size_t>(std::llround(plan.cf_fraction * static_cast<double>(total)));
  const ImageGeometry geom{meta.height(), meta.width()};
  const InfillSpec cf_spec{Mode::Counterfactual, plan.cf_method, plan.epsilon, plan.fgsm_target};
  const InfillSpec f_spec{Mode::Factual, plan.f_method, plan.epsilon, plan.fgsm_target};

  AugmentSummary sum;
  std::vector<SampleRecord> out = meta.samples();
  out.reserve(M + total);
  for (std::size_t k = 0; k < total; ++k) {
    const SampleRecord& src = meta[k % M];
    std::mt19937_64 rng(splitmix64(plan.seed ^ k));
    const bool cf = k < n_cf;
    const InfillSpec& spec = cf ? cf_spec : f_spec;
    InfillContext ctx;
    ctx.model = model;
    if (spec.method == Method::MixRand) {
      std::vector<std::size_t> donors;
      for (std::size_t i = 0; i < M; ++i) {
        if (meta[i].orig_label != src.orig_label) donors.push_back(i);
      }
      if (donors.empty()) throw AugmentError("mix_rand: no metadata sample from a different class");
      std::uniform_int_distribution<std::size_t> pick(0, donors.size() - 1);
      ctx.donor = &meta[donors[pick(rng)]];
    }
    if (cf) {
      bool fb = false;
      out.push_back(counterfactual_augment(src, spec, geom, rng, ctx, &fb));
      sum.grey_fallbacks += fb ? 1 : 0;
      ++sum.counterfactual;
    } else {
      out.push_back(factual_augment(src, spec, geom, rng, ctx));
      ++sum.factual;
    }
  }
  if (summary) *summary = sum;

  data::Provenance prov = meta.provenance();
  prov.steps.push_back("augment cf=" + std::to_string(sum.counterfactual) + ":" + to_string(plan.cf_method) +
                       " f=" + std::to_string(sum.factual) + ":" + to_string(plan.f_method) +
                       " seed=" + std::to_string(plan.seed));
  return data::DatasetContainer(meta.num_classes(), meta.height(), meta.width(), std::move(out), std::move(prov));
}

}  // namespace clp::aug
