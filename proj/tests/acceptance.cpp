// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails. Tolerances and the benchmark configuration are
// fixed here.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "clp/causalaug.hpp"
#include "clp/characteristics.hpp"
#include "clp/evalreport.hpp"
#include "clp/gradcheck.hpp"
#include "clp/metatrain.hpp"
#include "clp/pipeline.hpp"

using namespace clp;
using ad::Var;
namespace fs = std::filesystem;

namespace {

// ---- pinned tolerances and settings ------------------------------------------

constexpr double kFirstOrderTol = 1e-4;
constexpr double kSecondOrderTol = 1e-3;
constexpr double kAutodiffBudgetSec = 30.0;
constexpr std::size_t kAutodiffMaxParams = 2000;
constexpr std::size_t kEquivalenceIters = 200;
constexpr double kUniformEntropyTol = 1e-9;
constexpr double kIdentityTol = 1e-12;

constexpr std::uint64_t kBenchSeed = 7;
constexpr double kBenchBudgetSec = 600.0;
constexpr double kErmGapPoints = 0.15;     // (a) ERM worst < ERM top1 - 15 points
constexpr double kClpLiftPoints = 0.10;    // (b) CLP worst >= ERM worst + 10 points
constexpr std::size_t kSaliencyImages = 50;
constexpr double kSaliencyShare = 0.70;

constexpr double kNoiseRatio = 0.4;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Var C(Tensor t) { return Var::constant(std::move(t)); }

Tensor randn(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> d(0.0, sd);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

data::SpurShapesConfig spur(std::size_t hw, std::size_t per_class, double rho, std::uint64_t seed) {
  data::SpurShapesConfig c;
  c.height = hw;
  c.width = hw;
  c.n_per_class = per_class;
  c.spuriousness = rho;
  c.seed = seed;
  return c;
}

// 16x16 SpurShapes downsampled to 2x2 so FD instances stay under the
// parameter cap.
data::DatasetContainer tiny_images(std::size_t per_class, std::uint64_t seed) {
  const auto ds = data::synth_spurshapes(spur(16, per_class, 0.9, seed));
  std::vector<data::SampleRecord> v;
  for (const auto& r : ds.samples()) {
    data::SampleRecord n = r;
    n.pixels.assign(12, 0.0f);
    n.mask = {1, 0, 0, 1};
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) n.pixels[(c * 2 + i) * 2 + j] = r.pixels[(c * 16 + i * 8 + 4) * 16 + j * 8 + 4];
    v.push_back(std::move(n));
  }
  return data::DatasetContainer(ds.num_classes(), 2, 2, std::move(v));
}

std::vector<std::size_t> iota_n(std::size_t n, std::size_t start = 0) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = start + i;
  return v;
}

// ---- 1. autodiff ----------------------------------------------------------------

Outcome autodiff_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(11);
  double worst1 = 0.0, worst2 = 0.0;
  std::string worst1_name, worst2_name;
  auto first = [&](const char* name, const ad::ScalarFn& f, const Tensor& x) {
    const double e = ad::finite_diff_check(f, x);
    if (e > worst1) worst1 = e, worst1_name = name;
  };
  auto second = [&](const char* name, const ad::ScalarFn& f, const Tensor& x) {
    const double e = ad::finite_diff_check(f, x);
    if (e > worst2) worst2 = e, worst2_name = name;
  };

  const Tensor a = randn({3, 4}, rng);
  Tensor pos = randn({3, 4}, rng);
  for (auto& v : pos.data()) v = 0.5 + std::abs(v);
  const Var b = C(randn({3, 4}, rng));
  const Var w = C(randn({3, 4}, rng));
  const Var m45 = C(randn({4, 5}, rng));
  const Var m54 = C(randn({5, 4}, rng));
  const Var m35 = C(randn({3, 5}, rng));
  const std::vector<std::size_t> idx{1, 3, 0};
  auto weighted = [&](Var y) {
    if (y.shape() == w.shape()) return ad::sum(ad::mul(y, w));
    return ad::sum(ad::mul(y, C(Tensor(y.shape(), 0.7))));
  };
  using namespace ad;
  first("add", [&](const Var& x) { return weighted(add(x, b)); }, a);
  first("sub", [&](const Var& x) { return weighted(sub(b, x)); }, a);
  first("mul", [&](const Var& x) { return weighted(mul(x, x)); }, a);
  first("div", [&](const Var& x) { return weighted(div(b, x)); }, pos);
  first("matmul_nn", [&](const Var& x) { return sum(square(matmul(x, m45))); }, a);
  first("matmul_nt", [&](const Var& x) { return sum(square(matmul(x, m54, simd::Layout::NT))); }, a);
  first("matmul_tn", [&](const Var& x) { return sum(square(matmul(x, m35, simd::Layout::TN))); }, a);
  first("relu", [&](const Var& x) { return weighted(relu(x)); }, a);
  first("tanh", [&](const Var& x) { return weighted(tanh(x)); }, a);
  first("exp", [&](const Var& x) { return weighted(exp(x)); }, a);
  first("log", [&](const Var& x) { return weighted(log(x)); }, pos);
  first("sqrt", [&](const Var& x) { return weighted(sqrt(x)); }, pos);
  first("square", [&](const Var& x) { return weighted(square(x)); }, a);
  first("scale", [&](const Var& x) { return weighted(scale(x, -2.5)); }, a);
  first("clamp", [&](const Var& x) { return weighted(clamp(x, -0.7, 0.9)); }, a);
  first("mean", [&](const Var& x) { return mul(mean(x), mean(square(x))); }, a);
  first("softmax", [&](const Var& x) { return weighted(softmax(x)); }, a);
  first("log_softmax", [&](const Var& x) { return weighted(log_softmax(x)); }, a);
  first("row_gather", [&](const Var& x) { return sum(square(row_gather(x, idx))); }, a);
  first("expand_reduce", [&](const Var& x) { return weighted(expand(reduce_to(square(x), {3, 1}), {3, 4})); }, a);
  first("pad", [&](const Var& x) { return sum(square(pad(x, 2, {20}))); }, a);

  // Both networks, first order over every parameter.
  const auto ds = tiny_images(6, 3);
  const train::Batch batch = train::make_batch(ds, iota_n(8, 2));
  models::Classifier clf(12, {24, 12}, 4, 5);
  models::PerturbNet pnet(4, 16, 6);
  {
    Tensor flat = pnet.params().flatten();
    for (auto& v : flat.data()) v = std::normal_distribution<double>(0.0, 0.5)(rng);
    pnet.params().assign(flat);
  }
  std::size_t total = clf.params().count() + pnet.params().count();
  if (total > kAutodiffMaxParams) return {false, "instance exceeds the parameter cap"};
  const Tensor cv = randn({8, 10}, rng);
  first("classifier", [&](const Var& flat) {
    return train::ce_loss(clf.forward(clf.params().bind(flat), C(batch.x)).logits, batch.labels);
  }, clf.params().flatten());
  first("perturbation_net", [&](const Var& flat) {
    return weighted(reshape(slice(pnet.forward(pnet.params().bind(flat), C(cv)), 0, {12}), {3, 4}));
  }, pnet.params().flatten());

  // Second order: saliency term and the full meta objective through the virtual step.
  train::TrainConfig cfg;
  cfg.eta1 = 0.3;
  cfg.lambda = 0.8;
  const Var delta = C(randn({8, 4}, rng, 0.3));
  second("saliency", [&](const Var& flat) {
    return train::saliency_reg(clf, clf.params().bind(flat), batch, delta, cfg.lambda, true);
  }, clf.params().flatten());

  aug::AugmentPlan plan;
  plan.cf_method = aug::Method::Grey;
  plan.f_method = aug::Method::Shuffle;
  const auto meta_ds = aug::augment_metadata(data::draw_meta_subset(ds, 2, 4).meta, plan);
  std::vector<std::size_t> midx{0, 3, 8, 11, 17, 22};
  const train::Batch meta = train::make_batch(meta_ds, midx);
  const Tensor mcv = randn({midx.size(), 10}, rng);
  second("meta_objective", [&](const Var& flat) {
    auto om = pnet.params().bind(flat);
    auto wv = clf.params().leaves(true);
    auto wh = train::inner_virtual_step(clf, wv, batch, cv, pnet, om, cfg);
    return train::meta_objective(clf, wh, meta, mcv, pnet, om, cfg);
  }, pnet.params().flatten());

  const double secs = seconds_since(t0);
  const bool ok = worst1 <= kFirstOrderTol && worst2 <= kSecondOrderTol && secs < kAutodiffBudgetSec && meta.any_counterfactual();
  return {ok, fmt("first-order max rel %.2e (%s) <= %.0e, second-order max rel %.2e (%s) <= %.0e, %zu params, %.1fs < %.0fs",
                  worst1, worst1_name.c_str(), kFirstOrderTol, worst2, worst2_name.c_str(), kSecondOrderTol, total, secs,
                  kAutodiffBudgetSec)};
}

// ---- 2. baseline equivalence ----------------------------------------------------

Outcome baseline_equivalence() {
  const auto ds = data::synth_spurshapes(spur(16, 40, 0.9, 21));
  const auto meta = aug::augment_metadata(data::draw_meta_subset(ds, 5, 22).meta, aug::AugmentPlan{});
  train::TrainConfig cfg;
  cfg.iters = kEquivalenceIters;
  cfg.eta1 = 0.01;
  cfg.eta2 = 0.0;
  cfg.batch_n = 16;
  cfg.batch_m = 16;
  cfg.seed = 23;
  auto st = train::init_state(models::Classifier(3 * 256, {16}, 4, 24), models::PerturbNet(4, 12, 25), ds, cfg);
  const auto clp = train::train(cfg, st, ds, meta);
  const auto erm = train::train_erm(cfg, st, ds);
  const Tensor a = clp.state.clf.params().flatten();
  const Tensor b = erm.state.clf.params().flatten();
  std::size_t diff = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) diff += a[i] != b[i];
  std::size_t hist = 0;
  for (std::size_t t = 0; t < cfg.iters; ++t) hist += clp.history[t].train_loss != erm.history[t].train_loss;
  const bool ok = diff == 0 && hist == 0 && clp.history.size() == kEquivalenceIters;
  return {ok, fmt("%zu iterations, %zu differing weights of %zu, %zu differing losses", cfg.iters, diff, a.numel(), hist)};
}

// ---- 3. augmentation algebra ----------------------------------------------------

Outcome augmentation_algebra() {
  const auto ds = data::synth_spurshapes(spur(16, 10, 0.8, 31));
  const aug::ImageGeometry geom{16, 16};
  const std::size_t G = geom.pixels(), D = 3 * G;
  std::size_t violations = 0, checks = 0;
  auto expect = [&](bool c) { ++checks; violations += c ? 0 : 1; };

  for (std::size_t i = 0; i < ds.size(); i += 3) {
    const auto& s = ds[i];
    std::mt19937_64 rng(100 + i);
    // complementarity of the two blends with a shared infill
    const auto xhat = aug::infill_value(s, {aug::Mode::Counterfactual, aug::Method::Random}, geom, rng).values;
    const auto xc = aug::blend(s.pixels, xhat, s.mask, aug::Mode::Counterfactual);
    const auto xf = aug::blend(s.pixels, xhat, s.mask, aug::Mode::Factual);
    for (std::size_t k = 0; k < D; ++k) expect(xc[k] + xf[k] == s.pixels[k] + xhat[k]);

    for (auto m : {aug::Method::Grey, aug::Method::Random, aug::Method::Shuffle, aug::Method::Tile}) {
      auto o = aug::counterfactual_augment(s, {aug::Mode::Counterfactual, m}, geom, rng);
      for (std::size_t k = 0; k < D; ++k) {
        if (!s.mask[k % G]) expect(o.pixels[k] == s.pixels[k]);
        else if (m == aug::Method::Grey) expect(o.pixels[k] == 0.5f);
      }
    }
    for (auto m : {aug::Method::Random, aug::Method::Shuffle}) {
      auto o = aug::factual_augment(s, {aug::Mode::Factual, m}, geom, rng);
      for (std::size_t k = 0; k < D; ++k)
        if (s.mask[k % G]) expect(o.pixels[k] == s.pixels[k]);
    }
    // shuffle keeps the region's pixel multiset
    auto region = [&](std::span<const float> px, bool fg) {
      std::vector<std::array<float, 3>> out;
      for (std::size_t p = 0; p < G; ++p)
        if ((s.mask[p] != 0) == fg) out.push_back({px[p], px[G + p], px[2 * G + p]});
      std::sort(out.begin(), out.end());
      return out;
    };
    auto sc = aug::counterfactual_augment(s, {aug::Mode::Counterfactual, aug::Method::Shuffle}, geom, rng);
    expect(region(sc.pixels, true) == region(s.pixels, true));
    auto sf = aug::factual_augment(s, {aug::Mode::Factual, aug::Method::Shuffle}, geom, rng);
    expect(region(sf.pixels, false) == region(s.pixels, false));
  }

  // FGSM against a linear softmax model with an analytic input gradient.
  models::Classifier clf(D, {}, 4, 33);
  const Tensor& W = clf.params().values[0];
  const Tensor& bias = clf.params().values[1];
  const double eps = 0.25;
  std::size_t changed = 0;
  for (std::size_t i = 0; i < ds.size(); i += 5) {
    const auto& s = ds[i];
    aug::InfillSpec spec{aug::Mode::Factual, aug::Method::Fgsm, eps, aug::FgsmTarget::Untargeted};
    std::mt19937_64 rng(7 + i);
    std::array<double, 4> u{};
    for (std::size_t j = 0; j < 4; ++j) {
      u[j] = bias[j];
      for (std::size_t k = 0; k < D; ++k) u[j] += W.at(j, k) * s.pixels[k];
    }
    const double mx = *std::max_element(u.begin(), u.end());
    double z = 0.0;
    for (double v : u) z += std::exp(v - mx);
    std::vector<double> g(D, 0.0);
    for (std::size_t j = 0; j < 4; ++j) {
      const double coef = std::exp(u[j] - mx) / z - (j == s.label ? 1.0 : 0.0);
      for (std::size_t k = 0; k < D; ++k) g[k] += coef * W.at(j, k);
    }
    auto out = aug::factual_augment(s, spec, geom, rng, {nullptr, &clf});
    for (std::size_t k = 0; k < D; ++k) {
      if (s.mask[k % G]) {
        expect(out.pixels[k] == s.pixels[k]);
        continue;
      }
      const double sg = g[k] > 0 ? 1.0 : (g[k] < 0 ? -1.0 : 0.0);
      expect(out.pixels[k] == static_cast<float>(std::clamp(s.pixels[k] + eps * sg, 0.0, 1.0)));
      if (out.pixels[k] != s.pixels[k]) ++changed;
    }
  }
  expect(changed > 0);
  return {violations == 0, fmt("%zu exact checks, %zu violations", checks, violations)};
}

// ---- 4. bias construction -------------------------------------------------------

Outcome bias_construction() {
  std::vector<std::string> bad;
  // geometric schedule, floor(1000 * 100^(-k/9)) from a 50-digit evaluation
  const std::vector<std::size_t> want{1000, 599, 359, 215, 129, 77, 46, 27, 16, 10};
  std::vector<data::SampleRecord> v;
  for (std::uint16_t k = 0; k < 10; ++k)
    for (std::size_t i = 0; i < 1000; ++i) {
      data::SampleRecord r;
      r.pixels = {0.1f * k, static_cast<float>(i) / 1000.0f, 0.5f};
      r.mask = {1};
      r.label = r.orig_label = r.group = k;
      v.push_back(std::move(r));
    }
  const data::DatasetContainer bal(10, 1, 1, std::move(v));
  if (data::apply_longtail(bal, 100.0, 5).class_counts() != want) bad.push_back("long-tail counts");

  const auto uni = data::inject_label_noise(bal, data::NoiseKind::Uniform, 0.37, 6);
  std::size_t flipped = 0;
  for (const auto& s : uni.samples()) flipped += s.noised() && s.label != s.orig_label;
  if (flipped != static_cast<std::size_t>(std::floor(0.37 * 10000))) bad.push_back("uniform noise count");

  const auto flip = data::inject_label_noise(bal, data::NoiseKind::Flip, 0.25, 7);
  std::size_t nflip = 0;
  for (const auto& s : flip.samples()) {
    if (!s.noised()) {
      if (s.label != s.orig_label) bad.push_back("unflagged label change");
      continue;
    }
    ++nflip;
    const int d = (static_cast<int>(s.label) - static_cast<int>(s.orig_label) + 10) % 10;
    if (d != 1 && d != 9) {
      bad.push_back("flip outside designated classes");
      break;
    }
  }
  if (nflip != 2500) bad.push_back("flip noise count");

  const auto noisy = data::inject_label_noise(data::synth_spurshapes(spur(16, 60, 0.9, 8)), data::NoiseKind::Uniform, 0.4, 9);
  const auto split = data::draw_meta_subset(noisy, 10, 10);
  std::set<std::size_t> ids(split.meta_indices.begin(), split.meta_indices.end());
  if (ids.size() != 40 || split.meta.size() != 40 || split.rest.size() + 40 != noisy.size()) bad.push_back("meta sizes");
  for (auto c : split.meta.class_counts())
    if (c != 10) bad.push_back("meta balance");
  for (const auto& s : split.meta.samples())
    if (s.noised() || s.label != s.orig_label) bad.push_back("meta not clean");
  std::size_t r = 0;
  for (std::size_t i = 0; i < noisy.size() && r < split.rest.size(); ++i) {
    if (ids.count(i)) continue;
    if (!(split.rest[r++] == noisy[i])) {
      bad.push_back("meta overlaps remainder");
      break;
    }
  }
  std::string d = fmt("long-tail 1000..10 schedule, uniform %zu/%zu flips, flip %zu on ring neighbours, meta 40 clean",
                      flipped, static_cast<std::size_t>(10000), nflip);
  if (!bad.empty()) d += "; failed: " + bad.front();
  return {bad.empty(), d};
}

// ---- 5. characteristics ---------------------------------------------------------

Outcome characteristic_identities() {
  std::size_t violations = 0;
  double worst_uniform = 0.0;
  auto stats_for = [](std::size_t classes) {
    chars::ClassStats s(std::vector<std::size_t>(classes, 5));
    std::vector<chars::ClassObservation> obs;
    for (std::size_t y = 0; y < classes; ++y) obs.push_back({y, 0.8, 0.1});
    s.update(obs);
    return s;
  };
  std::mt19937_64 rng(41);
  std::normal_distribution<double> n(0.0, 2.0);
  for (std::size_t classes : {2, 3, 4, 7, 10}) {
    const auto stats = stats_for(classes);
    Tensor w({classes, 3});
    for (auto& v : w.data()) v = n(rng);
    std::vector<double> f{0.4, -1.0, 2.0};
    std::vector<double> u(classes, 1.7);
    const auto cu = chars::extract(u, f, 1, w, stats, std::log(static_cast<double>(classes)));
    worst_uniform = std::max(worst_uniform, std::abs(cu(5) - std::log2(static_cast<double>(classes))));

    std::vector<double> perfect(classes, 0.0);
    perfect[1] = 800.0;
    const auto cp = chars::extract(perfect, f, 1, w, stats, 0.0);
    violations += cp(2) != 1.0;
    violations += cp(3) != 0.0;
    violations += cp(5) != 0.0;

    for (int t = 0; t < 100; ++t) {
      for (auto& v : u) v = n(rng);
      for (auto& v : f) v = n(rng);
      const std::size_t y = static_cast<std::size_t>(t) % classes;
      const bool cf = t % 4 == 0;
      const auto cv = chars::extract(u, f, y, w, stats, std::abs(n(rng)), cf);
      violations += cv(9) != cv(1) - cv(7);
      violations += cv(10) != cv(2) - stats.ema_margin(y);
      double z = 0.0, sq = 0.0;
      const double mx = *std::max_element(u.begin(), u.end());
      for (double v : u) z += std::exp(v - mx);
      for (double v : u) sq += std::exp(2 * (v - mx)) / (z * z);
      const double sy = std::exp(u[y] - mx) / z;
      violations += std::abs(cv(3) * cv(3) - (sq + 1.0 - 2.0 * sy)) > kIdentityTol;
    }
  }
  const bool ok = violations == 0 && worst_uniform <= kUniformEntropyTol;
  return {ok, fmt("uniform-entropy error %.1e <= %.0e over C in {2,3,4,7,10}, %zu identity violations", worst_uniform,
                  kUniformEntropyTol, violations)};
}

// ---- 6/8. benchmark and saliency contract ---------------------------------------

run::RunConfig bench_config() {
  run::RunConfig c;
  c.run_name = "bench";
  c.data.train = spur(32, 500, 0.95, kBenchSeed);
  c.data.test_per_cell = 100;
  c.data.test_seed = kBenchSeed + 1000;
  c.data.meta_per_class = 10;
  c.data.meta_seed = kBenchSeed;
  c.augment.mode = run::AugmentMode::Both;
  c.augment.plan.cf_method = aug::Method::Tile;
  c.augment.plan.f_method = aug::Method::MixRand;
  c.augment.plan.seed = kBenchSeed;
  c.model.hidden_widths = {64, 32};
  c.model.pnet_hidden = 100;
  c.model.init_seed = kBenchSeed;
  c.train.iters = 2000;
  c.train.eta1 = 0.01;
  c.train.eta2 = 1e-3;
  c.train.lambda = 0.6;
  c.train.batch_n = 32;
  c.train.batch_m = 32;
  c.train.seed = kBenchSeed;
  return c;
}

struct BenchModels {
  run::Datasets ds;
  train::TrainState erm, clp, meta_lp;
  std::size_t meta_size = 0;
  double seconds = 0.0;
};

BenchModels& bench_models() {
  static BenchModels m = [] {
    const auto t0 = std::chrono::steady_clock::now();
    const auto cfg = bench_config();
    auto ds = run::synthesize(cfg);
    auto erm = run::run_training(cfg, run::TrainMode::Erm, ds);
    auto clp = run::run_training(cfg, run::TrainMode::Clp, ds);
    auto mlp = run::run_training(cfg, run::TrainMode::MetaLp, ds);
    return BenchModels{std::move(ds), std::move(erm.result.state), std::move(clp.result.state),
                       std::move(mlp.result.state), clp.meta_size, seconds_since(t0)};
  }();
  return m;
}

Outcome spurious_benchmark() {
  auto& m = bench_models();
  const auto e = eval::evaluate(m.erm.clf, m.ds.test);
  const auto c = eval::evaluate(m.clp.clf, m.ds.test);
  const auto l = eval::evaluate(m.meta_lp.clf, m.ds.test);
  const bool a = e.worst_group_acc < e.top1_acc - kErmGapPoints;
  const bool b = c.worst_group_acc >= e.worst_group_acc + kClpLiftPoints;
  const bool cc = c.worst_group_acc >= l.worst_group_acc;
  const bool t = m.seconds <= kBenchBudgetSec;
  const bool sizes = m.ds.train.size() + m.ds.meta.size() == 2000 && m.meta_size == 120;
  return {a && b && cc && t && sizes,
          fmt("ERM top1 %.3f worst %.3f (a:%s) | CLP top1 %.3f worst %.3f (b:%s, need >= %.3f) | Meta-LP worst %.3f "
              "(c:%s) | meta %zu, %.0fs <= %.0fs",
              e.top1_acc, e.worst_group_acc, a ? "ok" : "no", c.top1_acc, c.worst_group_acc, b ? "ok" : "no",
              e.worst_group_acc + kClpLiftPoints, l.worst_group_acc, cc ? "ok" : "no", m.meta_size, m.seconds,
              kBenchBudgetSec)};
}

Outcome saliency_contract() {
  // Linear model over (causal, background) features.
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<data::SampleRecord> v;
  for (std::size_t i = 0; i < 200; ++i) {
    data::SampleRecord s;
    const std::uint16_t y = static_cast<std::uint16_t>(i % 2);
    const bool spur_bg = u(rng) < 0.9;
    const float bg = static_cast<float>((spur_bg ? y : 1 - y) * 0.6 + 0.2 * u(rng));
    s.pixels.assign(12, bg);
    for (std::size_t c = 0; c < 3; ++c) s.pixels[c * 4] = static_cast<float>(y * 0.5 + 0.25 * u(rng));
    s.mask = {1, 0, 0, 0};
    s.label = s.orig_label = y;
    v.push_back(std::move(s));
  }
  const data::DatasetContainer lin(2, 2, 2, std::move(v));
  auto bg_norm = [](const models::Classifier& c) {
    double n = 0.0;
    const Tensor& W = c.params().values[0];
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t k = 0; k < 12; ++k)
        if (k % 4 != 0) n += W.at(j, k) * W.at(j, k);
    return std::sqrt(n);
  };
  train::TrainConfig cfg;
  cfg.iters = 300;
  cfg.batch_n = 20;
  cfg.eta1 = 0.5;
  cfg.momentum = 0.0;
  cfg.weight_decay = 0.0;
  cfg.lambda = 0.0;
  const auto st = train::init_state(models::Classifier(12, {}, 2, 1), models::PerturbNet(2, 4, 1), lin, cfg);
  const double plain = bg_norm(train::train_erm(cfg, st, lin).state.clf);
  cfg.lambda = 1.0;
  const double reg = bg_norm(train::train_erm(cfg, st, lin).state.clf);

  auto& m = bench_models();
  const auto& test = m.ds.test;
  const std::size_t stride = test.size() / kSaliencyImages;
  std::size_t wins = 0;
  for (std::size_t i = 0; i < kSaliencyImages; ++i) {
    const auto& s = test[i * stride];
    const double rc = eval::saliency_ratio(eval::saliency_map(m.clp.clf, s, test), s.mask);
    const double re = eval::saliency_ratio(eval::saliency_map(m.erm.clf, s, test), s.mask);
    wins += rc > re;
  }
  const double share = static_cast<double>(wins) / kSaliencyImages;
  const bool ok = reg < plain && share >= kSaliencyShare;
  return {ok, fmt("linear background norm %.4f (lambda=1) vs %.4f (lambda=0); CLP ratio > ERM on %zu/%zu images "
                  "(%.2f, need >= %.2f)",
                  reg, plain, wins, kSaliencyImages, share, kSaliencyShare)};
}

// ---- 7. noisy labels ------------------------------------------------------------

Outcome noisy_label_diagnostic() {
  run::RunConfig c = bench_config();
  c.data.train = spur(32, 250, 0.95, kBenchSeed + 1);
  c.data.noise = data::NoiseKind::Uniform;
  c.data.noise_ratio = kNoiseRatio;
  c.data.noise_seed = kBenchSeed + 2;
  c.data.test_per_cell = 50;
  c.train.iters = 1000;
  const auto ds = run::synthesize(c);
  const auto erm = run::run_training(c, run::TrainMode::Erm, ds);
  const auto clp = run::run_training(c, run::TrainMode::Clp, ds);
  const auto& st = clp.result.state;
  const auto li = eval::loss_increase_fractions(st.clf, st.pnet, st.stats, st.norm, ds.train);
  const double fn = li.frac_noisy.value_or(1.0);
  const auto re = eval::evaluate(erm.result.state.clf, ds.test);
  const auto rc = eval::evaluate(st.clf, ds.test);
  const bool ok = li.frac_clean > fn && rc.top1_acc >= re.top1_acc;
  return {ok, fmt("loss-increase share clean %.3f (n=%zu) vs noisy %.3f (n=%zu); clean-test top1 CLP %.3f vs ERM %.3f",
                  li.frac_clean, li.n_clean, fn, li.n_noisy, rc.top1_acc, re.top1_acc)};
}

// ---- 9. determinism -------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome determinism() {
  run::RunConfig c;
  c.run_name = "det";
  c.data.train = spur(16, 30, 0.9, 51);
  c.data.test_per_cell = 4;
  c.model.hidden_widths = {16};
  c.model.pnet_hidden = 8;
  c.train.iters = 15;
  c.train.eta1 = 0.01;
  c.train.batch_n = 8;
  c.train.batch_m = 8;
  c.eval.saliency_indices = {0, 9};
  const fs::path root = fs::temp_directory_path() / "clp_acceptance_det";
  fs::remove_all(root);
  std::vector<std::map<std::string, std::string>> runs;
  for (int r = 0; r < 2; ++r) {
    const fs::path dir = root / std::to_string(r);
    std::ostringstream log;
    run::cmd_synth(c, dir, log);
    for (auto mode : {run::TrainMode::Erm, run::TrainMode::MetaLp, run::TrainMode::Clp}) run::cmd_train(c, mode, dir, log);
    run::cmd_eval(c, dir / "clp.clpw", dir, log);
    run::cmd_report(c, dir, log);
    std::map<std::string, std::string> files;
    for (const auto& e : fs::directory_iterator(dir)) files[e.path().filename().string()] = slurp(e.path());
    runs.push_back(std::move(files));
  }
  std::size_t differing = 0;
  for (const auto& [name, bytes] : runs[0]) {
    auto it = runs[1].find(name);
    differing += it == runs[1].end() || it->second != bytes;
  }
  differing += runs[0].size() != runs[1].size();
  fs::remove_all(root);
  return {differing == 0 && runs[0].size() >= 15,
          fmt("%zu artifacts from synth/train/eval/report, %zu differ between reruns", runs[0].size(), differing)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::string only = argc > 1 ? argv[1] : "";
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"autodiff-oracles", autodiff_suite},
      {"baseline-equivalence", baseline_equivalence},
      {"augmentation-algebra", augmentation_algebra},
      {"bias-construction", bias_construction},
      {"characteristic-identities", characteristic_identities},
      {"spurious-benchmark", spurious_benchmark},
      {"noisy-label-diagnostic", noisy_label_diagnostic},
      {"saliency-contract", saliency_contract},
      {"determinism", determinism},
  };
  int failed = 0;
  std::size_t ran = 0;
  for (const auto& [name, fn] : criteria) {
    if (!only.empty() && std::string(name).find(only) == std::string::npos) continue;
    ++ran;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", ran - failed, ran);
  return failed == 0 ? 0 : 1;
}
