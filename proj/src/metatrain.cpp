#include "clp/metatrain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "clp/errors.hpp"

namespace clp::train {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t kMetaStream = 0x6d657461ull;

std::vector<Var> constants(std::span<const Tensor> values) {
  std::vector<Var> out;
  out.reserve(values.size());
  for (const auto& t : values) out.push_back(Var::constant(t));
  return out;
}

std::vector<Var> leaves(std::span<const Tensor> values) {
  std::vector<Var> out;
  out.reserve(values.size());
  for (const auto& t : values) out.push_back(Var::leaf(t, true));
  return out;
}

std::vector<Tensor> values_of(std::span<const Var> vars) {
  std::vector<Tensor> out;
  out.reserve(vars.size());
  for (const auto& v : vars) out.push_back(v.value());
  return out;
}

Tensor flatten(std::span<const Tensor> ts) {
  std::size_t n = 0;
  for (const auto& t : ts) n += t.numel();
  Tensor out(Shape{n});
  std::size_t off = 0;
  for (const auto& t : ts) {
    std::copy(t.data().begin(), t.data().end(), out.data().begin() + static_cast<long>(off));
    off += t.numel();
  }
  return out;
}

bool saliency_active(double lambda) { return lambda > 0.0; }

// R_sal from perturbed logits z computed on the leaf input x.
Var saliency_term(const Var& z, const Var& x, const Batch& batch, double lambda, bool create_graph) {
  const Var p = ad::row_gather(ad::softmax(z), batch.labels);
  const Var gx = ad::grad(ad::sum(p), x, create_graph);
  const Var weighted = ad::sum(ad::mul(ad::square(gx), Var::constant(batch.bg_weight)));
  return ad::scale(weighted, lambda / static_cast<double>(batch.size()));
}

struct Objective {
  Var ce;
  Var reg;
};

// CE(u + delta) and the saliency term at the given parameters, sharing one forward pass.
Objective batch_objective(const models::Classifier& clf, std::span<const Var> params, const Batch& batch,
                          const Var& delta, double lambda, bool reg_on, bool reg_graph, bool routed) {
  const bool reg = reg_on && saliency_active(lambda);
  const Var x = reg ? Var::leaf(batch.x, true) : Var::constant(batch.x);
  const Var u = clf.forward(params, x).logits;
  const Var z = ad::add(u, delta);
  Objective o;
  o.ce = routed ? routed_loss(z, batch) : ce_loss(z, batch.labels);
  o.reg = reg ? saliency_term(z, x, batch, lambda, reg_graph) : Var::constant(Tensor::scalar(0.0));
  return o;
}

void rethrow_with_iteration(const NumericError& e, std::size_t it) {
  throw NumericError("iteration " + std::to_string(it) + ": " + e.what());
}

}  // namespace

void TrainConfig::validate() const {
  if (!(eta1 >= 0.0) || !(eta2 >= 0.0)) throw ConfigError("train: eta1 and eta2 must be non-negative");
  if (batch_n == 0 || batch_m == 0) throw ConfigError("train: batch sizes must be at least 1");
  if (!(lambda >= 0.0)) throw ConfigError("train: lambda must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must lie in [0,1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be non-negative");
}

bool Batch::any_counterfactual() const { return std::find(counterfactual.begin(), counterfactual.end(), true) != counterfactual.end(); }
bool Batch::all_counterfactual() const { return std::find(counterfactual.begin(), counterfactual.end(), false) == counterfactual.end(); }

Batch make_batch(const data::DatasetContainer& ds, std::span<const std::size_t> indices) {
  const std::size_t G = ds.pixels_per_image(), D = 3 * G;
  Batch b;
  b.x = Tensor(Shape{indices.size(), D});
  b.bg_weight = Tensor(Shape{indices.size(), D});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= ds.size()) throw ContractError("make_batch: sample index out of range");
    const auto& s = ds[indices[r]];
    std::copy(s.pixels.begin(), s.pixels.end(), b.x.data().begin() + static_cast<long>(r * D));
    std::size_t bg = 0;
    for (auto m : s.mask) bg += m == 0 ? 1 : 0;
    if (bg > 0) {
      const double w = 1.0 / static_cast<double>(bg);
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t p = 0; p < G; ++p) b.bg_weight.at(r, c * G + p) = s.mask[p] == 0 ? w : 0.0;
    }
    const bool cf = s.counterfactual();
    b.labels.push_back(cf ? s.orig_label : s.label);
    b.counterfactual.push_back(cf);
  }
  return b;
}

Var ce_loss(const Var& logits, std::span<const std::size_t> labels) {
  return ad::neg(ad::mean(ad::row_gather(ad::log_softmax(logits), labels)));
}

Var cf_loss(const Var& logits, std::span<const std::size_t> orig_labels) {
  const Var p = ad::clamp(ad::row_gather(ad::softmax(logits), orig_labels), 0.0, 1.0 - kCfClip);
  return ad::neg(ad::mean(ad::log(ad::add_scalar(ad::neg(p), 1.0))));
}

Var routed_loss(const Var& logits, const Batch& batch) {
  if (!batch.any_counterfactual()) return ce_loss(logits, batch.labels);
  if (batch.all_counterfactual()) return cf_loss(logits, batch.labels);
  const std::size_t n = batch.size();
  Tensor is_cf(Shape{n, 1}), not_cf(Shape{n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    is_cf[i] = batch.counterfactual[i] ? 1.0 : 0.0;
    not_cf[i] = 1.0 - is_cf[i];
  }
  const Var ce = ad::neg(ad::row_gather(ad::log_softmax(logits), batch.labels));
  const Var p = ad::clamp(ad::row_gather(ad::softmax(logits), batch.labels), 0.0, 1.0 - kCfClip);
  const Var cf = ad::neg(ad::log(ad::add_scalar(ad::neg(p), 1.0)));
  return ad::mean(ad::add(ad::mul(ce, Var::constant(not_cf)), ad::mul(cf, Var::constant(is_cf))));
}

Var saliency_reg(const models::Classifier& clf, std::span<const Var> params, const Batch& batch, const Var& delta,
                 double lambda, bool create_graph) {
  if (!saliency_active(lambda)) return Var::constant(Tensor::scalar(0.0));
  const Var x = Var::leaf(batch.x, true);
  const Var z = ad::add(clf.forward(params, x).logits, delta);
  return saliency_term(z, x, batch, lambda, create_graph);
}

// ---- characteristics --------------------------------------------------------

BatchChars batch_characteristics(const Tensor& logits, const Tensor& features, const Batch& batch,
                                 const Tensor& final_weight, const chars::ClassStats& stats) {
  const std::size_t C = logits.cols(), F = features.cols();
  BatchChars out;
  out.raw.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    std::span<const double> u(logits.data().data() + i * C, C);
    std::span<const double> f(features.data().data() + i * F, F);
    const std::size_t y = batch.labels[i];
    const double mx = *std::max_element(u.begin(), u.end());
    double z = 0.0;
    for (double v : u) z += std::exp(v - mx);
    const double log_p = u[y] - mx - std::log(z);
    double loss;
    if (batch.counterfactual[i]) {
      const double p = std::min(std::exp(log_p), 1.0 - kCfClip);
      loss = -std::log(1.0 - p);
    } else {
      loss = -log_p;
    }
    auto cv = chars::extract(u, f, y, final_weight, stats, loss, batch.counterfactual[i]);
    out.observations.push_back({y, loss, cv(2)});
    out.raw.push_back(cv);
  }
  return out;
}

BatchChars batch_characteristics(const models::Classifier& clf, std::span<const Tensor> params, const Batch& batch,
                                 const chars::ClassStats& stats) {
  ad::NoGradGuard guard;
  const auto p = constants(params);
  const auto out = clf.forward(p, Var::constant(batch.x));
  return batch_characteristics(out.logits.value(), out.features.value(), batch, params[params.size() - 2], stats);
}

TrainState init_state(models::Classifier clf, models::PerturbNet pnet, const data::DatasetContainer& train_ds,
                      const TrainConfig& cfg) {
  cfg.validate();
  if (train_ds.empty()) throw ContractError("init_state: training set is empty");
  if (clf.input_dim() != 3 * train_ds.pixels_per_image() || clf.classes() != train_ds.num_classes()) {
    throw ShapeError("classifier does not match the dataset geometry");
  }
  if (pnet.classes() != clf.classes()) throw ShapeError("perturbation net and classifier disagree on classes");
  TrainState st;
  st.stats = chars::ClassStats(train_ds.class_counts(), cfg.stats_momentum);
  st.norm = chars::FeatureNormalizer(cfg.norm_momentum, cfg.norm_clamp);
  st.velocity = Tensor(Shape{clf.params().count()}, 0.0);

  // Seed the class statistics with one pass of the initial classifier.
  std::vector<chars::ClassObservation> obs;
  obs.reserve(train_ds.size());
  constexpr std::size_t kChunk = 256;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < train_ds.size(); start += kChunk) {
    idx.resize(std::min(kChunk, train_ds.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Batch b = make_batch(train_ds, idx);
    ad::NoGradGuard guard;
    const Tensor lg = clf.forward(Var::constant(b.x)).logits.value();
    const std::size_t C = lg.cols();
    std::vector<double> s(C);
    for (std::size_t i = 0; i < b.size(); ++i) {
      const double* u = lg.data().data() + i * C;
      const double mx = *std::max_element(u, u + C);
      double z = 0.0;
      for (std::size_t j = 0; j < C; ++j) z += std::exp(u[j] - mx);
      for (std::size_t j = 0; j < C; ++j) s[j] = std::exp(u[j] - mx) / z;
      const std::size_t y = b.labels[i];
      obs.push_back({y, -(u[y] - mx - std::log(z)), chars::margin(s, y, b.counterfactual[i])});
    }
  }
  st.stats.update(obs);
  st.clf = std::move(clf);
  st.pnet = std::move(pnet);
  return st;
}

// ---- steps -----------------------------------------------------------------

std::vector<Var> inner_virtual_step(const models::Classifier& clf, std::span<const Var> w, const Batch& batch,
                                    const Tensor& cv, const models::PerturbNet& pnet, std::span<const Var> omega,
                                    const TrainConfig& cfg) {
  const Var delta = pnet.forward(omega, Var::constant(cv));
  const Objective o =
      batch_objective(clf, w, batch, delta, cfg.lambda, cfg.train_saliency, !cfg.detach_saliency, false);
  std::vector<Var> g;
  if (cfg.detach_saliency && saliency_active(cfg.lambda) && cfg.train_saliency) {
    g = ad::grad(o.ce, w, true);
    const auto gr = ad::grad(o.reg, w, false);
    for (std::size_t k = 0; k < g.size(); ++k) g[k] = ad::add(g[k], gr[k]);
  } else {
    g = ad::grad(ad::add(o.ce, o.reg), w, true);
  }
  std::vector<Var> w_hat;
  w_hat.reserve(w.size());
  for (std::size_t k = 0; k < w.size(); ++k) w_hat.push_back(ad::sub(w[k], ad::scale(g[k], cfg.eta1)));
  return w_hat;
}

Var meta_objective(const models::Classifier& clf, std::span<const Var> w_hat, const Batch& meta,
                   const Tensor& meta_cv, const models::PerturbNet& pnet, std::span<const Var> omega,
                   const TrainConfig& cfg) {
  const Var delta = pnet.forward(omega, Var::constant(meta_cv));
  const Objective o = batch_objective(clf, w_hat, meta, delta, cfg.lambda, true, !cfg.detach_saliency, true);
  return ad::add(o.ce, o.reg);
}

MetaStepResult meta_update(const TrainState& st, const Batch& batch, const Tensor& cv, const Batch& meta,
                           const TrainConfig& cfg) {
  const auto w = leaves(st.clf.params().values);
  const auto omega = leaves(st.pnet.params().values);
  const auto w_hat = inner_virtual_step(st.clf, w, batch, cv, st.pnet, omega, cfg);

  const auto w_hat_values = values_of(w_hat);
  const BatchChars mc = batch_characteristics(st.clf, w_hat_values, meta, st.stats);
  std::vector<chars::CharVector> normed;
  normed.reserve(mc.raw.size());
  for (const auto& c : mc.raw) normed.push_back(st.norm.transform(c));
  const Tensor meta_cv = chars::stack(normed);

  const Var loss = meta_objective(st.clf, w_hat, meta, meta_cv, st.pnet, omega, cfg);
  const auto g = ad::grad(loss, omega, false);
  MetaStepResult r;
  r.meta_loss = loss.item();
  std::vector<Tensor> next;
  for (std::size_t k = 0; k < omega.size(); ++k) {
    Tensor t = omega[k].value();
    const auto gk = g[k].value().data();
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] -= cfg.eta2 * gk[i];
    next.push_back(std::move(t));
  }
  r.omega = flatten(next);
  return r;
}

double actual_step(TrainState& st, const Batch& batch, const Tensor* cv, const TrainConfig& cfg, bool use_pnet) {
  Tensor delta_value(Shape{batch.size(), st.clf.classes()}, 0.0);
  if (use_pnet) {
    if (!cv) throw ContractError("actual_step: characteristics required with a perturbation net");
    ad::NoGradGuard guard;
    delta_value = st.pnet.forward(Var::constant(*cv)).value();
  }
  const auto w = leaves(st.clf.params().values);
  const Objective o = batch_objective(st.clf, w, batch, Var::constant(delta_value), cfg.lambda, cfg.train_saliency,
                                      true, false);
  const Var loss = ad::add(o.ce, o.reg);
  const auto g = ad::grad(loss, w, false);

  auto& values = st.clf.params().values;
  std::size_t off = 0;
  for (std::size_t k = 0; k < values.size(); ++k) {
    auto wk = values[k].data();
    const auto gk = g[k].value().data();
    for (std::size_t i = 0; i < wk.size(); ++i) {
      const double d = gk[i] + cfg.weight_decay * wk[i];
      double& v = st.velocity[off + i];
      v = cfg.momentum * v + d;
      wk[i] -= cfg.eta1 * v;
    }
    off += wk.size();
  }
  ++st.iteration;
  return loss.item();
}

// ---- loops -----------------------------------------------------------------

EpochSampler::EpochSampler(std::size_t n, std::uint64_t seed) : n_(n), rng_(seed), order_(n) {
  if (n_ == 0) throw ContractError("sampler over an empty dataset");
  std::iota(order_.begin(), order_.end(), 0);
  std::shuffle(order_.begin(), order_.end(), rng_);
}

std::vector<std::size_t> EpochSampler::next(std::size_t batch) {
  std::vector<std::size_t> out;
  out.reserve(batch);
  while (out.size() < batch) {
    if (pos_ == n_) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      pos_ = 0;
    }
    out.push_back(order_[pos_++]);
  }
  return out;
}

TrainResult train(const TrainConfig& cfg, TrainState state, const data::DatasetContainer& train_ds,
                  const data::DatasetContainer& meta_ds) {
  cfg.validate();
  if (meta_ds.empty()) throw ContractError("train: metadata is empty");
  EpochSampler sampler(train_ds.size(), cfg.seed);
  std::mt19937_64 meta_rng(splitmix64(cfg.seed ^ kMetaStream));
  std::uniform_int_distribution<std::size_t> pick(0, meta_ds.size() - 1);

  TrainResult res;
  res.history.reserve(cfg.iters);
  for (std::size_t t = 0; t < cfg.iters; ++t) {
    try {
      const auto idx = sampler.next(cfg.batch_n);
      const Batch batch = make_batch(train_ds, idx);
      std::vector<std::size_t> midx(cfg.batch_m);
      for (auto& i : midx) i = pick(meta_rng);
      const Batch meta = make_batch(meta_ds, midx);

      const BatchChars bc = batch_characteristics(state.clf, state.clf.params().values, batch, state.stats);
      std::vector<chars::CharVector> normed;
      normed.reserve(bc.raw.size());
      for (const auto& c : bc.raw) normed.push_back(state.norm.normalize(c));
      const Tensor cv = chars::stack(normed);

      const MetaStepResult mr = meta_update(state, batch, cv, meta, cfg);
      state.pnet.params().assign(mr.omega);
      const double loss = actual_step(state, batch, &cv, cfg, true);
      state.stats.update(bc.observations);
      res.history.push_back({t, loss, mr.meta_loss, true});
    } catch (const NumericError& e) {
      rethrow_with_iteration(e, t);
    }
  }
  res.state = std::move(state);
  return res;
}

TrainResult train_erm(const TrainConfig& cfg, TrainState state, const data::DatasetContainer& train_ds) {
  cfg.validate();
  EpochSampler sampler(train_ds.size(), cfg.seed);
  TrainResult res;
  res.history.reserve(cfg.iters);
  for (std::size_t t = 0; t < cfg.iters; ++t) {
    try {
      const auto idx = sampler.next(cfg.batch_n);
      const Batch batch = make_batch(train_ds, idx);
      const double loss = actual_step(state, batch, nullptr, cfg, false);
      res.history.push_back({t, loss, 0.0, false});
    } catch (const NumericError& e) {
      rethrow_with_iteration(e, t);
    }
  }
  res.state = std::move(state);
  return res;
}

}  // namespace clp::train
