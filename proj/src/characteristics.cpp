#include "clp/characteristics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "clp/errors.hpp"

namespace clp::chars {

namespace {

void softmax_row(std::span<const double> u, std::vector<double>& s) {
  s.resize(u.size());
  const double mx = *std::max_element(u.begin(), u.end());
  double z = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) z += std::exp(u[j] - mx);
  for (std::size_t j = 0; j < u.size(); ++j) s[j] = std::exp(u[j] - mx) / z;
}

}  // namespace

// ---- ClassStats -------------------------------------------------------------

ClassStats::ClassStats(std::vector<std::size_t> class_counts, double momentum)
    : counts_(std::move(class_counts)),
      momentum_(momentum),
      loss_(counts_.size(), 0.0),
      margin_(counts_.size(), 0.0),
      initialized_(counts_.size(), false) {
  if (!(momentum_ >= 0.0 && momentum_ < 1.0)) throw ConfigError("class stats momentum must lie in [0,1)");
  for (auto c : counts_) total_ += c;
}

double ClassStats::proportion(std::size_t y) const {
  if (total_ == 0) throw ContractError("class proportion of an empty class table");
  return static_cast<double>(count(y)) / static_cast<double>(total_);
}

double ClassStats::ema_loss(std::size_t y) const {
  if (!initialized(y)) throw ContractError("class statistics not initialised for class " + std::to_string(y));
  return loss_[y];
}

double ClassStats::ema_margin(std::size_t y) const {
  if (!initialized(y)) throw ContractError("class statistics not initialised for class " + std::to_string(y));
  return margin_[y];
}

void ClassStats::update(std::span<const ClassObservation> batch) {
  const std::size_t C = classes();
  std::vector<double> sl(C, 0.0), sm(C, 0.0);
  std::vector<std::size_t> n(C, 0);
  for (const auto& o : batch) {
    if (o.label >= C) throw ContractError("class stats: label out of range");
    if (!std::isfinite(o.loss) || !std::isfinite(o.margin)) throw NumericError("class stats: non-finite observation");
    sl[o.label] += o.loss;
    sm[o.label] += o.margin;
    ++n[o.label];
  }
  for (std::size_t y = 0; y < C; ++y) {
    if (n[y] == 0) continue;
    const double ml = sl[y] / static_cast<double>(n[y]);
    const double mm = sm[y] / static_cast<double>(n[y]);
    if (!initialized_[y]) {
      loss_[y] = ml;
      margin_[y] = mm;
      initialized_[y] = true;
    } else {
      loss_[y] = momentum_ * loss_[y] + (1.0 - momentum_) * ml;
      margin_[y] = momentum_ * margin_[y] + (1.0 - momentum_) * mm;
    }
  }
}

// Layout: [momentum, then per class: count, ema_loss, ema_margin, initialised].
Tensor ClassStats::to_tensor() const {
  std::vector<double> d{momentum_};
  for (std::size_t y = 0; y < classes(); ++y) {
    d.push_back(static_cast<double>(counts_[y]));
    d.push_back(loss_[y]);
    d.push_back(margin_[y]);
    d.push_back(initialized_[y] ? 1.0 : 0.0);
  }
  const std::size_t n = d.size();
  return Tensor(Shape{n}, std::move(d));
}

ClassStats ClassStats::from_tensor(const Tensor& t) {
  if (t.numel() < 1 || (t.numel() - 1) % 4 != 0) throw FormatError("malformed class statistics block", 0);
  const std::size_t C = (t.numel() - 1) / 4;
  std::vector<std::size_t> counts(C);
  for (std::size_t y = 0; y < C; ++y) counts[y] = static_cast<std::size_t>(t[1 + 4 * y]);
  ClassStats s(std::move(counts), t[0]);
  for (std::size_t y = 0; y < C; ++y) {
    s.loss_[y] = t[2 + 4 * y];
    s.margin_[y] = t[3 + 4 * y];
    s.initialized_[y] = t[4 + 4 * y] != 0.0;
  }
  return s;
}

ClassStats update_class_stats(ClassStats stats, std::span<const ClassObservation> batch) {
  stats.update(batch);
  return stats;
}

// ---- extraction -------------------------------------------------------------

double margin(std::span<const double> probs, std::size_t y, bool counterfactual) {
  double other = -1.0;
  for (std::size_t j = 0; j < probs.size(); ++j) {
    if (j != y) other = std::max(other, probs[j]);
  }
  const double m = probs[y] - other;
  return counterfactual ? -m : m;
}

CharVector extract(std::span<const double> logits, std::span<const double> feature, std::size_t y,
                   const Tensor& final_weight, const ClassStats& stats, double loss, bool counterfactual) {
  const std::size_t C = logits.size();
  if (C < 2 || y >= C) throw ContractError("extract: need >= 2 logits and a valid label");
  if (final_weight.rank() != 2 || final_weight.shape()[0] != C || final_weight.shape()[1] != feature.size()) {
    throw ShapeError("extract: final weight must be C x F, got " + shape_str(final_weight.shape()));
  }
  const double class_loss = stats.ema_loss(y);
  const double class_margin = stats.ema_margin(y);

  std::vector<double> s;
  softmax_row(logits, s);
  CharVector cv;
  cv(1) = loss;
  cv(2) = margin(s, y, counterfactual);

  double g3 = 0.0, g5 = 0.0;
  for (std::size_t j = 0; j < C; ++j) {
    const double d = (j == y ? 1.0 : 0.0) - s[j];
    g3 += d * d;
    if (s[j] > 0.0) g5 -= s[j] * std::log2(s[j]);
  }
  cv(3) = std::sqrt(g3);

  const std::size_t F = feature.size();
  const double* w = final_weight.data().data() + y * F;
  double dot = 0.0, nf = 0.0, nw = 0.0;
  for (std::size_t k = 0; k < F; ++k) {
    dot += feature[k] * w[k];
    nf += feature[k] * feature[k];
    nw += w[k] * w[k];
  }
  if (nf > 0.0 && nw > 0.0) {
    cv(4) = std::clamp(dot / (std::sqrt(nf) * std::sqrt(nw)), -1.0, 1.0);
  } else {
    cv(4) = 0.0;
    cv.cosine_degenerate = true;
  }
  cv(5) = std::clamp(g5, 0.0, std::log2(static_cast<double>(C)));
  cv(6) = stats.proportion(y);
  cv(7) = class_loss;
  cv(8) = nw;
  cv(9) = cv(1) - cv(7);
  cv(10) = cv(2) - class_margin;
  return cv;
}

// ---- FeatureNormalizer ------------------------------------------------------

FeatureNormalizer::FeatureNormalizer(double momentum, double kappa) : momentum_(momentum), kappa_(kappa) {
  if (!(momentum_ >= 0.0 && momentum_ < 1.0)) throw ConfigError("normalizer momentum must lie in [0,1)");
  if (!(kappa_ > 0.0)) throw ConfigError("normalizer clamp bound must be positive");
}

void FeatureNormalizer::update(const CharVector& cv) {
  for (std::size_t i = 0; i < kNumCharacteristics; ++i) {
    const double x = cv.g[i];
    if (!std::isfinite(x)) throw NumericError("normalizer: non-finite characteristic g" + std::to_string(i + 1));
    if (updates_ == 0) {
      mean_[i] = x;
      var_[i] = 0.0;
      continue;
    }
    // Exponentially weighted mean and variance.
    const double d = x - mean_[i];
    mean_[i] += (1.0 - momentum_) * d;
    var_[i] = momentum_ * (var_[i] + (1.0 - momentum_) * d * d);
  }
  ++updates_;
}

CharVector FeatureNormalizer::transform(const CharVector& cv) const {
  if (updates_ == 0) throw ContractError("normalizer used before any update");
  CharVector out = cv;
  for (std::size_t i = 0; i < kNumCharacteristics; ++i) {
    const double sd = std::max(std::sqrt(var_[i]), 1e-6);
    out.g[i] = std::clamp((cv.g[i] - mean_[i]) / sd, -kappa_, kappa_);
  }
  return out;
}

CharVector FeatureNormalizer::normalize(const CharVector& cv) {
  update(cv);
  return transform(cv);
}

// Layout: [momentum, kappa, updates, mean[10], var[10]].
Tensor FeatureNormalizer::to_tensor() const {
  std::vector<double> d{momentum_, kappa_, static_cast<double>(updates_)};
  d.insert(d.end(), mean_.begin(), mean_.end());
  d.insert(d.end(), var_.begin(), var_.end());
  const std::size_t n = d.size();
  return Tensor(Shape{n}, std::move(d));
}

FeatureNormalizer FeatureNormalizer::from_tensor(const Tensor& t) {
  if (t.numel() != 3 + 2 * kNumCharacteristics) throw FormatError("malformed normalizer block", 0);
  FeatureNormalizer n(t[0], t[1]);
  n.updates_ = static_cast<std::uint64_t>(t[2]);
  for (std::size_t i = 0; i < kNumCharacteristics; ++i) {
    n.mean_[i] = t[3 + i];
    n.var_[i] = t[3 + kNumCharacteristics + i];
  }
  return n;
}

CharVector normalize(const CharVector& cv, FeatureNormalizer& norm) { return norm.normalize(cv); }

Tensor stack(std::span<const CharVector> batch) {
  Tensor t(Shape{batch.size(), kNumCharacteristics});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    for (std::size_t j = 0; j < kNumCharacteristics; ++j) t.at(i, j) = batch[i].g[j];
  }
  return t;
}

}  // namespace clp::chars
