#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "clp/characteristics.hpp"
#include "clp/errors.hpp"

using namespace clp;
using namespace clp::chars;

namespace {

ClassStats seeded_stats(std::vector<std::size_t> counts, double loss, double margin) {
  ClassStats s(std::move(counts));
  std::vector<ClassObservation> obs;
  for (std::size_t y = 0; y < s.classes(); ++y) obs.push_back({y, loss, margin});
  s.update(obs);
  return s;
}

std::vector<double> softmax_oracle(const std::vector<double>& u) {
  double z = 0.0;
  for (double v : u) z += std::exp(v);
  std::vector<double> s;
  for (double v : u) s.push_back(std::exp(v) / z);
  return s;
}

}  // namespace

TEST(Extract, ConfidentPrediction) {
  auto stats = seeded_stats({10, 10, 10}, 0.5, 0.2);
  std::vector<double> u{800.0, 0.0, 0.0};
  std::vector<double> f{1.0, 0.0};
  Tensor w = Tensor::matrix({{1, 0}, {0, 1}, {1, 1}});
  auto cv = extract(u, f, 0, w, stats, 0.0);
  EXPECT_DOUBLE_EQ(cv(2), 1.0);
  EXPECT_DOUBLE_EQ(cv(3), 0.0);
  EXPECT_DOUBLE_EQ(cv(5), 0.0);
  EXPECT_DOUBLE_EQ(cv(4), 1.0);
}

TEST(Extract, UniformLogits) {
  auto stats = seeded_stats({5, 5, 5, 5}, 1.0, 0.0);
  std::vector<double> u{0.3, 0.3, 0.3, 0.3};
  std::vector<double> f{1.0, 2.0};
  Tensor w = Tensor::matrix({{1, 0}, {0, 1}, {1, 1}, {2, 0}});
  auto cv = extract(u, f, 2, w, stats, std::log(4.0));
  EXPECT_EQ(cv(5), 2.0);
  EXPECT_EQ(cv(2), 0.0);
  EXPECT_DOUBLE_EQ(cv(6), 0.25);
}

TEST(Extract, ThreeClassOracle) {
  auto stats = seeded_stats({4, 4, 4}, 0.7, 0.1);
  std::vector<double> u{2, 1, 0};
  auto s = softmax_oracle(u);
  const double g2 = s[0] - std::max(s[1], s[2]);
  const double g3 = std::sqrt((1 - s[0]) * (1 - s[0]) + s[1] * s[1] + s[2] * s[2]);
  std::vector<double> f{0.5, -1.0};
  Tensor w = Tensor::matrix({{1, 2}, {0, 1}, {1, 1}});
  auto cv = extract(u, f, 0, w, stats, -std::log(s[0]));
  EXPECT_NEAR(cv(2), g2, 1e-12);
  EXPECT_NEAR(cv(3), g3, 1e-12);
  EXPECT_NEAR(cv(2), 0.42051, 1e-5);
  EXPECT_NEAR(cv(3), 0.42434, 1e-5);
  // cos((0.5,-1),(1,2)) = -1.5 / (sqrt(1.25) sqrt(5))
  EXPECT_NEAR(cv(4), -1.5 / (std::sqrt(1.25) * std::sqrt(5.0)), 1e-12);
  EXPECT_DOUBLE_EQ(cv(8), 5.0);
  EXPECT_DOUBLE_EQ(cv(6), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(cv(7), 0.7);
}

TEST(Extract, DifferencesAreExact) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 2.0);
  auto stats = seeded_stats({3, 7, 2, 8}, 0.9, -0.2);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> u(4), f(3);
    for (auto& v : u) v = n(rng);
    for (auto& v : f) v = n(rng);
    Tensor w({4, 3});
    for (auto& v : w.data()) v = n(rng);
    const std::size_t y = static_cast<std::size_t>(t % 4);
    const bool cf = t % 3 == 0;
    auto cv = extract(u, f, y, w, stats, std::abs(n(rng)), cf);
    EXPECT_EQ(cv(9), cv(1) - cv(7));
    EXPECT_EQ(cv(10), cv(2) - stats.ema_margin(y));
    EXPECT_GE(cv(5), 0.0);
    EXPECT_LE(cv(5), 2.0);
    EXPECT_GE(cv(2), -1.0);
    EXPECT_LE(cv(2), 1.0);
    EXPECT_GE(cv(4), -1.0);
    EXPECT_LE(cv(4), 1.0);

    auto s = softmax_oracle(u);
    double sq = 0.0;
    for (double v : s) sq += v * v;
    EXPECT_NEAR(cv(3) * cv(3), sq + 1.0 - 2.0 * s[y], 1e-12);
    EXPECT_EQ(extract(u, f, y, w, stats, cv(1), cf), cv);
  }
}

TEST(Extract, CounterfactualNegatesMargin) {
  auto stats = seeded_stats({4, 4, 4}, 0.7, 0.1);
  std::vector<double> u{2, 1, 0};
  std::vector<double> f{1, 1};
  Tensor w = Tensor::matrix({{1, 2}, {0, 1}, {1, 1}});
  auto a = extract(u, f, 0, w, stats, 1.0, false);
  auto b = extract(u, f, 0, w, stats, 1.0, true);
  EXPECT_EQ(b(2), -a(2));
  EXPECT_EQ(b(6), a(6));
}

TEST(Extract, DegenerateCosine) {
  auto stats = seeded_stats({4, 4}, 0.7, 0.1);
  std::vector<double> u{1, 0};
  std::vector<double> f{0, 0};
  Tensor w = Tensor::matrix({{1, 2}, {0, 1}});
  auto cv = extract(u, f, 0, w, stats, 1.0);
  EXPECT_EQ(cv(4), 0.0);
  EXPECT_TRUE(cv.cosine_degenerate);
}

TEST(Extract, UninitialisedStatsRejected) {
  ClassStats stats({4, 4});
  std::vector<double> u{1, 0}, f{1, 0};
  Tensor w = Tensor::matrix({{1, 2}, {0, 1}});
  EXPECT_THROW(extract(u, f, 0, w, stats, 1.0), ContractError);
}

TEST(ClassStats, MomentumFree) {
  ClassStats s({3}, 0.0);
  std::vector<ClassObservation> a{{0, 1.0, 0.1}, {0, 3.0, 0.3}};
  s.update(a);
  std::vector<ClassObservation> b{{0, 5.0, 0.5}};
  s.update(b);
  EXPECT_EQ(s.ema_loss(0), 5.0);
  EXPECT_EQ(s.ema_margin(0), 0.5);
}

TEST(ClassStats, ConstantStreamIsFixedPoint) {
  ClassStats s({3, 3});
  for (int i = 0; i < 50; ++i) {
    std::vector<ClassObservation> b{{1, 0.75, -0.25}};
    s.update(b);
    EXPECT_EQ(s.ema_loss(1), 0.75);
  }
  EXPECT_FALSE(s.initialized(0));
}

TEST(ClassStats, MomentumStep) {
  ClassStats s({3}, 0.9);
  std::vector<ClassObservation> z{{0, 0.0, 0.0}}, o{{0, 1.0, 1.0}};
  s = update_class_stats(s, z);
  s = update_class_stats(s, o);
  EXPECT_NEAR(s.ema_loss(0), 0.1, 1e-15);
}

TEST(ClassStats, ProportionsSumToOne) {
  ClassStats s({1000, 599, 359, 215, 129});
  double t = 0.0;
  for (std::size_t y = 0; y < s.classes(); ++y) t += s.proportion(y);
  EXPECT_NEAR(t, 1.0, 1e-15);
}

TEST(ClassStats, TensorRoundTrip) {
  auto s = seeded_stats({2, 5, 9}, 0.4, 0.3);
  auto back = ClassStats::from_tensor(s.to_tensor());
  EXPECT_EQ(back.to_tensor(), s.to_tensor());
  EXPECT_EQ(back.total(), 16u);
}

TEST(Normalizer, ConstantStreamIsZero) {
  FeatureNormalizer norm;
  CharVector cv;
  for (std::size_t i = 0; i < kNumCharacteristics; ++i) cv.g[i] = 0.5 * static_cast<double>(i);
  for (int t = 0; t < 20; ++t) {
    auto out = norm.normalize(cv);
    for (double v : out.g) EXPECT_EQ(v, 0.0);
  }
}

TEST(Normalizer, OutlierIsClamped) {
  FeatureNormalizer norm(0.99, 5.0);
  CharVector cv;
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int t = 0; t < 500; ++t) {
    for (auto& v : cv.g) v = n(rng);
    norm.update(cv);
  }
  cv.g.fill(1e6);
  for (double v : norm.normalize(cv).g) EXPECT_EQ(v, 5.0);
  cv.g.fill(-1e6);
  for (double v : norm.transform(cv).g) EXPECT_EQ(v, -5.0);
}

TEST(Normalizer, AlternatingStreamApproachesClosedForm) {
  // For x_t = +-1 alternating the EMA mean settles to +-a with
  // a = (1-b)/(1+b) and the EMA variance to b(1+a)^2, so the z-score of
  // the newest sample tends to (1-a)/(sqrt(b)(1+a)).
  const double b = 0.99;
  const double a = (1 - b) / (1 + b);
  const double z = (1 - a) / (std::sqrt(b) * (1 + a));
  FeatureNormalizer norm(b, 5.0);
  CharVector cv;
  CharVector out;
  for (int t = 0; t < 5000; ++t) {
    cv.g.fill(t % 2 == 0 ? 1.0 : -1.0);
    out = norm.normalize(cv);
  }
  EXPECT_NEAR(out.g[0], -z, 1e-9);
  EXPECT_NEAR(z, 0.994987, 1e-6);
  EXPECT_NEAR(std::abs(out.g[0]), 1.0, 0.01);
}

TEST(Normalizer, RequiresUpdate) {
  FeatureNormalizer norm;
  EXPECT_THROW(norm.transform(CharVector{}), ContractError);
  CharVector bad;
  bad.g[3] = std::nan("");
  EXPECT_THROW(norm.update(bad), NumericError);
}

TEST(Normalizer, TensorRoundTrip) {
  FeatureNormalizer norm(0.95, 3.0);
  CharVector cv;
  for (int t = 0; t < 7; ++t) {
    for (std::size_t i = 0; i < kNumCharacteristics; ++i) cv.g[i] = t * 0.3 + static_cast<double>(i);
    norm.update(cv);
  }
  auto back = FeatureNormalizer::from_tensor(norm.to_tensor());
  EXPECT_EQ(back.transform(cv), norm.transform(cv));
}

TEST(Stack, Layout) {
  std::vector<CharVector> b(2);
  b[1].g[9] = 3.0;
  auto t = stack(b);
  EXPECT_EQ(t.shape(), (Shape{2, 10}));
  EXPECT_EQ(t.at(1, 9), 3.0);
}
