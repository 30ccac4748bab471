#include <gtest/gtest.h>

#include <cstdlib>
#include <random>

#include "slgs/rasterizer.hpp"
#include "support/gradcheck.hpp"
#include "support/random_scene.hpp"
#include "support/splat_batch.hpp"
#include "support/splat_regime.hpp"

using namespace slgs;

namespace {

std::vector<float> random_features(std::mt19937_64& rng, int rows, int channels) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> f(static_cast<std::size_t>(rows) * channels);
  for (float& x : f) x = u(rng);
  return f;
}

float max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  float m = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(SplatForward, SingleOpaqueGaussianAtItsCenter) {
  ProjectedGaussian g;
  g.mean2d = Eigen::Vector2f(8.5f, 8.5f);  // center of pixel (8, 8)
  g.cov2d = Eigen::Matrix2f::Identity() * 4.0f;
  g.opacity = sigmoid(10.0f);  // above the 0.99 ceiling
  g.depth = 1.0f;
  const std::vector<float> f{0.25f, -2.0f, 1.0f};
  FeatureRasterizer r;
  const FeatureMaps& m = r.forward(std::vector{g}, f, 3, 16, 16);
  const std::size_t pix = 8 * 16 + 8;
  EXPECT_FLOAT_EQ(m.alpha[pix], 0.99f);
  for (int c = 0; c < 3; ++c) EXPECT_FLOAT_EQ(m.features[c * 256 + pix], 0.99f * f[c]);
}

TEST(SplatForward, NoGaussiansGivesZeroBuffers) {
  FeatureRasterizer r;
  const FeatureMaps& m = r.forward({}, std::vector<float>{}, 17, 20, 12);
  for (float v : m.features) EXPECT_EQ(v, 0.0f);
  for (float v : m.alpha) EXPECT_EQ(v, 0.0f);
}

TEST(SplatForward, FeatureRowMismatchIsShapeError) {
  std::mt19937_64 rng(30);
  const auto list = test_support::random_projected(rng, 4, 16, 16);
  FeatureRasterizer r;
  EXPECT_THROW(r.forward(list, std::vector<float>(3 * 5), 5, 16, 16), ShapeError);
}

TEST(SplatForward, MatchesOracleOnFiveGaussians) {
  std::mt19937_64 rng(31);
  const auto list = test_support::random_projected(rng, 5, 16, 16);
  const auto f = random_features(rng, 5, 17);
  FeatureRasterizer r;
  const FeatureMaps& tiled = r.forward(list, f, 17, 16, 16);
  const FeatureMaps oracle = splat_oracle(list, f, 17, 16, 16);
  EXPECT_LT(max_abs_diff(tiled.features, oracle.features), 1e-5f);
  EXPECT_LT(max_abs_diff(tiled.alpha, oracle.alpha), 1e-5f);
}

TEST(SplatForward, OracleEquivalenceOnRandomScenes) {
  std::mt19937_64 rng(32);
  std::uniform_int_distribution<int> count(0, 32), size(4, 32);
  for (int trial = 0; trial < 50; ++trial) {
    const int w = size(rng), h = size(rng), n = count(rng);
    const auto list = test_support::random_projected(rng, n, w, h);
    const auto f = random_features(rng, n, 5);
    FeatureRasterizer r;
    const FeatureMaps& tiled = r.forward(list, f, 5, w, h);
    const FeatureMaps oracle = splat_oracle(list, f, 5, w, h);
    ASSERT_LT(max_abs_diff(tiled.features, oracle.features), 1e-5f);
    ASSERT_EQ(tiled.contributors, oracle.contributors);
  }
}

TEST(SplatForward, AlphaIsOneMinusTransmittanceProduct) {
  std::mt19937_64 rng(33);
  const auto list = test_support::random_projected(rng, 12, 24, 24);
  const auto f = random_features(rng, 12, 2);
  FeatureRasterizer r;
  const FeatureMaps& m = r.forward(list, f, 2, 24, 24);
  for (int y = 0; y < 24; ++y)
    for (int x = 0; x < 24; ++x) {
      // Walk the blend by hand; T must never increase.
      float t = 1.0f, prev = 1.0f;
      for (const auto& g : list) {
        const Eigen::Vector2f d(x + 0.5f - g.mean2d.x(), y + 0.5f - g.mean2d.y());
        const float a = std::min(0.99f, g.opacity * std::exp(-0.5f * d.dot(g.cov2d.inverse() * d)));
        if (a < 1.0f / 255.0f) continue;
        if (t * (1.0f - a) < 1e-4f) break;
        t *= 1.0f - a;
        ASSERT_LE(t, prev);
        prev = t;
      }
      EXPECT_NEAR(m.alpha[y * 24 + x], 1.0f - t, 1e-5f);
      EXPECT_GE(m.alpha[y * 24 + x], 0.0f);
      EXPECT_LE(m.alpha[y * 24 + x], 1.0f);
    }
}

TEST(SplatForward, BitIdenticalAcrossThreadCounts) {
  std::mt19937_64 rng(34);
  const auto list = test_support::random_projected(rng, 30, 64, 48);
  const auto f = random_features(rng, 30, 4);
  setenv("SLGS_THREADS", "1", 1);
  FeatureRasterizer a;
  const FeatureMaps one = a.forward(list, f, 4, 64, 48);
  std::vector<float> g(one.features.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = std::sin(0.1f * i);
  const SplatGradients ga = a.backward(g);
  setenv("SLGS_THREADS", "4", 1);
  FeatureRasterizer b;
  const FeatureMaps four = b.forward(list, f, 4, 64, 48);
  const SplatGradients gb = b.backward(g);
  unsetenv("SLGS_THREADS");
  EXPECT_EQ(one.features, four.features);
  EXPECT_EQ(ga.features, gb.features);
  EXPECT_EQ(ga.opacity, gb.opacity);
}

TEST(SplatBackward, RequiresForward) {
  FeatureRasterizer r;
  EXPECT_THROW(r.backward(std::vector<float>(4)), StateError);
}

TEST(SplatBackward, ZeroUpstreamGivesZeroGradients) {
  std::mt19937_64 rng(35);
  const auto list = test_support::random_projected(rng, 6, 16, 16);
  const auto f = random_features(rng, 6, 3);
  FeatureRasterizer r;
  r.forward(list, f, 3, 16, 16);
  const SplatGradients g = r.backward(std::vector<float>(3 * 256, 0.0f));
  for (float v : g.features) EXPECT_EQ(v, 0.0f);
  for (float v : g.opacity) EXPECT_EQ(v, 0.0f);
  for (const auto& m : g.mean2d) EXPECT_TRUE(m.isZero());
  for (const auto& c : g.cov2d) EXPECT_TRUE(c.isZero());
}

TEST(SplatBackward, SingleGaussianFeatureGradientIsAlphaSum) {
  std::mt19937_64 rng(36);
  const auto list = test_support::random_projected(rng, 1, 16, 16, 0.3f, 0.8f);
  const std::vector<float> f{0.5f};
  FeatureRasterizer r;
  const FeatureMaps& m = r.forward(list, f, 1, 16, 16);
  const SplatGradients g = r.backward(std::vector<float>(256, 1.0f));
  double alpha_sum = 0.0;
  for (float a : m.alpha) alpha_sum += a;  // single term: T = 1, weight = alpha
  EXPECT_NEAR(g.features[0], alpha_sum, 1e-4 * alpha_sum);
}

TEST(SplatBackward, OverlappingScenesMatchFiniteDifferences) {
  std::mt19937_64 rng(37);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 8, c = 3;
    const auto list = test_support::random_projected(rng, n, 16, 16, 0.1f, 0.7f);
    ad::Tensor opac(ad::Shape{n, 1});
    for (const auto& g : list) opac[g.source_index] = g.opacity;
    const ad::Tensor feats(ad::Shape{n, c}, random_features(rng, n, c));
    auto fn = [](const std::vector<ad::Tensor>& in) {
      const ProjectionBatch b = test_support::batch_from_geometry(in[0], in[1]);
      // Mean over pixels keeps outputs O(1).
      return ad::scale(splat(b, in[1], in[2], 16, 16), 1.0f / 16.0f);
    };
    slgs::test_support::GradCheckOptions opt;
    opt.max_coords_per_input = 48;
    opt.regime = [](const std::vector<ad::Tensor>& in) {
      return slgs::test_support::splat_regime(test_support::batch_from_geometry(in[0], in[1]).visible, 16, 16);
    };
    const auto res = slgs::test_support::gradcheck(fn, {test_support::geometry_of(list), opac, feats}, rng, opt);
    EXPECT_TRUE(res.ok()) << "trial " << trial << ": " << res.first_failure;
    EXPECT_LT(res.skipped, res.checked / 5) << "trial " << trial;
  }
}
