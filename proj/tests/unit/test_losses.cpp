#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include <random>

#include "slgs/losses.hpp"
#include "support/gradcheck.hpp"

using namespace slgs;
using slgs::test_support::gradcheck;

namespace {

// b = a + offsets bounded away from zero, so |a - b| has no kink within h.
ad::Tensor offset_away(const ad::Tensor& a, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> mag(0.05f, 0.3f);
  std::bernoulli_distribution sign;
  ad::Tensor b = a.clone();
  for (float& v : b.data()) v += sign(rng) ? mag(rng) : -mag(rng);
  return b;
}

ad::Tensor unit_rows(std::mt19937_64& rng, int n) {
  std::normal_distribution<float> nd;
  ad::Tensor t(ad::Shape{n, 3});
  for (int i = 0; i < n; ++i) {
    Eigen::Vector3f v(nd(rng), nd(rng), nd(rng));
    v.normalize();
    for (int c = 0; c < 3; ++c) t[3 * i + c] = v[c];
  }
  return t;
}

}  // namespace

TEST(L1, IdentityAndConstantOffset) {
  std::mt19937_64 rng(70);
  const ad::Tensor a = ad::uniform({3, 4, 4}, 0, 1, rng);
  EXPECT_EQ(l1(a, a).item(), 0.0f);
  ad::Tensor b = a.clone();
  for (float& v : b.data()) v += 0.1f;
  EXPECT_NEAR(l1(a, b).item(), 0.1f, 1e-6f);
  EXPECT_THROW(l1(a, ad::Tensor({3, 4, 5})), ShapeError);
}

TEST(L1, GradientIsSignOverCount) {
  std::mt19937_64 rng(71);
  const ad::Tensor a0 = ad::uniform({2, 3, 3}, 0, 1, rng);
  const ad::Tensor b = offset_away(a0, rng);
  ad::Tape tape;
  const ad::Tensor a = tape.watch(a0);
  tape.backward(l1(a, b));
  const ad::Tensor g = tape.grad(a);
  for (std::size_t i = 0; i < g.size(); ++i)
    EXPECT_FLOAT_EQ(g[i], (a0[i] > b[i] ? 1.0f : -1.0f) / static_cast<float>(g.size()));
  const auto res = gradcheck([&b](const std::vector<ad::Tensor>& in) { return l1(in[0], b); }, {a0}, rng);
  EXPECT_TRUE(res.ok()) << res.first_failure;
}

TEST(Ssim, SelfSimilarityIsOne) {
  std::mt19937_64 rng(72);
  const ad::Tensor x = ad::uniform({3, 16, 16}, 0, 1, rng);
  EXPECT_NEAR(ssim(x, x).item(), 1.0f, 1e-6f);
}

TEST(Ssim, InvertedCheckerboardIsAnticorrelated) {
  ad::Tensor x(ad::Shape{1, 16, 16});
  for (int y = 0; y < 16; ++y)
    for (int xx = 0; xx < 16; ++xx) x[y * 16 + xx] = static_cast<float>((y + xx) % 2);
  ad::Tensor inv = x.clone();
  for (float& v : inv.data()) v = 1.0f - v;
  EXPECT_LT(ssim(x, inv).item(), 0.0f);
}

TEST(Ssim, SymmetricAndBounded) {
  std::mt19937_64 rng(73);
  for (int trial = 0; trial < 20; ++trial) {
    const ad::Tensor a = ad::uniform({3, 12, 12}, 0, 1, rng), b = ad::uniform({3, 12, 12}, 0, 1, rng);
    const float ab = ssim(a, b).item(), ba = ssim(b, a).item();
    EXPECT_NEAR(ab, ba, 1e-6f);
    EXPECT_GE(ab, -1.0f);
    EXPECT_LE(ab, 1.0f);
  }
}

TEST(Ssim, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(74);
  for (int trial = 0; trial < 20; ++trial) {
    const ad::Tensor gt = ad::uniform({3, 16, 16}, 0, 1, rng);
    const auto res = gradcheck([&gt](const std::vector<ad::Tensor>& in) { return ssim(in[0], gt); },
                               {ad::uniform({3, 16, 16}, 0, 1, rng)}, rng);
    EXPECT_TRUE(res.ok()) << res.first_failure;
  }
}

TEST(NormalLoss, CosineCases) {
  const ad::Tensor z({1, 3}, {0, 0, 1});
  EXPECT_FLOAT_EQ(normal_loss(z, z).item(), 0.0f);
  EXPECT_FLOAT_EQ(normal_loss(z, ad::Tensor({1, 3}, {1, 0, 0})).item(), 1.0f);
  EXPECT_FLOAT_EQ(normal_loss(z, ad::Tensor({1, 3}, {0, 0, -1})).item(), 2.0f);
}

TEST(NormalLoss, ExactlyZeroForIdenticalRowsAndMatchesOneMinusCosine) {
  std::mt19937_64 rng(76);
  std::uniform_real_distribution<float> len(0.1f, 10.0f);
  for (int trial = 0; trial < 200; ++trial) {
    ad::Tensor a = unit_rows(rng, 5);
    for (float& v : a.data()) v *= len(rng);
    EXPECT_EQ(normal_loss(a, a).item(), 0.0f);
    const ad::Tensor b = unit_rows(rng, 5), c = unit_rows(rng, 5);
    double expected = 0.0;
    for (int r = 0; r < 5; ++r) {
      double dot = 0.0;
      for (int k = 0; k < 3; ++k) dot += double(b[3 * r + k]) * c[3 * r + k];
      expected += (1.0 - dot) / 5.0;
    }
    EXPECT_NEAR(normal_loss(b, c).item(), expected, 1e-6);
  }
}

TEST(NormalLoss, WeightsSelectRows) {
  const ad::Tensor n({2, 3}, {0, 0, 1, 0, 0, 1});
  const ad::Tensor t({2, 3}, {0, 0, 1, 0, 0, -1});
  const ad::Tensor only_first({2, 1}, {1, 0});
  EXPECT_FLOAT_EQ(normal_loss(n, t, &only_first).item(), 0.0f);
  EXPECT_FLOAT_EQ(normal_loss(n, t).item(), 1.0f);
}

TEST(TotalLoss, ZeroAtPerfectReconstruction) {
  std::mt19937_64 rng(75);
  const ad::Tensor gt = ad::uniform({3, 16, 16}, 0, 1, rng);
  const ad::Tensor n = unit_rows(rng, 7);
  EXPECT_EQ(total_loss(gt, gt, gt, n, n, LossWeights{}).total.item(), 0.0f);
}

TEST(TotalLoss, DegenerateWeightsReduceToPhotometric) {
  std::mt19937_64 rng(76);
  const ad::Tensor gt = ad::uniform({3, 16, 16}, 0, 1, rng), r = ad::uniform({3, 16, 16}, 0, 1, rng);
  const ad::Tensor d = ad::uniform({3, 16, 16}, 0, 1, rng);
  const LossWeights w{0.2f, 0.0f, 0.0f};
  const float expected = 0.8f * l1(r, gt).item() + 0.2f * (1.0f - ssim(r, gt).item()) / 2.0f;
  EXPECT_NEAR(total_loss(r, d, gt, unit_rows(rng, 4), unit_rows(rng, 4), w).total.item(), expected, 1e-6f);
}

TEST(TotalLoss, EqualsHandComposedSum) {
  std::mt19937_64 rng(77);
  const ad::Tensor gt = ad::uniform({3, 16, 16}, 0, 1, rng), r = ad::uniform({3, 16, 16}, 0, 1, rng);
  const ad::Tensor d = ad::uniform({3, 16, 16}, 0, 1, rng);
  const ad::Tensor n = unit_rows(rng, 5), p = unit_rows(rng, 5);
  auto photometric = [&gt](const ad::Tensor& x) {
    return 0.8 * l1(x, gt).item() + 0.2 * (1.0 - ssim(x, gt).item()) / 2.0;
  };
  double normal = 0.0;
  for (int i = 0; i < 5; ++i) normal += 1.0 - (n[3 * i] * p[3 * i] + n[3 * i + 1] * p[3 * i + 1] + n[3 * i + 2] * p[3 * i + 2]);
  const double expected = photometric(r) + 0.05 * photometric(d) + 0.001 * normal / 5.0;
  const LossTerms t = total_loss(r, d, gt, n, p, LossWeights{0.2f, 0.05f, 0.001f});
  EXPECT_NEAR(t.total.item(), expected, 1e-6);
  EXPECT_GE(t.total.item(), 0.0f);
}

TEST(TotalLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(78);
  for (int trial = 0; trial < 20; ++trial) {
    const ad::Tensor gt = ad::uniform({3, 12, 12}, 0, 1, rng);
    const ad::Tensor r = offset_away(gt, rng), d = offset_away(gt, rng);
    const ad::Tensor p = unit_rows(rng, 6);
    const auto res = gradcheck(
        [&gt, &p](const std::vector<ad::Tensor>& in) {
          return total_loss(in[0], in[1], gt, in[2], p, LossWeights{}).total;
        },
        {r, d, unit_rows(rng, 6)}, rng);
    EXPECT_TRUE(res.ok()) << res.first_failure;
  }
}

TEST(TotalLoss, RejectsNegativeWeights) {
  const ad::Tensor x({3, 8, 8}, 0.5f);
  const ad::Tensor n({1, 3}, {0, 0, 1});
  EXPECT_THROW(total_loss(x, x, x, n, n, LossWeights{0.2f, -1.0f, 0.0f}), ConfigError);
}

TEST(Psnr, KnownValues) {
  const ad::Tensor a({3, 4, 4}, 0.0f);
  const ad::Tensor b({3, 4, 4}, 0.1f);
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-6);
  EXPECT_EQ(psnr(a, a), kPsnrCap);
  const ad::Tensor c({1, 2, 2}, 0.0f), d({1, 2, 2}, 0.5f);
  EXPECT_NEAR(psnr(c, d), 6.0206, 1e-4);
}

TEST(Metrics, JsonLineFields) {
  const auto j = nlohmann::json::parse(metrics_line(12, 31.5, 0.9, 0.01));
  EXPECT_EQ(j["iter"], 12);
  EXPECT_DOUBLE_EQ(j["psnr"].get<double>(), 31.5);
  EXPECT_DOUBLE_EQ(j["ssim"].get<double>(), 0.9);
  EXPECT_DOUBLE_EQ(j["loss"].get<double>(), 0.01);
}
