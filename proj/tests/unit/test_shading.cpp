#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "slgs/shading.hpp"
#include "support/gradcheck.hpp"
#include "support/random_scene.hpp"

using namespace slgs;
using slgs::test_support::gradcheck;

namespace {

Eigen::Vector3f random_unit(std::mt19937_64& rng) {
  std::normal_distribution<float> nd;
  return Eigen::Vector3f(nd(rng), nd(rng), nd(rng)).normalized();
}

ad::Tensor random_dirs(std::mt19937_64& rng, int n) {
  ad::Tensor t(ad::Shape{n, 3});
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector3f d = random_unit(rng);
    for (int c = 0; c < 3; ++c) t[3 * i + c] = d[c];
  }
  return t;
}

void zero_all(nn::Mlp& mlp) {
  for (auto& l : mlp.layers) {
    for (float& v : l.weight.data()) v = 0.0f;
    for (float& v : l.bias.data()) v = 0.0f;
  }
}

}  // namespace

TEST(ShBasis, ConstantTermIsInverseTwoRootPi) {
  std::mt19937_64 rng(40);
  const double expected = 1.0 / (2.0 * std::sqrt(M_PI));
  for (int i = 0; i < 10; ++i) {
    const Eigen::Vector3f d = random_unit(rng);
    EXPECT_NEAR(sh_basis<double>(d.x(), d.y(), d.z())[0], expected, 1e-12);
  }
  EXPECT_NEAR(expected, 0.28209479, 1e-8);
}

TEST(ShBasis, AxialDirectionKeepsOnlyZonalTerms) {
  const auto b = sh_basis<double>(0.0, 0.0, 1.0);
  for (int k : {1, 3, 4, 5, 7, 8, 9, 10, 11, 13, 14, 15}) EXPECT_EQ(b[k], 0.0) << k;
  for (int k : {0, 2, 6, 12}) EXPECT_NE(b[k], 0.0) << k;
}

TEST(ShBasis, MonteCarloOrthonormality) {
  std::mt19937_64 rng(41);
  const int samples = 100000;
  std::array<std::array<double, 16>, 16> gram{};
  for (int s = 0; s < samples; ++s) {
    const Eigen::Vector3f d = random_unit(rng);
    const auto b = sh_basis<double>(d.x(), d.y(), d.z());
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < 16; ++j) gram[i][j] += b[i] * b[j];
  }
  const double area = 4.0 * M_PI / samples;
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j) EXPECT_NEAR(gram[i][j] * area, i == j ? 1.0 : 0.0, 0.02) << i << "," << j;
}

TEST(ShEncode, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    const auto res = gradcheck([](const std::vector<ad::Tensor>& in) { return sh_encode(in[0]); },
                               {random_dirs(rng, 4)}, rng);
    EXPECT_TRUE(res.ok()) << res.first_failure;
  }
}

TEST(PseudoNormal, ShortestAxisAndFlip) {
  const Eigen::Matrix3f r = Eigen::Matrix3f::Identity();
  const Eigen::Vector3f s(0.1f, 1.0f, 2.0f);
  EXPECT_EQ(pseudo_normal(r, s, Eigen::Vector3f(1, 0, 0)), Eigen::Vector3f(1, 0, 0));
  EXPECT_EQ(pseudo_normal(r, s, Eigen::Vector3f(-1, 0, 0)), Eigen::Vector3f(-1, 0, 0));
  EXPECT_EQ(pseudo_normal(r, Eigen::Vector3f(1, 1, 2), Eigen::Vector3f(1, 0, 0)), Eigen::Vector3f(1, 0, 0));
}

TEST(PseudoNormal, FacesViewDirectionOnRandomTriples) {
  std::mt19937_64 rng(43);
  std::uniform_real_distribution<float> u(0.01f, 3.0f);
  for (int i = 0; i < 10000; ++i) {
    const Eigen::Vector3f n = pseudo_normal(test_support::random_rotation(rng), Eigen::Vector3f(u(rng), u(rng), u(rng)),
                                            random_unit(rng));
    ASSERT_GE(n.dot(n), 0.999f);
  }
  for (int i = 0; i < 10000; ++i) {
    const Eigen::Vector3f v = random_unit(rng);
    ASSERT_GE(pseudo_normal(test_support::random_rotation(rng), Eigen::Vector3f(u(rng), u(rng), u(rng)), v).dot(v), 0.0f);
  }
}

TEST(PseudoNormal, InvariantToSwappingLongAxes) {
  std::mt19937_64 rng(44);
  std::uniform_real_distribution<float> u(0.5f, 3.0f);
  for (int i = 0; i < 200; ++i) {
    const Eigen::Matrix3f r = test_support::random_rotation(rng);
    const Eigen::Vector3f s(0.1f, u(rng), u(rng));
    Eigen::Matrix3f r_swapped = r;
    r_swapped.col(1) = r.col(2);
    r_swapped.col(2) = r.col(1);
    const Eigen::Vector3f v = random_unit(rng);
    EXPECT_EQ(pseudo_normal(r, s, v), pseudo_normal(r_swapped, Eigen::Vector3f(s[0], s[2], s[1]), v));
  }
}

TEST(Reflect, NormalIncidenceAndGrazing) {
  const Eigen::Vector3f n(0, 0, 1);
  EXPECT_TRUE(reflect(n, n).isApprox(n));
  EXPECT_TRUE(reflect(Eigen::Vector3f(1, 0, 0), n).isApprox(Eigen::Vector3f(-1, 0, 0)));
}

TEST(Reflect, PreservesLengthAndAngle) {
  std::mt19937_64 rng(45);
  for (int i = 0; i < 1000; ++i) {
    const Eigen::Vector3f w = random_unit(rng), n = random_unit(rng);
    const Eigen::Vector3f o = reflect(w, n);
    EXPECT_NEAR(o.norm(), 1.0f, 1e-5f);
    EXPECT_NEAR(o.dot(n), w.dot(n), 1e-5f);
  }
}

TEST(PredictNormal, ZeroWeightsNormalizeTheBias) {
  std::mt19937_64 rng(46);
  ShadingNets nets(16, rng);
  auto& last = nets.normal_mlp.layers.back();
  for (float& v : last.weight.data()) v = 0.0f;
  last.bias = ad::Tensor({1, 3}, {3.0f, 0.0f, 4.0f});
  const ad::Tensor n = predict_normal(nets, ad::uniform({2, 16}, -1, 1, rng));
  EXPECT_FLOAT_EQ(n[0], 0.6f);
  EXPECT_FLOAT_EQ(n[2], 0.8f);
  zero_all(nets.normal_mlp);
  const ad::Tensor z = predict_normal(nets, ad::uniform({1, 16}, -1, 1, rng));
  EXPECT_EQ(z[0], 0.0f);
  EXPECT_EQ(z[1], 0.0f);
  EXPECT_EQ(z[2], 1.0f);
}

TEST(PredictNormal, UnitLengthOutputs) {
  std::mt19937_64 rng(47);
  ShadingNets nets(16, rng);
  const ad::Tensor n = predict_normal(nets, ad::uniform({100, 16}, -1, 1, rng));
  for (int i = 0; i < 100; ++i) {
    const double len = std::sqrt(double(n[3 * i]) * n[3 * i] + double(n[3 * i + 1]) * n[3 * i + 1] +
                                 double(n[3 * i + 2]) * n[3 * i + 2]);
    EXPECT_NEAR(len, 1.0, 1e-5);
  }
}

TEST(PredictNormal, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(48);
  for (int trial = 0; trial < 20; ++trial) {
    ShadingNets nets(16, rng);
    auto& l0 = nets.normal_mlp.layers[0];
    const auto res = gradcheck(
        [&nets](const std::vector<ad::Tensor>& in) {
          ShadingNets local = nets;
          local.normal_mlp.layers[0].weight = in[1];
          return predict_normal(local, in[0]);
        },
        {ad::uniform({3, 16}, -1, 1, rng), l0.weight}, rng);
    EXPECT_TRUE(res.ok()) << res.first_failure;
  }
}

TEST(PredictViewMask, StaysInOpenUnitInterval) {
  std::mt19937_64 rng(49);
  ShadingNets nets(16, rng);
  const ad::Tensor m = predict_view_mask(nets, random_dirs(rng, 1000), random_dirs(rng, 1000));
  for (float v : m.data()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
}

TEST(PredictViewMask, ZeroNetworkGivesHalf) {
  std::mt19937_64 rng(50);
  ShadingNets nets(16, rng);
  zero_all(nets.mask_mlp);
  const ad::Tensor m = predict_view_mask(nets, random_dirs(rng, 5), random_dirs(rng, 5));
  for (float v : m.data()) EXPECT_EQ(v, 0.5f);
}

TEST(PredictViewMask, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(51);
  for (int trial = 0; trial < 20; ++trial) {
    ShadingNets nets(16, rng);
    const auto res = gradcheck(
        [&nets](const std::vector<ad::Tensor>& in) { return predict_view_mask(nets, in[0], in[1]); },
        {random_dirs(rng, 4), random_dirs(rng, 4)}, rng);
    EXPECT_TRUE(res.ok()) << res.first_failure;
  }
}

TEST(Shading, NormalThenMaskChainIsDifferentiable) {
  std::mt19937_64 rng(52);
  for (int trial = 0; trial < 20; ++trial) {
    ShadingNets nets(16, rng);
    const auto res = gradcheck(
        [&nets](const std::vector<ad::Tensor>& in) {
          return predict_view_mask(nets, in[1], predict_normal(nets, in[0]));
        },
        {ad::uniform({4, 16}, -1, 1, rng), random_dirs(rng, 4)}, rng);
    EXPECT_TRUE(res.ok()) << res.first_failure;
  }
}

TEST(ViewDirections, PointFromCameraTowardGaussian) {
  const ad::Tensor pos({2, 3}, {0, 0, 5, 3, 0, 0});
  const ad::Tensor d = view_directions(pos, Eigen::Vector3f(0, 0, 1));
  EXPECT_FLOAT_EQ(d[2], 1.0f);
  EXPECT_FLOAT_EQ(d[3], 3.0f / std::sqrt(10.0f));
  EXPECT_FLOAT_EQ(d[5], -1.0f / std::sqrt(10.0f));
}
