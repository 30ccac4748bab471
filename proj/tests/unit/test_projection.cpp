#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <random>

#include "slgs/projection.hpp"
#include "support/random_scene.hpp"

using namespace slgs;

namespace {

CameraView axis_camera(int size = 32, float focal = 40.0f) {
  CameraView v;
  v.width = v.height = size;
  v.focal_x = v.focal_y = focal;
  v.principal_point = Eigen::Vector2f(0.5f * size, 0.5f * size);
  return v;
}

}  // namespace

TEST(BuildCovariance, IdentityAndDiagonal) {
  EXPECT_TRUE(build_covariance(Eigen::Matrix3f::Identity(), Eigen::Vector3f::Ones()).isApprox(Eigen::Matrix3f::Identity()));
  const Eigen::Matrix3f d = build_covariance(Eigen::Matrix3f::Identity(), Eigen::Vector3f(0.1f, 1.0f, 2.0f));
  EXPECT_TRUE(d.isApprox(Eigen::Vector3f(0.01f, 1.0f, 4.0f).asDiagonal().toDenseMatrix()));
}

TEST(BuildCovariance, EigenvaluesAreSquaredScales) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<float> u(0.1f, 2.0f);
  for (int i = 0; i < 100; ++i) {
    const Eigen::Vector3f s(u(rng), u(rng), u(rng));
    const Eigen::Matrix3f sigma = build_covariance(test_support::random_rotation(rng), s);
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3f> es(sigma);
    std::array<float, 3> expected{s[0] * s[0], s[1] * s[1], s[2] * s[2]};
    std::sort(expected.begin(), expected.end());
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(es.eigenvalues()[k], expected[k], 1e-5f);
  }
}

TEST(Project, CullsBehindNearPlane) {
  LatentGaussian g;  // at the camera center, depth 0
  EXPECT_FALSE(project(g, axis_camera()).has_value());
  g.position.z() = -1.0f;
  EXPECT_FALSE(project(g, axis_camera()).has_value());
}

TEST(Project, OpticalAxisMapsToPrincipalPoint) {
  LatentGaussian g;
  g.position = Eigen::Vector3f(0, 0, 5);
  CameraView v = axis_camera();
  v.principal_point = Eigen::Vector2f(13.0f, 19.0f);
  const auto p = project(g, v);
  ASSERT_TRUE(p);
  EXPECT_FLOAT_EQ(p->mean2d.x(), 13.0f);
  EXPECT_FLOAT_EQ(p->mean2d.y(), 19.0f);
}

TEST(Project, IsotropicCovarianceMatchesSmallAngleFormula) {
  const float d = 6.0f, s = 0.2f, f = 40.0f;
  LatentGaussian g;
  g.position = Eigen::Vector3f(0, 0, d);
  g.log_scale.setConstant(std::log(s));
  const auto p = project(g, axis_camera(32, f));
  ASSERT_TRUE(p);
  const float expected = (f * s / d) * (f * s / d) + 0.3f;
  EXPECT_NEAR(p->cov2d(0, 0), expected, 0.05f * expected);
  EXPECT_NEAR(p->cov2d(1, 1), expected, 0.05f * expected);
  EXPECT_NEAR(p->cov2d(0, 1), 0.0f, 1e-6f);
}

TEST(Project, CullsFootprintOutsideImage) {
  LatentGaussian g;
  g.position = Eigen::Vector3f(20.0f, 0.0f, 5.0f);  // far to the right
  g.log_scale.setConstant(std::log(0.01f));
  EXPECT_FALSE(project(g, axis_camera()).has_value());
}

TEST(Project, CovarianceSymmetricPositiveDefinite) {
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  int retained = 0;
  for (int i = 0; i < 200; ++i) {
    LatentGaussian g;
    g.position = Eigen::Vector3f(u(rng), u(rng), u(rng));
    g.rotation = test_support::random_quaternion(rng);
    g.log_scale = Eigen::Vector3f(u(rng), u(rng), u(rng)) * 2.0f - Eigen::Vector3f::Constant(2.0f);
    const auto p = project(g, test_support::orbit_camera(rng, 32, 32));
    if (!p) continue;
    ++retained;
    EXPECT_LE(std::abs(p->cov2d(0, 1) - p->cov2d(1, 0)), 1e-7f);
    EXPECT_GT(p->cov2d.determinant(), 0.0f);
    EXPECT_GT(p->cov2d(0, 0), 0.0f);
    EXPECT_GE(p->radius, 1.0f);
    EXPECT_GT(p->depth, kDefaultNearPlane);
  }
  EXPECT_GT(retained, 150);
}

TEST(SortByDepth, OrdersAscendingAndStable) {
  std::vector<ProjectedGaussian> list(3);
  const float depths[3] = {3, 1, 2};
  for (int i = 0; i < 3; ++i) {
    list[i].depth = depths[i];
    list[i].source_index = i;
  }
  sort_by_depth(list);
  EXPECT_EQ(list[0].depth, 1);
  EXPECT_EQ(list[1].depth, 2);
  EXPECT_EQ(list[2].depth, 3);

  std::vector<ProjectedGaussian> ties(4);
  for (int i = 0; i < 4; ++i) {
    ties[i].depth = 1.0f;
    ties[i].source_index = i;
  }
  sort_by_depth(ties);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(ties[i].source_index, i);
}

TEST(SortByDepth, RandomListsBecomeSorted) {
  std::mt19937_64 rng(23);
  std::uniform_int_distribution<int> ud(0, 20);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<ProjectedGaussian> list(100);
    for (int i = 0; i < 100; ++i) {
      list[i].depth = static_cast<float>(ud(rng));
      list[i].source_index = i;
    }
    sort_by_depth(list);
    for (int i = 1; i < 100; ++i) {
      ASSERT_LE(list[i - 1].depth, list[i].depth);
      if (list[i - 1].depth == list[i].depth) ASSERT_LT(list[i - 1].source_index, list[i].source_index);
    }
  }
}

// Tape gradients of the batched projection against central differences of
// the double-precision forward, 20 random primitives.
TEST(ProjectBatch, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(24);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::normal_distribution<double> nd;
  int checked = 0;
  while (checked < 20) {
    LatentGaussian g;
    g.position = Eigen::Vector3f(u(rng), u(rng), u(rng)) * 0.8f;
    g.rotation = test_support::random_quaternion(rng);
    g.log_scale = Eigen::Vector3f(u(rng), u(rng), u(rng)) * 0.5f - Eigen::Vector3f::Constant(1.0f);
    const CameraView v = test_support::orbit_camera(rng, 32, 32);
    ad::Tape tape;
    const ad::Tensor pos = tape.watch(ad::Tensor({1, 3}, {g.position.x(), g.position.y(), g.position.z()}));
    const ad::Tensor rot = tape.watch(ad::Tensor({1, 4}, {g.rotation[0], g.rotation[1], g.rotation[2], g.rotation[3]}));
    const ad::Tensor ls = tape.watch(ad::Tensor({1, 3}, {g.log_scale.x(), g.log_scale.y(), g.log_scale.z()}));
    const ProjectionBatch batch = project_batch(pos, rot, ls, ad::Tensor({1, 1}, 0.5f), v);
    if (batch.visible.empty()) continue;
    ++checked;
    std::array<double, 6> w;
    for (double& x : w) x = nd(rng);
    std::vector<float> wf(w.begin(), w.end());
    tape.backward(ad::sum(ad::mul(batch.geometry, ad::Tensor({1, 6}, wf))));
    const ad::Tensor gp = tape.grad(pos), gr = tape.grad(rot), gs = tape.grad(ls);

    auto objective = [&](std::array<double, 10> x) {
      const auto s = screen_geometry<double>({x[0], x[1], x[2]}, {x[3], x[4], x[5], x[6]}, {x[7], x[8], x[9]}, v);
      return w[0] * s.mean_x + w[1] * s.mean_y + w[2] * s.cov_xx + w[3] * s.cov_xy + w[4] * s.cov_yy + w[5] * s.depth;
    };
    // Build x0 from the float values the tape saw.
    std::array<double, 10> x0{pos[0], pos[1], pos[2], rot[0], rot[1], rot[2], rot[3], ls[0], ls[1], ls[2]};
    const float analytic[10] = {gp[0], gp[1], gp[2], gr[0], gr[1], gr[2], gr[3], gs[0], gs[1], gs[2]};
    for (int k = 0; k < 10; ++k) {
      auto xp = x0, xm = x0;
      xp[k] += 1e-3;
      xm[k] -= 1e-3;
      const double numeric = (objective(xp) - objective(xm)) / 2e-3;
      const double mag = std::max(std::abs(numeric), double(std::abs(analytic[k])));
      const double err = std::abs(numeric - analytic[k]);
      if (mag < 1e-2)
        EXPECT_LT(err, 1e-4) << "coord " << k;
      else
        EXPECT_LT(err / mag, 1e-2) << "coord " << k << " analytic " << analytic[k] << " numeric " << numeric;
    }
  }
}
