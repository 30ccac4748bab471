#pragma once

#include <Eigen/Dense>

#include <random>
#include <vector>

#include "slgs/projection.hpp"
#include "slgs/scene_model.hpp"

namespace slgs::test_support {

inline Eigen::Vector4f random_quaternion(std::mt19937_64& rng) {
  std::normal_distribution<float> nd;
  Eigen::Vector4f q(nd(rng), nd(rng), nd(rng), nd(rng));
  return q.normalized();
}

inline Eigen::Matrix3f random_rotation(std::mt19937_64& rng) { return rotation_matrix(random_quaternion(rng)); }

/// Camera on a sphere of `radius` looking at the origin.
inline CameraView orbit_camera(std::mt19937_64& rng, int width, int height, float radius = 4.0f) {
  std::normal_distribution<float> nd;
  Eigen::Vector3f eye(nd(rng), nd(rng), nd(rng));
  eye = eye.normalized() * radius;
  CameraView v;
  v.width = width;
  v.height = height;
  v.focal_x = v.focal_y = 1.2f * width;
  v.principal_point = Eigen::Vector2f(0.5f * width, 0.5f * height);
  v.world_to_camera = look_at(eye, Eigen::Vector3f::Zero());
  return v;
}

/// Screen-space Gaussians with random footprints inside a w x h image,
/// already depth-sorted.
inline std::vector<ProjectedGaussian> random_projected(std::mt19937_64& rng, int n, int width, int height,
                                                       float min_opacity = 0.05f, float max_opacity = 1.0f) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<ProjectedGaussian> out;
  for (int i = 0; i < n; ++i) {
    ProjectedGaussian g;
    g.mean2d = Eigen::Vector2f(u(rng) * width, u(rng) * height);
    const float angle = u(rng) * 3.14159f;
    const float s0 = 0.5f + 4.0f * u(rng), s1 = 0.5f + 4.0f * u(rng);
    Eigen::Matrix2f r;
    r << std::cos(angle), -std::sin(angle), std::sin(angle), std::cos(angle);
    g.cov2d = r * Eigen::Vector2f(s0 * s0, s1 * s1).asDiagonal() * r.transpose();
    g.cov2d(0, 0) += kCovarianceFloor;
    g.cov2d(1, 1) += kCovarianceFloor;
    g.depth = 1.0f + 5.0f * u(rng);
    g.radius = std::max(1.0f, 3.0f * std::sqrt(max_eigenvalue(g.cov2d)));
    g.opacity = min_opacity + (max_opacity - min_opacity) * u(rng);
    g.source_index = i;
    out.push_back(g);
  }
  sort_by_depth(out);
  return out;
}

}  // namespace slgs::test_support
