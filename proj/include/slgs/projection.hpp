#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <optional>
#include <vector>

#include "slgs/dual.hpp"
#include "slgs/scene_model.hpp"
#include "slgs/tensor.hpp"

namespace slgs {

inline constexpr float kDefaultNearPlane = 0.01f;
inline constexpr float kCovarianceFloor = 0.3f;  // px^2, added to both diagonal entries
inline constexpr float kMinAlpha = 1.0f / 255.0f;

/// Mahalanobis radius beyond which even a maximally opaque Gaussian falls
/// under the 1/255 blending threshold: sqrt(2 ln 255).
inline const float kContributionSigmas = std::sqrt(2.0f * std::log(255.0f));

struct ProjectedGaussian {
  Eigen::Vector2f mean2d = Eigen::Vector2f::Zero();
  Eigen::Matrix2f cov2d = Eigen::Matrix2f::Identity();
  float depth = 0.0f;
  float radius = 0.0f;   // 3 * sqrt(largest eigenvalue of cov2d), >= 1
  float opacity = 0.0f;  // activated
  int source_index = 0;
};

/// Sigma = R S S^T R^T.
inline Eigen::Matrix3f build_covariance(const Eigen::Matrix3f& rotation, const Eigen::Vector3f& scale) {
  const Eigen::Matrix3f m = rotation * scale.asDiagonal();
  return m * m.transpose();
}

inline float max_eigenvalue(const Eigen::Matrix2f& c) {
  const float mid = 0.5f * (c(0, 0) + c(1, 1));
  const float det = c(0, 0) * c(1, 1) - c(0, 1) * c(1, 0);
  return mid + std::sqrt(std::max(0.1f, mid * mid - det));
}

template <class T>
struct ScreenGeometry {
  T mean_x, mean_y;
  T cov_xx, cov_xy, cov_yy;  // includes the stabilization floor
  T depth;
};

/// Perspective projection of one Gaussian with the local-affine (EWA)
/// covariance approximation. Generic over the scalar so the same code yields
/// values (double) and Jacobians (Dual<10>).
template <class T>
ScreenGeometry<T> screen_geometry(const std::array<T, 3>& position, const std::array<T, 4>& rotation,
                                  const std::array<T, 3>& log_scale, const CameraView& view) {
  using std::exp;
  const auto r = quaternion_to_matrix(rotation[0], rotation[1], rotation[2], rotation[3]);
  const T s2[3] = {exp(T(2.0) * log_scale[0]), exp(T(2.0) * log_scale[1]), exp(T(2.0) * log_scale[2])};

  T sigma[3][3];
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      sigma[i][j] = r[3 * i] * s2[0] * r[3 * j] + r[3 * i + 1] * s2[1] * r[3 * j + 1] +
                    r[3 * i + 2] * s2[2] * r[3 * j + 2];

  const Eigen::Matrix4d w = view.world_to_camera.cast<double>();
  T t[3];
  for (int i = 0; i < 3; ++i)
    t[i] = T(w(i, 0)) * position[0] + T(w(i, 1)) * position[1] + T(w(i, 2)) * position[2] + T(w(i, 3));

  const double fx = view.focal_x, fy = view.focal_y;
  const double cx = view.principal_point.x(), cy = view.principal_point.y();
  const T& tz = t[2];

  // Tangent-plane clamp at 1.3x the frustum half-extent (asymmetric when the
  // principal point is off-center).
  auto clamp_ratio = [&](const T& coord, double lo, double hi) {
    const double ratio = value_of(coord) / value_of(tz);
    if (ratio < lo) return T(lo) * tz;
    if (ratio > hi) return T(hi) * tz;
    return coord;
  };
  const double margin_x = 0.15 * view.width / fx, margin_y = 0.15 * view.height / fy;
  const T tx = clamp_ratio(t[0], -cx / fx - margin_x, (view.width - cx) / fx + margin_x);
  const T ty = clamp_ratio(t[1], -cy / fy - margin_y, (view.height - cy) / fy + margin_y);

  const T inv_z = T(1.0) / tz;
  const T j00 = T(fx) * inv_z, j02 = -T(fx) * tx * inv_z * inv_z;
  const T j11 = T(fy) * inv_z, j12 = -T(fy) * ty * inv_z * inv_z;

  // M = J * W_rot (2x3).
  T m[2][3];
  for (int c = 0; c < 3; ++c) {
    m[0][c] = j00 * T(w(0, c)) + j02 * T(w(2, c));
    m[1][c] = j11 * T(w(1, c)) + j12 * T(w(2, c));
  }
  T ms[2][3];
  for (int i = 0; i < 2; ++i)
    for (int c = 0; c < 3; ++c) ms[i][c] = m[i][0] * sigma[0][c] + m[i][1] * sigma[1][c] + m[i][2] * sigma[2][c];
  auto quad = [&](int i, int j) { return ms[i][0] * m[j][0] + ms[i][1] * m[j][1] + ms[i][2] * m[j][2]; };

  ScreenGeometry<T> out;
  out.mean_x = T(fx) * t[0] * inv_z + T(cx);
  out.mean_y = T(fy) * t[1] * inv_z + T(cy);
  out.cov_xx = quad(0, 0) + T(kCovarianceFloor);
  out.cov_xy = quad(0, 1);
  out.cov_yy = quad(1, 1) + T(kCovarianceFloor);
  out.depth = tz;
  return out;
}

namespace detail {

inline ScreenGeometry<double> screen_geometry_of(const LatentGaussian& g, const CameraView& v) {
  return screen_geometry<double>({g.position.x(), g.position.y(), g.position.z()},
                                 {g.rotation[0], g.rotation[1], g.rotation[2], g.rotation[3]},
                                 {g.log_scale.x(), g.log_scale.y(), g.log_scale.z()}, v);
}

// Returns the retained projection, or nullopt when culled.
inline std::optional<ProjectedGaussian> finish_projection(const ScreenGeometry<double>& s, float opacity,
                                                          const CameraView& v, float near, int source_index) {
  if (!(s.depth > near)) return std::nullopt;
  ProjectedGaussian p;
  p.mean2d = Eigen::Vector2f(static_cast<float>(s.mean_x), static_cast<float>(s.mean_y));
  p.cov2d << static_cast<float>(s.cov_xx), static_cast<float>(s.cov_xy), static_cast<float>(s.cov_xy),
      static_cast<float>(s.cov_yy);
  if (!p.mean2d.allFinite() || !p.cov2d.allFinite()) return std::nullopt;
  const float sigma_max = std::sqrt(max_eigenvalue(p.cov2d));
  const float extent = kContributionSigmas * sigma_max;
  if (p.mean2d.x() + extent < 0.0f || p.mean2d.x() - extent > static_cast<float>(v.width) ||
      p.mean2d.y() + extent < 0.0f || p.mean2d.y() - extent > static_cast<float>(v.height))
    return std::nullopt;
  p.depth = static_cast<float>(s.depth);
  p.radius = std::max(1.0f, 3.0f * sigma_max);
  p.opacity = opacity;
  p.source_index = source_index;
  return p;
}

}  // namespace detail

/// Projects one primitive; nullopt when it lies behind the near plane or its
/// contribution footprint misses the image.
inline std::optional<ProjectedGaussian> project(const LatentGaussian& g, const CameraView& v,
                                                float near = kDefaultNearPlane, int source_index = 0) {
  return detail::finish_projection(detail::screen_geometry_of(g, v), activate(g).opacity, v, near, source_index);
}

/// Ascending depth; equal depths ordered by source index.
inline void sort_by_depth(std::vector<ProjectedGaussian>& list) {
  std::stable_sort(list.begin(), list.end(), [](const ProjectedGaussian& a, const ProjectedGaussian& b) {
    if (a.depth != b.depth) return a.depth < b.depth;
    return a.source_index < b.source_index;
  });
}

/// Projection of a whole cloud on the tape.
struct ProjectionBatch {
  /// (N x 6) rows: mean_x, mean_y, cov_xx, cov_xy, cov_yy, depth. Culled rows
  /// are zero and receive no gradient.
  ad::Tensor geometry;
  std::vector<ProjectedGaussian> visible;  // depth-sorted
  std::vector<float> radii;                // per source Gaussian, 0 when culled
};

/// positions (N x 3), rotations (N x 4), log_scales (N x 3), opacities (N x 1,
/// activated; read only for culling metadata).
inline ProjectionBatch project_batch(const ad::Tensor& positions, const ad::Tensor& rotations,
                                     const ad::Tensor& log_scales, const ad::Tensor& opacities,
                                     const CameraView& view, float near = kDefaultNearPlane) {
  const int n = positions.dim(0);
  if (positions.shape() != ad::Shape{n, 3} || rotations.shape() != ad::Shape{n, 4} ||
      log_scales.shape() != ad::Shape{n, 3} || opacities.size() != static_cast<std::size_t>(n))
    throw ShapeError("project_batch: inconsistent shapes " + ad::to_string(positions.shape()) + ", " +
                     ad::to_string(rotations.shape()) + ", " + ad::to_string(log_scales.shape()) + ", " +
                     ad::to_string(opacities.shape()));
  ProjectionBatch batch;
  batch.radii.assign(n, 0.0f);
  ad::Tensor geometry(ad::Shape{n, 6}, 0.0f);
  using D = Dual<10>;
  // Jacobians of the 6 outputs w.r.t. (position, rotation, log_scale).
  auto jac = std::make_shared<std::vector<std::array<double, 60>>>(n);
  auto retained = std::make_shared<std::vector<char>>(n, 0);
  for (int i = 0; i < n; ++i) {
    std::array<D, 3> p, s;
    std::array<D, 4> q;
    for (int k = 0; k < 3; ++k) p[k] = D::variable(positions[3 * i + k], k);
    for (int k = 0; k < 4; ++k) q[k] = D::variable(rotations[4 * i + k], 3 + k);
    for (int k = 0; k < 3; ++k) s[k] = D::variable(log_scales[3 * i + k], 7 + k);
    const ScreenGeometry<D> g = screen_geometry(p, q, s, view);
    const ScreenGeometry<double> gv{g.mean_x.v, g.mean_y.v, g.cov_xx.v, g.cov_xy.v, g.cov_yy.v, g.depth.v};
    auto proj = detail::finish_projection(gv, opacities[i], view, near, i);
    if (!proj) continue;
    (*retained)[i] = 1;
    batch.radii[i] = proj->radius;
    batch.visible.push_back(*proj);
    const D* outs[6] = {&g.mean_x, &g.mean_y, &g.cov_xx, &g.cov_xy, &g.cov_yy, &g.depth};
    for (int r = 0; r < 6; ++r) {
      geometry[6 * i + r] = static_cast<float>(outs[r]->v);
      for (int c = 0; c < 10; ++c) (*jac)[i][10 * r + c] = outs[r]->d[c];
    }
  }
  sort_by_depth(batch.visible);
  batch.geometry = ad::make_result(
      std::move(geometry), {&positions, &rotations, &log_scales},
      [jac, retained, n](std::span<const float> g, std::span<float* const> gi) {
        for (int i = 0; i < n; ++i) {
          if (!(*retained)[i]) continue;
          for (int c = 0; c < 10; ++c) {
            double acc = 0.0;
            for (int r = 0; r < 6; ++r) acc += (*jac)[i][10 * r + c] * g[6 * i + r];
            float* dst = c < 3 ? gi[0] : (c < 7 ? gi[1] : gi[2]);
            const int off = c < 3 ? 3 * i + c : (c < 7 ? 4 * i + c - 3 : 3 * i + c - 7);
            if (dst) dst[off] += static_cast<float>(acc);
          }
        }
      });
  return batch;
}

}  // namespace slgs
