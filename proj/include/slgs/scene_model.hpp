#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "slgs/errors.hpp"

namespace slgs {

/// Default latent split: 8 diffuse + 8 specular channels.
inline constexpr int kDefaultDiffuseDims = 8;
inline constexpr int kDefaultSpecularDims = 8;

/// Per-Gaussian scalar count of a 3D-GS primitive with degree-3 SH color,
/// as reported for the baseline this representation replaces.
inline constexpr int kShBaselineParamsPerGaussian = 62;

/// position(3) + opacity(1) + rotation(4) + log_scale(3) + latents.
constexpr int params_per_gaussian(int diffuse_dims, int specular_dims) {
  return 3 + 1 + 4 + 3 + diffuse_dims + specular_dims;
}

/// One optimizable primitive. Rotation is stored (w, x, y, z) and is not
/// required to be unit length; it is renormalized whenever it is consumed.
struct LatentGaussian {
  Eigen::Vector3f position = Eigen::Vector3f::Zero();
  float opacity_logit = 0.0f;
  Eigen::Vector4f rotation{1.0f, 0.0f, 0.0f, 0.0f};
  Eigen::Vector3f log_scale = Eigen::Vector3f::Zero();
  std::vector<float> f_diffuse = std::vector<float>(kDefaultDiffuseDims, 0.0f);
  std::vector<float> f_specular = std::vector<float>(kDefaultSpecularDims, 0.0f);
  std::vector<float> sh_coeffs;  // 48 values in the SH-color comparison mode only
};

struct ActivatedGaussian {
  float opacity;
  Eigen::Vector3f scale;
  Eigen::Matrix3f rotation;
};

inline float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }
inline float logit(float p) { return std::log(p / (1.0f - p)); }

/// Row-major rotation matrix of the normalized quaternion (w, x, y, z).
/// Templated so the projection can differentiate through it with duals.
template <class T>
std::array<T, 9> quaternion_to_matrix(const T& qw, const T& qx, const T& qy,
                                      const T& qz) {
  using std::sqrt;
  const T norm = sqrt(qw * qw + qx * qx + qy * qy + qz * qz);
  const T w = qw / norm, x = qx / norm, y = qy / norm, z = qz / norm;
  const T one(1.0), two(2.0);
  return {one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y),
          two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x),
          two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y)};
}

inline Eigen::Matrix3f rotation_matrix(const Eigen::Vector4f& q) {
  const auto m = quaternion_to_matrix<double>(q[0], q[1], q[2], q[3]);
  Eigen::Matrix3f r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r(i, j) = static_cast<float>(m[3 * i + j]);
  return r;
}

/// Inverse of rotation_matrix, returning the w >= 0 representative.
inline Eigen::Vector4f matrix_to_quaternion(const Eigen::Matrix3f& r) {
  Eigen::Quaterniond q(r.cast<double>());
  q.normalize();
  Eigen::Vector4f out(static_cast<float>(q.w()), static_cast<float>(q.x()),
                      static_cast<float>(q.y()), static_cast<float>(q.z()));
  if (out[0] < 0.0f) out = -out;
  return out;
}

inline bool all_finite(const LatentGaussian& g) {
  auto finite = [](float v) { return std::isfinite(v); };
  return g.position.allFinite() && std::isfinite(g.opacity_logit) &&
         g.rotation.allFinite() && g.log_scale.allFinite() &&
         std::all_of(g.f_diffuse.begin(), g.f_diffuse.end(), finite) &&
         std::all_of(g.f_specular.begin(), g.f_specular.end(), finite) &&
         std::all_of(g.sh_coeffs.begin(), g.sh_coeffs.end(), finite);
}

/// Applies the sigmoid / exp / quaternion-normalize activations.
inline ActivatedGaussian activate(const LatentGaussian& g) {
  if (!all_finite(g)) throw InvalidPrimitive("activate: non-finite Gaussian field");
  if (g.rotation.norm() == 0.0f) throw InvalidPrimitive("activate: zero quaternion");
  return {sigmoid(g.opacity_logit), g.log_scale.array().exp().matrix(),
          rotation_matrix(g.rotation)};
}

/// The scene: primitives plus the bookkeeping densification needs. The three
/// per-Gaussian arrays are kept the same length as `gaussians`.
struct GaussianCloud {
  int diffuse_dims = kDefaultDiffuseDims;
  int specular_dims = kDefaultSpecularDims;
  std::vector<LatentGaussian> gaussians;
  std::vector<float> grad_accum;  // summed view-space gradient norms
  std::vector<float> grad_count;  // number of views accumulated
  std::vector<float> max_radii;

  std::size_t size() const { return gaussians.size(); }

  void push_back(LatentGaussian g) {
    gaussians.push_back(std::move(g));
    grad_accum.push_back(0.0f);
    grad_count.push_back(0.0f);
    max_radii.push_back(0.0f);
  }

  float mean_grad(std::size_t i) const {
    return grad_count[i] > 0.0f ? grad_accum[i] / grad_count[i] : 0.0f;
  }

  void reset_stats() {
    std::fill(grad_accum.begin(), grad_accum.end(), 0.0f);
    std::fill(grad_count.begin(), grad_count.end(), 0.0f);
    std::fill(max_radii.begin(), max_radii.end(), 0.0f);
  }

  bool bookkeeping_consistent() const {
    return grad_accum.size() == gaussians.size() &&
           grad_count.size() == gaussians.size() &&
           max_radii.size() == gaussians.size();
  }

  int params_per_gaussian() const {
    return slgs::params_per_gaussian(diffuse_dims, specular_dims);
  }
};

/// Pinhole camera with a rigid world-to-camera transform (x right, y down,
/// z forward). `image_path` refers to the ground-truth image, if any.
struct CameraView {
  int width = 0;
  int height = 0;
  float focal_x = 1.0f;
  float focal_y = 1.0f;
  Eigen::Vector2f principal_point = Eigen::Vector2f::Zero();
  Eigen::Matrix4f world_to_camera = Eigen::Matrix4f::Identity();
  std::string image_path;

  Eigen::Matrix3f rotation() const { return world_to_camera.topLeftCorner<3, 3>(); }
  Eigen::Vector3f translation() const { return world_to_camera.topRightCorner<3, 1>(); }
};

inline void validate(const CameraView& v) {
  if (v.width <= 0 || v.height <= 0) throw InvalidCamera("camera: non-positive image size");
  if (!(v.focal_x > 0.0f) || !(v.focal_y > 0.0f))
    throw InvalidCamera("camera: focal lengths must be positive");
  if (!v.world_to_camera.allFinite()) throw InvalidCamera("camera: non-finite transform");
  const Eigen::Matrix3d r = v.rotation().cast<double>();
  if ((r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-5 ||
      std::abs(r.determinant() - 1.0) > 1e-5)
    throw InvalidCamera("camera: rotation block is not a proper rotation");
}

/// World-space camera center, -R^T t.
inline Eigen::Vector3f camera_center(const CameraView& v) {
  const Eigen::Matrix3d r = v.rotation().cast<double>();
  if (!v.world_to_camera.allFinite() || std::abs(r.determinant()) < 1e-12)
    throw InvalidCamera("camera_center: singular world_to_camera");
  return (-r.inverse() * v.translation().cast<double>()).cast<float>();
}

/// Builds a world-to-camera transform looking from `eye` at `target`
/// (camera +z toward the target, +y roughly along -up).
inline Eigen::Matrix4f look_at(const Eigen::Vector3f& eye, const Eigen::Vector3f& target,
                               const Eigen::Vector3f& up = Eigen::Vector3f(0, 1, 0)) {
  const Eigen::Vector3f forward = (target - eye).normalized();
  Eigen::Vector3f right = forward.cross(up);
  if (right.norm() < 1e-6f) right = forward.cross(Eigen::Vector3f(1, 0, 0));
  right.normalize();
  const Eigen::Vector3f down = forward.cross(right);
  Eigen::Matrix3f r;
  r.row(0) = right.transpose();
  r.row(1) = down.transpose();
  r.row(2) = forward.transpose();
  Eigen::Matrix4f w = Eigen::Matrix4f::Identity();
  w.topLeftCorner<3, 3>() = r;
  w.topRightCorner<3, 1>() = -r * eye;
  return w;
}

}  // namespace slgs
