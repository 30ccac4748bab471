#pragma once

#include <Eigen/Dense>

#include <array>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "slgs/dual.hpp"
#include "slgs/nn.hpp"
#include "slgs/scene_model.hpp"
#include "slgs/tensor.hpp"

namespace slgs {

inline constexpr int kShCoefficients = 16;  // degrees 0..3
inline constexpr int kShadingHidden = 32;

namespace sh {
inline constexpr double kC0 = 0.28209479177387814;
inline constexpr double kC1 = 0.4886025119029199;
inline constexpr double kC2[5] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                                  -1.0925484305920792, 0.5462742152960396};
inline constexpr double kC3[7] = {-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
                                  0.3731763325901154,  -0.4570457994644658, 1.445305721320277,
                                  -0.5900435899266435};
}  // namespace sh

/// Real SH basis of degrees 0..3 at a unit direction, graphics ordering
/// (degree-major, m = -l..l).
template <class T>
std::array<T, kShCoefficients> sh_basis(const T& x, const T& y, const T& z) {
  using namespace sh;
  const T xx = x * x, yy = y * y, zz = z * z;
  const T xy = x * y, yz = y * z, xz = x * z;
  return {T(kC0),
          T(-kC1) * y,
          T(kC1) * z,
          T(-kC1) * x,
          T(kC2[0]) * xy,
          T(kC2[1]) * yz,
          T(kC2[2]) * (T(2.0) * zz - xx - yy),
          T(kC2[3]) * xz,
          T(kC2[4]) * (xx - yy),
          T(kC3[0]) * y * (T(3.0) * xx - yy),
          T(kC3[1]) * xy * z,
          T(kC3[2]) * y * (T(4.0) * zz - xx - yy),
          T(kC3[3]) * z * (T(2.0) * zz - T(3.0) * xx - T(3.0) * yy),
          T(kC3[4]) * x * (T(4.0) * zz - xx - yy),
          T(kC3[5]) * z * (xx - yy),
          T(kC3[6]) * x * (xx - T(3.0) * yy)};
}

/// Rows of (n x 3) unit directions -> (n x 16) SH basis values.
inline ad::Tensor sh_encode(const ad::Tensor& dirs) {
  if (dirs.rank() != 2 || dirs.dim(1) != 3) throw ShapeError("sh_encode: expected (n x 3), got " + ad::to_string(dirs.shape()));
  const int n = dirs.dim(0);
  using D = Dual<3>;
  ad::Tensor out(ad::Shape{n, kShCoefficients});
  auto jac = std::make_shared<std::vector<std::array<double, 3 * kShCoefficients>>>(n);
  for (int i = 0; i < n; ++i) {
    const auto b = sh_basis(D::variable(dirs[3 * i], 0), D::variable(dirs[3 * i + 1], 1),
                            D::variable(dirs[3 * i + 2], 2));
    for (int k = 0; k < kShCoefficients; ++k) {
      out[kShCoefficients * i + k] = static_cast<float>(b[k].v);
      for (int c = 0; c < 3; ++c) (*jac)[i][3 * k + c] = b[k].d[c];
    }
  }
  return ad::make_result(std::move(out), {&dirs}, [jac, n](std::span<const float> g, std::span<float* const> gi) {
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int k = 0; k < kShCoefficients; ++k) acc += (*jac)[i][3 * k + c] * g[kShCoefficients * i + k];
        gi[0][3 * i + c] += static_cast<float>(acc);
      }
  });
}

/// Shortest principal axis, flipped so that n . view_dir >= 0. Ties go to
/// the lowest axis index.
inline Eigen::Vector3f pseudo_normal(const Eigen::Matrix3f& rotation, const Eigen::Vector3f& scale,
                                     const Eigen::Vector3f& view_dir) {
  int axis = 0;
  for (int k = 1; k < 3; ++k)
    if (scale[k] < scale[axis]) axis = k;
  Eigen::Vector3f n = rotation.col(axis);
  if (n.dot(view_dir) < 0.0f) n = -n;
  return n;
}

/// Mirror of w about n: 2 (w . n) n - w.
inline Eigen::Vector3f reflect(const Eigen::Vector3f& w, const Eigen::Vector3f& n) {
  return 2.0f * w.dot(n) * n - w;
}

/// Unit directions from `center` toward each row of positions (n x 3).
inline ad::Tensor view_directions(const ad::Tensor& positions, const Eigen::Vector3f& center) {
  return ad::normalize_rows(ad::sub(positions, ad::Tensor({1, 3}, {center.x(), center.y(), center.z()})));
}

/// Detached pseudo-normal targets for a batch. rotations (n x 4),
/// log_scales (n x 3), dirs (n x 3).
inline ad::Tensor pseudo_normals(const ad::Tensor& rotations, const ad::Tensor& log_scales, const ad::Tensor& dirs) {
  const int n = rotations.dim(0);
  ad::Tensor out(ad::Shape{n, 3});
  for (int i = 0; i < n; ++i) {
    const Eigen::Matrix3f r = rotation_matrix(
        Eigen::Vector4f(rotations[4 * i], rotations[4 * i + 1], rotations[4 * i + 2], rotations[4 * i + 3]));
    const Eigen::Vector3f s(log_scales[3 * i], log_scales[3 * i + 1], log_scales[3 * i + 2]);
    const Eigen::Vector3f v(dirs[3 * i], dirs[3 * i + 1], dirs[3 * i + 2]);
    const Eigen::Vector3f p = pseudo_normal(r, s, v);  // exp is monotone: argmin on log scales
    for (int c = 0; c < 3; ++c) out[3 * i + c] = p[c];
  }
  return out;
}

/// Normal MLP (latent -> 3) and view-mask MLP (SH(d) ++ n -> 1).
struct ShadingNets {
  nn::Mlp normal_mlp;
  nn::Mlp mask_mlp;

  ShadingNets() = default;
  ShadingNets(int latent_dims, std::mt19937_64& rng)
      : normal_mlp({latent_dims, kShadingHidden, kShadingHidden, 3}, rng),
        mask_mlp({kShCoefficients + 3, kShadingHidden, kShadingHidden, 1}, rng) {}

  void collect(nn::ParamList& out, const std::string& prefix) {
    normal_mlp.collect(out, prefix + ".normal_mlp");
    mask_mlp.collect(out, prefix + ".mask_mlp");
  }
};

/// latents: (n x (Dd + Ds)), diffuse then specular. Returns unit rows; a zero
/// MLP output maps to (0, 0, 1).
inline ad::Tensor predict_normal(const ShadingNets& nets, const ad::Tensor& latents) {
  return ad::normalize_rows(nets.normal_mlp(latents));
}

/// Per-Gaussian mask in (0, 1) from view directions and normals (n x 3 each).
inline ad::Tensor predict_view_mask(const ShadingNets& nets, const ad::Tensor& dirs, const ad::Tensor& normals) {
  return ad::sigmoid(nets.mask_mlp(ad::concat({sh_encode(dirs), normals}, 1)));
}

}  // namespace slgs
