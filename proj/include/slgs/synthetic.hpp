#pragma once

// Self-consistency scene: a few Gaussians rendered by the model itself with
// randomized (non-zero) decoder heads, so the ground truth is exactly
// representable by the student architecture.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "slgs/colmap.hpp"
#include "slgs/model.hpp"
#include "slgs/scene_model.hpp"

namespace slgs {

struct SyntheticScene {
  ModelConfig config;
  GaussianCloud teacher;
  Networks teacher_nets;
  std::vector<CameraView> views;
  std::vector<ad::Tensor> images;        // (3 x H x W), within [0.05, 0.95]
  std::vector<colmap::SfmPoint> points;  // teacher centers, for initialization
};

struct SyntheticOptions {
  int num_gaussians = 3;
  int num_views = 8;
  int size = 32;
  float camera_radius = 4.0f;
  float mask_gain = 6.0f;       // multiplies the teacher mask MLP output layer
  float specular_share = 1.0f;  // rms(mask * specular) / rms(diffuse) before the final affine map
};

/// Cameras ring the origin at alternating elevations; Gaussians are
/// anisotropic blobs near the origin. Freshly initialized decoders put almost
/// no energy in the gated specular term and a near-constant mask, so the
/// teacher is reshaped: the mask MLP output layer is amplified, the specular
/// head is scaled to the requested share, and a final affine map puts every
/// pixel in [0.05, 0.95]. Each step rescales a final linear layer, so the
/// ground truth stays exactly representable by the student.
inline SyntheticScene make_synthetic_scene(std::uint64_t seed, const SyntheticOptions& opt = {},
                                           ModelConfig config = {}) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::normal_distribution<float> nd;
  SyntheticScene s;
  s.config = config;
  s.teacher.diffuse_dims = config.diffuse_dims;
  s.teacher.specular_dims = config.specular_dims;
  for (int i = 0; i < opt.num_gaussians; ++i) {
    LatentGaussian g;
    g.position = Eigen::Vector3f(u(rng), u(rng), u(rng)) * 0.4f;
    g.opacity_logit = 2.0f + 0.5f * u(rng);
    g.rotation = Eigen::Vector4f(nd(rng), nd(rng), nd(rng), nd(rng)).normalized();
    g.log_scale = Eigen::Vector3f(-0.9f + 0.2f * u(rng), -1.1f + 0.2f * u(rng), -2.0f + 0.2f * u(rng));
    g.f_diffuse.resize(config.diffuse_dims);
    g.f_specular.resize(config.specular_dims);
    for (float& v : g.f_diffuse) v = u(rng);
    for (float& v : g.f_specular) v = u(rng);
    s.teacher.push_back(g);
    colmap::SfmPoint p;
    p.position = g.position;
    p.color = {128, 128, 128};
    s.points.push_back(p);
  }
  for (int k = 0; k < opt.num_views; ++k) {
    const float azimuth = 2.0f * 3.14159265f * k / opt.num_views;
    const float elevation = (k % 2 ? 0.35f : -0.2f);
    const Eigen::Vector3f eye = opt.camera_radius * Eigen::Vector3f(std::cos(elevation) * std::cos(azimuth),
                                                                    std::sin(elevation),
                                                                    std::cos(elevation) * std::sin(azimuth));
    CameraView v;
    v.width = v.height = opt.size;
    v.focal_x = v.focal_y = 1.2f * opt.size;
    v.principal_point = Eigen::Vector2f(0.5f * opt.size, 0.5f * opt.size);
    v.world_to_camera = look_at(eye, Eigen::Vector3f::Zero());
    s.views.push_back(v);
  }

  s.teacher_nets = Networks(config, rng);
  s.teacher_nets.randomize_heads(rng);
  nn::Linear& mask_out = s.teacher_nets.shading.mask_mlp.layers.back();
  for (float& w : mask_out.weight.data()) w *= opt.mask_gain;
  for (float& w : mask_out.bias.data()) w *= opt.mask_gain;
  const GaussianParams params = to_params(s.teacher);

  auto rms = [](const std::vector<double>& xs) {
    double mean = 0.0, sq = 0.0;
    for (double x : xs) mean += x;
    mean /= xs.size();
    for (double x : xs) sq += (x - mean) * (x - mean);
    return std::sqrt(sq / xs.size());
  };
  std::vector<double> diffuse, gated;
  for (const auto& v : s.views) {
    const RenderOutput r = render(params, s.teacher_nets, v, config);
    const ad::Tensor g = ad::mul(r.specular, r.mask);
    for (std::size_t i = 0; i < g.size(); ++i) {
      diffuse.push_back(r.diffuse[i]);
      gated.push_back(g[i]);
    }
  }
  const double gain = opt.specular_share * rms(diffuse) / std::max(rms(gated), 1e-12);
  for (float& w : s.teacher_nets.specular.head.weight.data()) w = static_cast<float>(w * gain);
  for (float& w : s.teacher_nets.specular.head.bias.data()) w = static_cast<float>(w * gain);

  float lo = std::numeric_limits<float>::infinity(), hi = -lo;
  for (const auto& v : s.views)
    for (float x : render(params, s.teacher_nets, v, config).rgb.values()) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  // rgb' = a * rgb + b: scale both heads by a, shift the diffuse bias by b.
  const float a = 0.9f / std::max(hi - lo, 1e-6f), b = 0.05f - a * lo;
  for (nn::Conv2d* head : {&s.teacher_nets.diffuse.head, &s.teacher_nets.specular.head}) {
    for (float& w : head->weight.data()) w *= a;
    for (float& w : head->bias.data()) w *= a;
  }
  for (float& w : s.teacher_nets.diffuse.head.bias.data()) w += b;
  for (const auto& v : s.views) {
    ad::Tensor img = render(params, s.teacher_nets, v, config).rgb;
    for (float& x : img.data()) x = std::clamp(x, 0.0f, 1.0f);  // rounding only
    s.images.push_back(img);
  }
  return s;
}

}  // namespace slgs
