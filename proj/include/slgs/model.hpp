#pragma once

// The full forward model: project -> shade -> splat -> decode -> compose.

#include <random>
#include <string>
#include <vector>

#include "slgs/decoders.hpp"
#include "slgs/nn.hpp"
#include "slgs/projection.hpp"
#include "slgs/rasterizer.hpp"
#include "slgs/scene_model.hpp"
#include "slgs/shading.hpp"
#include "slgs/tensor.hpp"

namespace slgs {

inline constexpr int kShColorCoefficients = 3 * kShCoefficients;  // 48

struct ModelConfig {
  int diffuse_dims = kDefaultDiffuseDims;
  int specular_dims = kDefaultSpecularDims;
  bool no_mask = false;            // composed = diffuse + specular
  bool no_specular = false;        // composed = diffuse
  bool sh_color_baseline = false;  // composed = diffuse + splatted SH color
  float near_plane = kDefaultNearPlane;

  int latent_dims() const { return diffuse_dims + specular_dims; }
};

/// Per-Gaussian optimizable state as row-aligned tensors.
struct GaussianParams {
  ad::Tensor positions;       // (N x 3)
  ad::Tensor opacity_logits;  // (N x 1)
  ad::Tensor rotations;       // (N x 4), w x y z
  ad::Tensor log_scales;      // (N x 3)
  ad::Tensor f_diffuse;       // (N x Dd)
  ad::Tensor f_specular;      // (N x Ds)
  ad::Tensor sh_coeffs;       // (N x 48) in SH-color mode, else (N x 0)

  int size() const { return positions.dim(0); }

  void collect(nn::ParamList& out) {
    out.push_back({"gaussians.position", &positions});
    out.push_back({"gaussians.opacity", &opacity_logits});
    out.push_back({"gaussians.rotation", &rotations});
    out.push_back({"gaussians.scale", &log_scales});
    out.push_back({"gaussians.f_diffuse", &f_diffuse});
    out.push_back({"gaussians.f_specular", &f_specular});
    if (sh_coeffs.dim(1) > 0) out.push_back({"gaussians.sh", &sh_coeffs});
  }
};

inline GaussianParams to_params(const GaussianCloud& cloud, bool with_sh = false) {
  const int n = static_cast<int>(cloud.size());
  const int dd = cloud.diffuse_dims, ds = cloud.specular_dims, sh = with_sh ? kShColorCoefficients : 0;
  GaussianParams p{ad::Tensor({n, 3}), ad::Tensor({n, 1}), ad::Tensor({n, 4}), ad::Tensor({n, 3}),
                   ad::Tensor({n, dd}), ad::Tensor({n, ds}), ad::Tensor({n, sh})};
  for (int i = 0; i < n; ++i) {
    const LatentGaussian& g = cloud.gaussians[i];
    if (static_cast<int>(g.f_diffuse.size()) != dd || static_cast<int>(g.f_specular.size()) != ds ||
        (with_sh && static_cast<int>(g.sh_coeffs.size()) != sh))
      throw ShapeError("to_params: Gaussian " + std::to_string(i) + " has latent sizes inconsistent with the cloud");
    for (int c = 0; c < 3; ++c) {
      p.positions[3 * i + c] = g.position[c];
      p.log_scales[3 * i + c] = g.log_scale[c];
    }
    p.opacity_logits[i] = g.opacity_logit;
    for (int c = 0; c < 4; ++c) p.rotations[4 * i + c] = g.rotation[c];
    for (int c = 0; c < dd; ++c) p.f_diffuse[dd * i + c] = g.f_diffuse[c];
    for (int c = 0; c < ds; ++c) p.f_specular[ds * i + c] = g.f_specular[c];
    for (int c = 0; c < sh; ++c) p.sh_coeffs[sh * i + c] = g.sh_coeffs[c];
  }
  return p;
}

/// Writes tensor values back into the cloud's primitives; bookkeeping is
/// resized to match and otherwise left alone.
inline void write_back(const GaussianParams& p, GaussianCloud& cloud) {
  const int n = p.size(), dd = p.f_diffuse.dim(1), ds = p.f_specular.dim(1), sh = p.sh_coeffs.dim(1);
  cloud.diffuse_dims = dd;
  cloud.specular_dims = ds;
  cloud.gaussians.resize(n);
  cloud.grad_accum.resize(n, 0.0f);
  cloud.grad_count.resize(n, 0.0f);
  cloud.max_radii.resize(n, 0.0f);
  for (int i = 0; i < n; ++i) {
    LatentGaussian& g = cloud.gaussians[i];
    for (int c = 0; c < 3; ++c) {
      g.position[c] = p.positions[3 * i + c];
      g.log_scale[c] = p.log_scales[3 * i + c];
    }
    g.opacity_logit = p.opacity_logits[i];
    for (int c = 0; c < 4; ++c) g.rotation[c] = p.rotations[4 * i + c];
    g.f_diffuse.assign(p.f_diffuse.data().begin() + dd * i, p.f_diffuse.data().begin() + dd * (i + 1));
    g.f_specular.assign(p.f_specular.data().begin() + ds * i, p.f_specular.data().begin() + ds * (i + 1));
    g.sh_coeffs.assign(p.sh_coeffs.data().begin() + sh * i, p.sh_coeffs.data().begin() + sh * (i + 1));
  }
}

/// All learned networks of the model.
struct Networks {
  ShadingNets shading;
  DiffuseUNet diffuse;
  SpecularCNN specular;

  Networks() = default;
  Networks(const ModelConfig& cfg, std::mt19937_64& rng)
      : shading(cfg.latent_dims(), rng), diffuse(cfg.diffuse_dims, rng), specular(cfg.specular_dims, rng) {}

  /// Replaces the zero-initialized decoder heads with fan-in uniform weights,
  /// so the decoders respond to their inputs from the first step.
  void randomize_heads(std::mt19937_64& rng) {
    for (nn::Conv2d* head : {&diffuse.head, &specular.head}) {
      const int fan_in = head->in_channels() * head->weight.dim(2) * head->weight.dim(3);
      head->weight = nn::fan_in_uniform(head->weight.shape(), fan_in, rng);
      head->bias = nn::fan_in_uniform(head->bias.shape(), fan_in, rng);
    }
  }

  void collect(nn::ParamList& out) {
    shading.collect(out, "shading");
    diffuse.collect(out, "diffuse_unet");
    specular.collect(out, "specular_cnn");
  }
};

struct RenderOutput {
  ad::Tensor rgb;       // (3 x H x W) composed
  ad::Tensor diffuse;   // (3 x H x W)
  ad::Tensor specular;  // (3 x H x W); zeros when the branch is off
  ad::Tensor mask;      // (1 x H x W) splatted view mask; ones in no-mask mode
  ad::Tensor alpha;     // (1 x H x W)
  ad::Tensor normals;   // (N x 3) predicted
  ad::Tensor pseudo_normals;  // (N x 3) detached targets
  ad::Tensor visible;   // (N x 1) 1 for Gaussians that survived culling
  ProjectionBatch projection;
};

/// Per-Gaussian RGB from 48 SH coefficients (16 per channel, basis-major) with
/// the customary +0.5 offset.
inline ad::Tensor sh_color(const ad::Tensor& dirs, const ad::Tensor& coeffs) {
  const int n = dirs.dim(0);
  const ad::Tensor basis = ad::reshape(sh_encode(dirs), {n, kShCoefficients, 1});
  const ad::Tensor c = ad::reshape(coeffs, {n, kShCoefficients, 3});
  return ad::add_scalar(ad::reshape(ad::sum(ad::mul(basis, c), 1), {n, 3}), 0.5f);
}

inline RenderOutput render(const GaussianParams& p, const Networks& nets, const CameraView& view,
                           const ModelConfig& cfg) {
  const int n = p.size(), dd = cfg.diffuse_dims, ds = cfg.specular_dims;
  if (p.f_diffuse.dim(1) != dd || p.f_specular.dim(1) != ds)
    throw ShapeError("render: latent widths " + ad::to_string(p.f_diffuse.shape()) + " / " +
                     ad::to_string(p.f_specular.shape()) + " do not match the model configuration");
  const int w = view.width, h = view.height;
  RenderOutput out;

  const ad::Tensor opacity = ad::sigmoid(p.opacity_logits);
  out.projection = project_batch(p.positions, p.rotations, p.log_scales, opacity, view, cfg.near_plane);
  out.visible = ad::Tensor({n, 1}, 0.0f);
  for (const auto& g : out.projection.visible) out.visible[g.source_index] = 1.0f;

  const ad::Tensor dirs = view_directions(p.positions, camera_center(view));
  out.normals = predict_normal(nets.shading, ad::concat({p.f_diffuse, p.f_specular}, 1));
  out.pseudo_normals = pseudo_normals(p.rotations, p.log_scales, dirs.detach());

  std::vector<ad::Tensor> per_gaussian{p.f_diffuse, p.f_specular};
  const bool use_mask = !cfg.no_mask && !cfg.no_specular && !cfg.sh_color_baseline;
  if (use_mask) per_gaussian.push_back(predict_view_mask(nets.shading, dirs, out.normals));
  if (cfg.sh_color_baseline) per_gaussian.push_back(sh_color(dirs, p.sh_coeffs));
  const ad::Tensor maps = splat(out.projection, opacity, ad::concat(per_gaussian, 1), w, h);

  int channel = 0;
  const ad::Tensor diffuse_map = ad::slice(maps, 0, channel, dd);
  channel += dd;
  const ad::Tensor specular_map = ad::slice(maps, 0, channel, ds);
  channel += ds;
  out.mask = use_mask ? ad::slice(maps, 0, channel++, 1) : ad::Tensor({1, h, w}, 1.0f);
  const ad::Tensor sh_rgb = cfg.sh_color_baseline ? ad::slice(maps, 0, channel, 3) : ad::Tensor();
  if (cfg.sh_color_baseline) channel += 3;
  out.alpha = ad::slice(maps, 0, channel, 1);

  out.diffuse = nets.diffuse(diffuse_map);
  if (cfg.sh_color_baseline) {
    out.specular = ad::Tensor({3, h, w}, 0.0f);
    out.rgb = ad::add(out.diffuse, sh_rgb);
  } else if (cfg.no_specular) {
    out.specular = ad::Tensor({3, h, w}, 0.0f);
    out.rgb = out.diffuse;
  } else {
    out.specular = nets.specular(specular_map, pixel_ray_encoding(view));
    out.rgb = compose(out.diffuse, out.specular, out.mask);
  }
  return out;
}

}  // namespace slgs
