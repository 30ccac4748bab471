#pragma once

// Front-to-back alpha blending of per-Gaussian feature vectors:
//
//   f(p) = sum_i T_i a_i f_i,   a_i = min(0.99, o_i exp(-q_i(p) / 2)),
//   T_i = prod_{j<i} (1 - a_j)
//
// Terms with a_i < 1/255 are skipped and a pixel stops accumulating once the
// next term would push T below 1e-4. The backward pass replays each pixel
// back to front, recovering T_i from the final transmittance.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <memory>
#include <span>
#include <vector>

#include "slgs/dual.hpp"
#include "slgs/errors.hpp"
#include "slgs/parallel.hpp"
#include "slgs/projection.hpp"
#include "slgs/tensor.hpp"

namespace slgs {

inline constexpr int kTileSize = 16;
inline constexpr float kAlphaCeiling = 0.99f;
inline constexpr float kTransmittanceStop = 1e-4f;

/// Splatted buffers, channel-major (C x H x W). `features` holds all C
/// blended channels; for the model the layout is [diffuse | specular | mask].
struct FeatureMaps {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> features;
  std::vector<float> alpha;      // 1 - final transmittance
  std::vector<int> contributors; // blended terms per pixel

  float at(int c, int y, int x) const {
    return features[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  /// Channels [first, first + count) as a (count x H x W) buffer.
  std::vector<float> channel_range(int first, int count) const {
    const std::size_t plane = static_cast<std::size_t>(width) * height;
    return {features.begin() + first * plane, features.begin() + (first + count) * plane};
  }
};

struct SplatGradients {
  // Indexed like the projected list passed to forward().
  std::vector<Eigen::Vector2f> mean2d;
  std::vector<Eigen::Vector3f> cov2d;  // d/d(cov_xx, cov_xy, cov_yy)
  std::vector<float> opacity;
  // Indexed by source row: rows x channels.
  std::vector<float> features;
};

namespace detail {

struct Conic {
  float a, b, c;  // inverse covariance entries (xx, xy, yy)
};

inline Conic conic_of(const Eigen::Matrix2f& cov) {
  const float det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(0, 1);
  const float inv = 1.0f / det;
  return {cov(1, 1) * inv, -cov(0, 1) * inv, cov(0, 0) * inv};
}

// Blend weight of one entry at a pixel center. Returns false when skipped.
struct Weight {
  float alpha, gauss, dx, dy;
  bool clamped;
};

inline bool blend_weight(const ProjectedGaussian& g, const Conic& k, float px, float py, Weight& w) {
  w.dx = px - g.mean2d.x();
  w.dy = py - g.mean2d.y();
  const float power = -0.5f * (k.a * w.dx * w.dx + k.c * w.dy * w.dy) - k.b * w.dx * w.dy;
  if (power > 0.0f) return false;
  w.gauss = std::exp(power);
  const float raw = g.opacity * w.gauss;
  w.clamped = raw > kAlphaCeiling;
  w.alpha = std::min(kAlphaCeiling, raw);
  return w.alpha >= kMinAlpha;
}

}  // namespace detail

/// Tile-based rasterizer. forward() keeps what backward() needs; backward()
/// without a preceding forward() throws StateError.
class FeatureRasterizer {
 public:
  const FeatureMaps& forward(std::span<const ProjectedGaussian> projected, std::span<const float> features,
                             int channels, int width, int height) {
    if (channels < 1 || features.size() % channels != 0)
      throw ShapeError("splat_forward: feature buffer of " + std::to_string(features.size()) +
                       " values is not a multiple of " + std::to_string(channels) + " channels");
    const int rows = static_cast<int>(features.size() / channels);
    for (const auto& g : projected)
      if (g.source_index < 0 || g.source_index >= rows)
        throw ShapeError("splat_forward: source index " + std::to_string(g.source_index) + " but only " +
                         std::to_string(rows) + " feature rows");
    projected_.assign(projected.begin(), projected.end());
    features_.assign(features.begin(), features.end());
    rows_ = rows;
    maps_.width = width;
    maps_.height = height;
    maps_.channels = channels;
    maps_.features.assign(static_cast<std::size_t>(channels) * width * height, 0.0f);
    maps_.alpha.assign(static_cast<std::size_t>(width) * height, 0.0f);
    maps_.contributors.assign(static_cast<std::size_t>(width) * height, 0);
    final_t_.assign(static_cast<std::size_t>(width) * height, 1.0f);
    last_.assign(static_cast<std::size_t>(width) * height, 0);
    conics_.clear();
    for (const auto& g : projected_) conics_.push_back(detail::conic_of(g.cov2d));
    bin_tiles();
    parallel_for(tiles_x_ * tiles_y_, [this](int t) { render_tile(t); });
    has_forward_ = true;
    return maps_;
  }

  const FeatureMaps& maps() const { return maps_; }
  const std::vector<ProjectedGaussian>& projected() const { return projected_; }

  /// grad_features: (C x H x W); grad_alpha: (H x W) or empty.
  SplatGradients backward(std::span<const float> grad_features, std::span<const float> grad_alpha = {}) const {
    if (!has_forward_) throw StateError("splat_backward: no preceding forward pass");
    const int c = maps_.channels, w = maps_.width, h = maps_.height;
    if (grad_features.size() != static_cast<std::size_t>(c) * w * h ||
        (!grad_alpha.empty() && grad_alpha.size() != static_cast<std::size_t>(w) * h))
      throw ShapeError("splat_backward: gradient buffers do not match the forward maps");
    const int n_tiles = tiles_x_ * tiles_y_;
    std::vector<TilePartial> partials(n_tiles);
    parallel_for(n_tiles, [&](int t) { backward_tile(t, grad_features, grad_alpha, partials[t]); });

    SplatGradients out;
    const std::size_t n = projected_.size();
    out.mean2d.assign(n, Eigen::Vector2f::Zero());
    out.opacity.assign(n, 0.0f);
    out.features.assign(static_cast<std::size_t>(rows_) * c, 0.0f);
    std::vector<Eigen::Vector3f> dconic(n, Eigen::Vector3f::Zero());
    // Fixed tile order keeps the reduction deterministic.
    for (int t = 0; t < n_tiles; ++t) {
      const auto& list = tile_lists_[t];
      const auto& p = partials[t];
      for (std::size_t j = 0; j < list.size(); ++j) {
        const int e = list[j];
        out.mean2d[e] += p.mean2d[j];
        dconic[e] += p.conic[j];
        out.opacity[e] += p.opacity[j];
        const int src = projected_[e].source_index;
        for (int ch = 0; ch < c; ++ch) out.features[static_cast<std::size_t>(src) * c + ch] += p.features[j * c + ch];
      }
    }
    out.cov2d.resize(n);
    for (std::size_t e = 0; e < n; ++e) out.cov2d[e] = conic_to_cov_grad(projected_[e].cov2d, dconic[e]);
    return out;
  }

 private:
  struct TilePartial {
    std::vector<Eigen::Vector2f> mean2d;
    std::vector<Eigen::Vector3f> conic;  // d/d(conic a, conic b, conic c) with q = a dx^2 + 2b dxdy + c dy^2
    std::vector<float> opacity;
    std::vector<float> features;
  };

  // Chains conic gradients through the 2x2 inverse (symmetric parameterization).
  static Eigen::Vector3f conic_to_cov_grad(const Eigen::Matrix2f& cov, const Eigen::Vector3f& dconic) {
    using D = Dual<3>;
    const D a = D::variable(cov(0, 0), 0), b = D::variable(cov(0, 1), 1), c = D::variable(cov(1, 1), 2);
    const D det = a * c - b * b;
    const D ka = c / det, kb = -b / det, kc = a / det;
    Eigen::Vector3f g;
    for (int i = 0; i < 3; ++i)
      g[i] = static_cast<float>(ka.d[i] * dconic[0] + kb.d[i] * dconic[1] + kc.d[i] * dconic[2]);
    return g;
  }

  void bin_tiles() {
    tiles_x_ = (maps_.width + kTileSize - 1) / kTileSize;
    tiles_y_ = (maps_.height + kTileSize - 1) / kTileSize;
    tile_lists_.assign(static_cast<std::size_t>(tiles_x_) * tiles_y_, {});
    for (int e = 0; e < static_cast<int>(projected_.size()); ++e) {
      const auto& g = projected_[e];
      if (g.opacity < kMinAlpha) continue;
      // Beyond this pixel distance the blend weight is under 1/255.
      const float extent =
          std::sqrt(max_eigenvalue(g.cov2d) * 2.0f * std::log(255.0f * g.opacity)) + 1.0f;
      const int x0 = std::max(0, static_cast<int>(std::floor((g.mean2d.x() - extent - 0.5f) / kTileSize)));
      const int x1 = std::min(tiles_x_ - 1, static_cast<int>(std::floor((g.mean2d.x() + extent - 0.5f) / kTileSize)));
      const int y0 = std::max(0, static_cast<int>(std::floor((g.mean2d.y() - extent - 0.5f) / kTileSize)));
      const int y1 = std::min(tiles_y_ - 1, static_cast<int>(std::floor((g.mean2d.y() + extent - 0.5f) / kTileSize)));
      for (int ty = y0; ty <= y1; ++ty)
        for (int tx = x0; tx <= x1; ++tx) tile_lists_[static_cast<std::size_t>(ty) * tiles_x_ + tx].push_back(e);
    }
  }

  void render_tile(int t) {
    const auto& list = tile_lists_[t];
    const int c = maps_.channels, w = maps_.width, h = maps_.height;
    const std::size_t plane = static_cast<std::size_t>(w) * h;
    const int tx = t % tiles_x_, ty = t / tiles_x_;
    std::vector<float> acc(c);
    for (int y = ty * kTileSize; y < std::min(h, (ty + 1) * kTileSize); ++y)
      for (int x = tx * kTileSize; x < std::min(w, (tx + 1) * kTileSize); ++x) {
        const std::size_t pix = static_cast<std::size_t>(y) * w + x;
        std::fill(acc.begin(), acc.end(), 0.0f);
        float trans = 1.0f;
        int count = 0, last = 0;
        for (std::size_t j = 0; j < list.size(); ++j) {
          const int e = list[j];
          detail::Weight wt;
          if (!detail::blend_weight(projected_[e], conics_[e], x + 0.5f, y + 0.5f, wt)) continue;
          const float next_t = trans * (1.0f - wt.alpha);
          if (next_t < kTransmittanceStop) break;
          const float* f = &features_[static_cast<std::size_t>(projected_[e].source_index) * c];
          for (int ch = 0; ch < c; ++ch) acc[ch] += f[ch] * wt.alpha * trans;
          trans = next_t;
          ++count;
          last = static_cast<int>(j) + 1;
        }
        for (int ch = 0; ch < c; ++ch) maps_.features[ch * plane + pix] = acc[ch];
        maps_.alpha[pix] = 1.0f - trans;
        maps_.contributors[pix] = count;
        final_t_[pix] = trans;
        last_[pix] = last;
      }
  }

  void backward_tile(int t, std::span<const float> gf, std::span<const float> ga, TilePartial& out) const {
    const auto& list = tile_lists_[t];
    const int c = maps_.channels, w = maps_.width, h = maps_.height;
    const std::size_t plane = static_cast<std::size_t>(w) * h;
    out.mean2d.assign(list.size(), Eigen::Vector2f::Zero());
    out.conic.assign(list.size(), Eigen::Vector3f::Zero());
    out.opacity.assign(list.size(), 0.0f);
    out.features.assign(list.size() * c, 0.0f);
    const int tx = t % tiles_x_, ty = t / tiles_x_;
    std::vector<float> behind(c), prev_f(c), g(c);
    for (int y = ty * kTileSize; y < std::min(h, (ty + 1) * kTileSize); ++y)
      for (int x = tx * kTileSize; x < std::min(w, (tx + 1) * kTileSize); ++x) {
        const std::size_t pix = static_cast<std::size_t>(y) * w + x;
        for (int ch = 0; ch < c; ++ch) g[ch] = gf[ch * plane + pix];
        const float g_alpha = ga.empty() ? 0.0f : ga[pix];
        const float t_final = final_t_[pix];
        float trans = t_final;
        float prev_alpha = 0.0f;
        std::fill(behind.begin(), behind.end(), 0.0f);
        std::fill(prev_f.begin(), prev_f.end(), 0.0f);
        for (int j = last_[pix] - 1; j >= 0; --j) {
          const int e = list[j];
          detail::Weight wt;
          if (!detail::blend_weight(projected_[e], conics_[e], x + 0.5f, y + 0.5f, wt)) continue;
          trans /= (1.0f - wt.alpha);
          const float* f = &features_[static_cast<std::size_t>(projected_[e].source_index) * c];
          const float weight = wt.alpha * trans;
          float d_alpha = 0.0f;
          for (int ch = 0; ch < c; ++ch) {
            out.features[j * c + ch] += weight * g[ch];
            behind[ch] = prev_alpha * prev_f[ch] + (1.0f - prev_alpha) * behind[ch];
            prev_f[ch] = f[ch];
            d_alpha += (f[ch] - behind[ch]) * g[ch];
          }
          prev_alpha = wt.alpha;
          d_alpha *= trans;
          d_alpha += g_alpha * t_final / (1.0f - wt.alpha);
          if (wt.clamped) continue;
          const ProjectedGaussian& pg = projected_[e];
          const detail::Conic& k = conics_[e];
          out.opacity[j] += wt.gauss * d_alpha;
          const float d_power = pg.opacity * wt.gauss * d_alpha;  // d(alpha)/d(power) = alpha
          // power = -(a dx^2 + c dy^2)/2 - b dx dy, dx = px - mean_x
          out.mean2d[j].x() += d_power * (k.a * wt.dx + k.b * wt.dy);
          out.mean2d[j].y() += d_power * (k.c * wt.dy + k.b * wt.dx);
          out.conic[j] += d_power * Eigen::Vector3f(-0.5f * wt.dx * wt.dx, -wt.dx * wt.dy, -0.5f * wt.dy * wt.dy);
        }
      }
  }

  std::vector<ProjectedGaussian> projected_;
  std::vector<detail::Conic> conics_;
  std::vector<float> features_;
  int rows_ = 0;
  int tiles_x_ = 0, tiles_y_ = 0;
  std::vector<std::vector<int>> tile_lists_;
  FeatureMaps maps_;
  std::vector<float> final_t_;
  std::vector<int> last_;
  bool has_forward_ = false;
};

/// Per-pixel reference: same blending rules, every entry visited at every
/// pixel, no tiles. Test oracle for FeatureRasterizer.
inline FeatureMaps splat_oracle(std::span<const ProjectedGaussian> projected, std::span<const float> features,
                                int channels, int width, int height) {
  FeatureMaps m;
  m.width = width;
  m.height = height;
  m.channels = channels;
  const std::size_t plane = static_cast<std::size_t>(width) * height;
  m.features.assign(channels * plane, 0.0f);
  m.alpha.assign(plane, 0.0f);
  m.contributors.assign(plane, 0);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const std::size_t pix = static_cast<std::size_t>(y) * width + x;
      float trans = 1.0f;
      for (const auto& g : projected) {
        detail::Weight wt;
        if (!detail::blend_weight(g, detail::conic_of(g.cov2d), x + 0.5f, y + 0.5f, wt)) continue;
        const float next_t = trans * (1.0f - wt.alpha);
        if (next_t < kTransmittanceStop) break;
        for (int ch = 0; ch < channels; ++ch)
          m.features[ch * plane + pix] +=
              features[static_cast<std::size_t>(g.source_index) * channels + ch] * wt.alpha * trans;
        trans = next_t;
        ++m.contributors[pix];
      }
      m.alpha[pix] = 1.0f - trans;
    }
  return m;
}

/// Differentiable splat on the tape. Output is ((C + 1) x H x W): the C
/// blended feature channels followed by the accumulated alpha.
/// geometry: ProjectionBatch::geometry (N x 6); opacities: (N x 1) activated;
/// features: (N x C).
inline ad::Tensor splat(const ProjectionBatch& batch, const ad::Tensor& opacities, const ad::Tensor& features,
                        int width, int height, FeatureMaps* maps_out = nullptr) {
  const int n = batch.geometry.dim(0);
  if (features.rank() != 2 || features.dim(0) != n || opacities.size() != static_cast<std::size_t>(n))
    throw ShapeError("splat: features " + ad::to_string(features.shape()) + " / opacities " +
                     ad::to_string(opacities.shape()) + " do not match " + std::to_string(n) + " Gaussians");
  const int c = features.dim(1);
  std::vector<ProjectedGaussian> visible = batch.visible;
  for (auto& g : visible) g.opacity = opacities[g.source_index];
  auto raster = std::make_shared<FeatureRasterizer>();
  const FeatureMaps& maps = raster->forward(visible, features.data(), c, width, height);
  if (maps_out) *maps_out = maps;
  const std::size_t plane = static_cast<std::size_t>(width) * height;
  std::vector<float> out(maps.features);
  out.insert(out.end(), maps.alpha.begin(), maps.alpha.end());
  return ad::make_result(
      ad::Tensor(ad::Shape{c + 1, height, width}, std::move(out)), {&batch.geometry, &opacities, &features},
      [raster, c, plane](std::span<const float> g, std::span<float* const> gi) {
        const SplatGradients sg = raster->backward(g.subspan(0, c * plane), g.subspan(c * plane, plane));
        const auto& list = raster->projected();
        for (std::size_t e = 0; e < list.size(); ++e) {
          const int src = list[e].source_index;
          if (gi[0]) {
            float* row = gi[0] + 6 * src;
            row[0] += sg.mean2d[e].x();
            row[1] += sg.mean2d[e].y();
            row[2] += sg.cov2d[e][0];
            row[3] += sg.cov2d[e][1];
            row[4] += sg.cov2d[e][2];
          }
          if (gi[1]) gi[1][src] += sg.opacity[e];
        }
        if (gi[2])
          for (std::size_t k = 0; k < sg.features.size(); ++k) gi[2][k] += sg.features[k];
      });
}

}  // namespace slgs
