#pragma once

// Image-space decoders. All maps are (C x H x W).

#include <array>
#include <cmath>
#include <random>
#include <string>

#include "slgs/nn.hpp"
#include "slgs/scene_model.hpp"
#include "slgs/tensor.hpp"

namespace slgs {

inline constexpr int kRayOctaves = 4;
inline constexpr int kRayEncodingChannels = 3 + 3 * 2 * kRayOctaves;  // 27

/// d, then sin(2^k d) and cos(2^k d) for k = 0..3 (27 values). No pi
/// factor: a 2 pi shift of any component leaves every octave unchanged.
inline std::array<double, kRayEncodingChannels> encode_direction(const Eigen::Vector3d& d) {
  std::array<double, kRayEncodingChannels> e{};
  for (int c = 0; c < 3; ++c) e[c] = d[c];
  for (int k = 0; k < kRayOctaves; ++k)
    for (int c = 0; c < 3; ++c) {
      const double arg = std::ldexp(d[c], k);
      e[3 + 6 * k + c] = std::sin(arg);
      e[6 + 6 * k + c] = std::cos(arg);
    }
  return e;
}

/// Per-pixel world-space ray direction through the pixel center, encoded.
/// Shape (27 x H x W).
inline ad::Tensor pixel_ray_encoding(const CameraView& view) {
  if (!(view.focal_x > 0.0f) || !(view.focal_y > 0.0f) || view.width <= 0 || view.height <= 0)
    throw InvalidCamera("pixel_ray_encoding: invalid intrinsics");
  const int w = view.width, h = view.height;
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  const Eigen::Matrix3d rt = view.rotation().cast<double>().transpose();
  ad::Tensor out(ad::Shape{kRayEncodingChannels, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const Eigen::Vector3d cam((x + 0.5 - view.principal_point.x()) / view.focal_x,
                                (y + 0.5 - view.principal_point.y()) / view.focal_y, 1.0);
      const Eigen::Vector3d d = rt * cam.normalized();
      const std::size_t pix = static_cast<std::size_t>(y) * w + x;
      const auto e = encode_direction(d);
      for (int c = 0; c < kRayEncodingChannels; ++c) out[c * plane + pix] = static_cast<float>(e[c]);
    }
  return out;
}

/// Encoder-decoder over the splatted diffuse features: three stride-2 stages
/// down to 1/8 resolution, nearest-upsample + conv back up, skip connections
/// and one residual block per stage. The last conv starts at zero.
struct DiffuseUNet {
  nn::Conv2d stem;
  nn::ResidualBlock enc0, enc1, enc2, bottleneck;
  nn::Conv2d down1, down2, down3;
  nn::Conv2d up3, merge3, up2, merge2, up1, merge1;
  nn::ResidualBlock dec2, dec1, dec0;
  nn::Conv2d head;

  DiffuseUNet() = default;
  DiffuseUNet(int in_channels, std::mt19937_64& rng)
      : stem(in_channels, 16, rng),
        enc0(16, rng),
        enc1(32, rng),
        enc2(64, rng),
        bottleneck(64, rng),
        down1(16, 32, rng, 2),
        down2(32, 64, rng, 2),
        down3(64, 64, rng, 2),
        up3(64, 64, rng),
        merge3(128, 64, rng),
        up2(64, 32, rng),
        merge2(64, 32, rng),
        up1(32, 16, rng),
        merge1(32, 16, rng),
        dec2(64, rng),
        dec1(32, rng),
        dec0(16, rng),
        head(16, 3, rng) {
    head.zero();
  }

  int in_channels() const { return stem.in_channels(); }

  /// (Dd x H x W) -> (3 x H x W). Sizes not divisible by 8 are reflect-padded
  /// and the output cropped back.
  ad::Tensor operator()(const ad::Tensor& x) const {
    if (x.rank() != 3 || x.dim(0) != in_channels())
      throw ShapeError("decode_diffuse: expected (" + std::to_string(in_channels()) + " x H x W), got " +
                       ad::to_string(x.shape()));
    const int h = x.dim(1), w = x.dim(2);
    const int ph = (8 - h % 8) % 8, pw = (8 - w % 8) % 8;
    const ad::Tensor in = (ph || pw) ? ad::pad_reflect2d(x, ph, pw) : x;

    const ad::Tensor e0 = enc0(ad::elu(stem(in)));
    const ad::Tensor e1 = enc1(ad::elu(down1(e0)));
    const ad::Tensor e2 = enc2(ad::elu(down2(e1)));
    const ad::Tensor b = bottleneck(ad::elu(down3(e2)));

    auto stage = [](const nn::Conv2d& up, const nn::Conv2d& merge, const nn::ResidualBlock& res,
                    const ad::Tensor& low, const ad::Tensor& skip) {
      const ad::Tensor u = ad::elu(up(ad::upsample_nearest2d(low, 2)));
      return res(ad::elu(merge(ad::concat({u, skip}, 0))));
    };
    const ad::Tensor d2 = stage(up3, merge3, dec2, b, e2);
    const ad::Tensor d1 = stage(up2, merge2, dec1, d2, e1);
    const ad::Tensor d0 = stage(up1, merge1, dec0, d1, e0);
    const ad::Tensor rgb = head(d0);
    return (ph || pw) ? ad::crop2d(rgb, h, w) : rgb;
  }

  void collect(nn::ParamList& out, const std::string& prefix) {
    stem.collect(out, prefix + ".stem");
    enc0.collect(out, prefix + ".enc0");
    down1.collect(out, prefix + ".down1");
    enc1.collect(out, prefix + ".enc1");
    down2.collect(out, prefix + ".down2");
    enc2.collect(out, prefix + ".enc2");
    down3.collect(out, prefix + ".down3");
    bottleneck.collect(out, prefix + ".bottleneck");
    up3.collect(out, prefix + ".up3");
    merge3.collect(out, prefix + ".merge3");
    dec2.collect(out, prefix + ".dec2");
    up2.collect(out, prefix + ".up2");
    merge2.collect(out, prefix + ".merge2");
    dec1.collect(out, prefix + ".dec1");
    up1.collect(out, prefix + ".up1");
    merge1.collect(out, prefix + ".merge1");
    dec0.collect(out, prefix + ".dec0");
    head.collect(out, prefix + ".head");
  }
};

/// Full-resolution CNN over the splatted specular features and the pixel ray
/// encoding. The last conv starts at zero.
struct SpecularCNN {
  nn::Conv2d base, fuse, hidden, head;

  SpecularCNN() = default;
  SpecularCNN(int in_channels, std::mt19937_64& rng)
      : base(in_channels, 32, rng),
        fuse(32 + kRayEncodingChannels, 32, rng),
        hidden(32, 32, rng),
        head(32, 3, rng) {
    head.zero();
  }

  int in_channels() const { return base.in_channels(); }

  /// (Ds x H x W), (27 x H x W) -> (3 x H x W).
  ad::Tensor operator()(const ad::Tensor& features, const ad::Tensor& rays) const {
    if (features.rank() != 3 || features.dim(0) != in_channels() || rays.rank() != 3 ||
        rays.dim(0) != kRayEncodingChannels || rays.dim(1) != features.dim(1) || rays.dim(2) != features.dim(2))
      throw ShapeError("decode_specular: features " + ad::to_string(features.shape()) + " and rays " +
                       ad::to_string(rays.shape()) + " do not match");
    const ad::Tensor h0 = ad::elu(base(features));
    const ad::Tensor h1 = ad::elu(fuse(ad::concat({h0, rays}, 0)));
    return head(ad::elu(hidden(h1)));
  }

  void collect(nn::ParamList& out, const std::string& prefix) {
    base.collect(out, prefix + ".base");
    fuse.collect(out, prefix + ".fuse");
    hidden.collect(out, prefix + ".hidden");
    head.collect(out, prefix + ".head");
  }
};

/// diffuse + specular * mask, mask (1 x H x W) broadcast over channels.
inline ad::Tensor compose(const ad::Tensor& diffuse, const ad::Tensor& specular, const ad::Tensor& mask) {
  if (diffuse.shape() != specular.shape() || mask.rank() != 3 || mask.dim(0) != 1 ||
      mask.dim(1) != diffuse.dim(1) || mask.dim(2) != diffuse.dim(2))
    throw ShapeError("compose: diffuse " + ad::to_string(diffuse.shape()) + ", specular " +
                     ad::to_string(specular.shape()) + ", mask " + ad::to_string(mask.shape()));
  return ad::add(diffuse, ad::mul(specular, mask));
}

}  // namespace slgs
