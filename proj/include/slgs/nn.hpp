#pragma once

// Small layer building blocks on top of the tape. Parameters are plain
// ad::Tensor members; a training step swaps them for watched aliases (same
// buffers) and detaches them afterwards, so optimizers update in place.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "slgs/tensor.hpp"

namespace slgs::nn {

struct NamedParam {
  std::string name;
  ad::Tensor* value;
};
using ParamList = std::vector<NamedParam>;

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline ad::Tensor fan_in_uniform(const ad::Shape& shape, int fan_in, std::mt19937_64& rng) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
  return ad::uniform(shape, -bound, bound, rng);
}

/// y = x W + b over rows of an (n x in) tensor.
struct Linear {
  ad::Tensor weight;  // (in x out)
  ad::Tensor bias;    // (1 x out)

  Linear() = default;
  Linear(int in, int out, std::mt19937_64& rng)
      : weight(fan_in_uniform({in, out}, in, rng)), bias(fan_in_uniform({1, out}, in, rng)) {}

  int in_features() const { return weight.dim(0); }
  int out_features() const { return weight.dim(1); }

  ad::Tensor operator()(const ad::Tensor& x) const { return ad::add(ad::matmul(x, weight), bias); }

  void collect(ParamList& out, const std::string& prefix) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }
};

/// Fully connected stack with ELU between layers (none after the last).
struct Mlp {
  std::vector<Linear> layers;

  Mlp() = default;
  Mlp(const std::vector<int>& widths, std::mt19937_64& rng) {
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) layers.emplace_back(widths[i], widths[i + 1], rng);
  }

  ad::Tensor operator()(ad::Tensor x) const {
    if (x.rank() != 2 || x.dim(1) != layers.front().in_features())
      throw ShapeError("mlp: expected (n x " + std::to_string(layers.front().in_features()) + "), got " +
                       ad::to_string(x.shape()));
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](x);
      if (i + 1 < layers.size()) x = ad::elu(x);
    }
    return x;
  }

  void collect(ParamList& out, const std::string& prefix) {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(out, prefix + "." + std::to_string(i));
  }
};

/// 3x3 (or k x k) same-padding convolution over (C x H x W) maps.
struct Conv2d {
  ad::Tensor weight;  // (out x in x k x k)
  ad::Tensor bias;    // (out)
  int stride = 1;

  Conv2d() = default;
  Conv2d(int in, int out, std::mt19937_64& rng, int stride_ = 1, int k = 3)
      : weight(fan_in_uniform({out, in, k, k}, in * k * k, rng)),
        bias(fan_in_uniform({out}, in * k * k, rng)),
        stride(stride_) {}

  int in_channels() const { return weight.dim(1); }
  int out_channels() const { return weight.dim(0); }

  void zero() {
    for (float& v : weight.data()) v = 0.0f;
    for (float& v : bias.data()) v = 0.0f;
  }

  ad::Tensor operator()(const ad::Tensor& x) const {
    return ad::conv2d(x, weight, &bias, stride, weight.dim(2) / 2);
  }

  void collect(ParamList& out, const std::string& prefix) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }
};

/// Layer norm over the channel axis of (C x H x W) with per-channel affine.
struct ChannelNorm {
  ad::Tensor gain;   // (C x 1 x 1)
  ad::Tensor shift;  // (C x 1 x 1)

  ChannelNorm() = default;
  explicit ChannelNorm(int channels) : gain({channels, 1, 1}, 1.0f), shift({channels, 1, 1}, 0.0f) {}

  ad::Tensor operator()(const ad::Tensor& x) const { return ad::add(ad::mul(ad::layer_norm(x, 0), gain), shift); }

  void collect(ParamList& out, const std::string& prefix) {
    out.push_back({prefix + ".gain", &gain});
    out.push_back({prefix + ".shift", &shift});
  }
};

/// x + conv(elu(norm(conv(elu(norm(x)))))).
struct ResidualBlock {
  ChannelNorm norm1, norm2;
  Conv2d conv1, conv2;

  ResidualBlock() = default;
  ResidualBlock(int channels, std::mt19937_64& rng)
      : norm1(channels), norm2(channels), conv1(channels, channels, rng), conv2(channels, channels, rng) {}

  ad::Tensor operator()(const ad::Tensor& x) const {
    const ad::Tensor h = conv1(ad::elu(norm1(x)));
    return ad::add(x, conv2(ad::elu(norm2(h))));
  }

  void collect(ParamList& out, const std::string& prefix) {
    norm1.collect(out, prefix + ".norm1");
    conv1.collect(out, prefix + ".conv1");
    norm2.collect(out, prefix + ".norm2");
    conv2.collect(out, prefix + ".conv2");
  }
};

/// Total scalar count of a parameter list.
inline std::size_t count_scalars(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.value->size();
  return n;
}

/// Replaces every parameter with a watched alias on `tape`.
inline void watch_all(const ParamList& params, ad::Tape& tape) {
  for (const auto& p : params) *p.value = tape.watch(p.value->detach());
}

inline void detach_all(const ParamList& params) {
  for (const auto& p : params) *p.value = p.value->detach();
}

}  // namespace slgs::nn
