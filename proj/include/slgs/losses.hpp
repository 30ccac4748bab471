#pragma once

// Photometric and regularization losses plus evaluation metrics. Images are
// (C x H x W) tensors with values nominally in [0, 1].

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "slgs/tensor.hpp"

namespace slgs {

inline constexpr int kSsimWindow = 11;
inline constexpr float kSsimSigma = 1.5f;
inline constexpr float kSsimC1 = 0.01f * 0.01f;
inline constexpr float kSsimC2 = 0.03f * 0.03f;
inline constexpr double kPsnrCap = 100.0;

struct LossWeights {
  float lambda_dssim = 0.2f;
  float lambda_diffuse = 0.05f;
  float lambda_normal = 0.001f;
};

namespace detail {

inline void require_same_shape(const char* op, const ad::Tensor& a, const ad::Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + ad::to_string(a.shape()) + " and " + ad::to_string(b.shape()) +
                     " differ");
}

// (C x C x 11 x 11) block-diagonal Gaussian window: each channel filtered alone.
inline ad::Tensor ssim_window(int channels) {
  std::vector<double> g(kSsimWindow);
  double total = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double d = i - kSsimWindow / 2;
    g[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    total += g[i];
  }
  ad::Tensor w(ad::Shape{channels, channels, kSsimWindow, kSsimWindow}, 0.0f);
  const std::size_t kk = kSsimWindow * kSsimWindow;
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < kSsimWindow; ++y)
      for (int x = 0; x < kSsimWindow; ++x)
        w[(static_cast<std::size_t>(c) * channels + c) * kk + y * kSsimWindow + x] =
            static_cast<float>(g[y] * g[x] / (total * total));
  return w;
}

}  // namespace detail

/// Mean absolute difference.
inline ad::Tensor l1(const ad::Tensor& a, const ad::Tensor& b) {
  detail::require_same_shape("l1", a, b);
  return ad::mean(ad::abs(ad::sub(a, b)));
}

/// Mean local SSIM with an 11-tap Gaussian window (sigma 1.5), zero padding,
/// averaged over channels and pixels.
inline ad::Tensor ssim(const ad::Tensor& a, const ad::Tensor& b) {
  detail::require_same_shape("ssim", a, b);
  if (a.rank() != 3) throw ShapeError("ssim: expected (C x H x W), got " + ad::to_string(a.shape()));
  const ad::Tensor win = detail::ssim_window(a.dim(0));
  const int pad = kSsimWindow / 2;
  auto blur = [&](const ad::Tensor& x) { return ad::conv2d(x, win, nullptr, 1, pad); };
  const ad::Tensor mu_a = blur(a), mu_b = blur(b);
  const ad::Tensor mu_aa = ad::square(mu_a), mu_bb = ad::square(mu_b), mu_ab = ad::mul(mu_a, mu_b);
  const ad::Tensor var_a = ad::sub(blur(ad::square(a)), mu_aa);
  const ad::Tensor var_b = ad::sub(blur(ad::square(b)), mu_bb);
  const ad::Tensor cov = ad::sub(blur(ad::mul(a, b)), mu_ab);
  const ad::Tensor num = ad::mul(ad::add_scalar(ad::scale(mu_ab, 2.0f), kSsimC1), ad::add_scalar(ad::scale(cov, 2.0f), kSsimC2));
  const ad::Tensor den = ad::mul(ad::add_scalar(ad::add(mu_aa, mu_bb), kSsimC1), ad::add_scalar(ad::add(var_a, var_b), kSsimC2));
  return ad::mean(ad::div(num, den));
}

/// (1 - ssim) / 2.
inline ad::Tensor dssim(const ad::Tensor& a, const ad::Tensor& b) {
  return ad::scale(ad::add_scalar(ad::neg(ssim(a, b)), 1.0f), 0.5f);
}

/// (1 - lambda) L1 + lambda D-SSIM.
inline ad::Tensor photometric_loss(const ad::Tensor& render, const ad::Tensor& gt, float lambda_dssim) {
  return ad::add(ad::scale(l1(render, gt), 1.0f - lambda_dssim), ad::scale(dssim(render, gt), lambda_dssim));
}

/// Mean over rows of 1 - cos(n, target); rows weighted by `weights` (n x 1)
/// when given, so culled Gaussians can be excluded. Evaluated as
/// |u - v|^2 / 2 on the unit vectors, which equals 1 - u.v but is exactly 0
/// for identical inputs where the dot product would round.
inline ad::Tensor normal_loss(const ad::Tensor& normals, const ad::Tensor& targets, const ad::Tensor* weights = nullptr) {
  detail::require_same_shape("normal_loss", normals, targets);
  const ad::Tensor diff = ad::sub(ad::normalize_rows(normals), ad::normalize_rows(targets));
  const ad::Tensor per_row = ad::scale(ad::sum(ad::square(diff), 1), 0.5f);
  if (!weights) return ad::mean(per_row);
  double total = 0.0;
  for (float w : weights->data()) total += w;
  if (total <= 0.0) return ad::scale(ad::sum(ad::mul(per_row, *weights)), 0.0f);
  return ad::scale(ad::sum(ad::mul(per_row, *weights)), static_cast<float>(1.0 / total));
}

struct LossTerms {
  ad::Tensor total;
  float render = 0.0f;   // photometric term on the composed image
  float diffuse = 0.0f;  // photometric term on the diffuse image
  float normal = 0.0f;
};

/// L_render + lambda_diffuse L_diffuse + lambda_normal L_normal, where both
/// photometric terms use the L1 / D-SSIM mix against the same ground truth.
inline LossTerms total_loss(const ad::Tensor& render, const ad::Tensor& diffuse, const ad::Tensor& gt,
                            const ad::Tensor& normals, const ad::Tensor& pseudo_normals, const LossWeights& w,
                            const ad::Tensor* visible = nullptr) {
  if (w.lambda_dssim < 0.0f || w.lambda_dssim > 1.0f || w.lambda_diffuse < 0.0f || w.lambda_normal < 0.0f)
    throw ConfigError("total_loss: loss weights must be non-negative and lambda_dssim <= 1");
  LossTerms t;
  const ad::Tensor lr = photometric_loss(render, gt, w.lambda_dssim);
  const ad::Tensor ld = photometric_loss(diffuse, gt, w.lambda_dssim);
  const ad::Tensor ln = normals.size() > 0 && normals.rank() == 2 && normals.dim(0) > 0
                            ? normal_loss(normals, pseudo_normals, visible)
                            : ad::Tensor::scalar(0.0f);
  t.render = lr.item();
  t.diffuse = ld.item();
  t.normal = ln.item();
  t.total = ad::add(ad::add(lr, ad::scale(ld, w.lambda_diffuse)), ad::scale(ln, w.lambda_normal));
  return t;
}

/// 10 log10(1 / MSE); identical images report kPsnrCap.
inline double psnr(const ad::Tensor& a, const ad::Tensor& b) {
  detail::require_same_shape("psnr", a, b);
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.size());
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

inline double ssim_value(const ad::Tensor& a, const ad::Tensor& b) {
  return ssim(a.detach(), b.detach()).item();
}

/// One JSON-lines metric record.
inline std::string metrics_line(int iter, double psnr_db, double ssim_v, double loss) {
  return nlohmann::json{{"iter", iter}, {"psnr", psnr_db}, {"ssim", ssim_v}, {"loss", loss}}.dump();
}

}  // namespace slgs
