#pragma once

// Central finite-difference oracle for tape gradients. The scalar objective
// is a fixed random projection of the function output, accumulated in double,
// so the check exercises every output element at once.
//
// Piecewise-smooth functions (the splat skips, clamps and truncates terms)
// may supply a regime signature; a coordinate whose stencil changes the
// regime is not differentiable there and is skipped, not compared.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "slgs/tensor.hpp"

namespace slgs::test_support {

struct GradCheckResult {
  int checked = 0;
  int failures = 0;
  int skipped = 0;  // stencil crossed a regime boundary
  double worst_abs = 0.0;
  std::string first_failure;
  bool ok() const { return failures == 0; }
};

struct GradCheckOptions {
  double h = 1e-3;
  double rtol = 1e-2;  // relative, for |grad| >= 1e-2
  double atol = 1e-4;  // absolute, for |grad| < 1e-2
  int max_coords_per_input = 64;  // random subset for large inputs
  std::function<std::vector<int>(const std::vector<ad::Tensor>&)> regime;
};

using TensorFn = std::function<ad::Tensor(const std::vector<ad::Tensor>&)>;

inline double project(const ad::Tensor& out, const std::vector<float>& w) {
  double acc = 0.0;
  for (std::size_t k = 0; k < out.size(); ++k) acc += double(out[k]) * w[k];
  return acc;
}

/// Compares tape gradients of sum(w * f(inputs)) against central differences
/// for every input flagged in `differentiable` (all when empty).
inline GradCheckResult gradcheck(const TensorFn& f, std::vector<ad::Tensor> inputs, std::mt19937_64& rng,
                                 GradCheckOptions opt = {}, std::vector<bool> differentiable = {}) {
  if (differentiable.empty()) differentiable.assign(inputs.size(), true);
  GradCheckResult res;

  const ad::Tensor probe = f(inputs);
  std::vector<float> w(probe.size());
  std::normal_distribution<float> nd(0.0f, 1.0f);
  double norm = 0.0;
  for (float& v : w) {
    v = nd(rng);
    norm += double(v) * v;
  }
  for (float& v : w) v = static_cast<float>(v / std::sqrt(norm));

  ad::Tape tape;
  std::vector<ad::Tensor> tracked;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    tracked.push_back(differentiable[i] ? tape.watch(inputs[i]) : inputs[i]);
  const ad::Tensor out = f(tracked);
  const ad::Tensor loss = ad::sum(ad::mul(out, ad::Tensor(out.shape(), w)));
  tape.backward(loss);

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!differentiable[i]) continue;
    const ad::Tensor analytic = tape.grad(tracked[i]);
    std::vector<std::size_t> coords(inputs[i].size());
    for (std::size_t k = 0; k < coords.size(); ++k) coords[k] = k;
    if (static_cast<int>(coords.size()) > opt.max_coords_per_input) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coords_per_input);
    }
    for (std::size_t k : coords) {
      std::vector<ad::Tensor> plus = inputs, minus = inputs;
      plus[i] = inputs[i].clone();
      minus[i] = inputs[i].clone();
      const float x0 = inputs[i][k];
      plus[i][k] = static_cast<float>(x0 + opt.h);
      minus[i][k] = static_cast<float>(x0 - opt.h);
      if (opt.regime) {
        const auto base = opt.regime(inputs);
        if (opt.regime(plus) != base || opt.regime(minus) != base) {
          ++res.skipped;
          continue;
        }
      }
      const double denom = double(plus[i][k]) - double(minus[i][k]);
      const double numeric = (project(f(plus), w) - project(f(minus), w)) / denom;
      const double a = analytic[k];
      const double err = std::abs(a - numeric);
      res.worst_abs = std::max(res.worst_abs, err);
      ++res.checked;
      const double mag = std::max(std::abs(a), std::abs(numeric));
      const bool pass = mag < 1e-2 ? err < opt.atol : err / mag < opt.rtol;
      if (!pass) {
        if (res.failures++ == 0)
          res.first_failure = "input " + std::to_string(i) + " coord " + std::to_string(k) +
                              ": analytic " + std::to_string(a) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return res;
}

}  // namespace slgs::test_support
