#pragma once

#include <span>
#include <vector>

#include "slgs/rasterizer.hpp"

namespace slgs::test_support {

/// Which terms each pixel blends and which hit the alpha ceiling. Two inputs
/// with equal signatures lie in the same smooth piece of the splat.
inline std::vector<int> splat_regime(std::span<const ProjectedGaussian> list, int width, int height) {
  std::vector<int> sig;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      float trans = 1.0f;
      for (const auto& g : list) {
        detail::Weight wt;
        if (!detail::blend_weight(g, detail::conic_of(g.cov2d), x + 0.5f, y + 0.5f, wt)) continue;
        const float next_t = trans * (1.0f - wt.alpha);
        if (next_t < kTransmittanceStop) break;
        trans = next_t;
        sig.push_back(2 * g.source_index + (wt.clamped ? 1 : 0));
      }
      sig.push_back(-1);
    }
  return sig;
}

}  // namespace slgs::test_support
