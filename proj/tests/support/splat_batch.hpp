#pragma once

#include <cmath>
#include <vector>

#include "slgs/rasterizer.hpp"

namespace slgs::test_support {

// A ProjectionBatch whose geometry tensor is the given (possibly tracked) leaf.
inline ProjectionBatch batch_from_geometry(const ad::Tensor& geometry, const ad::Tensor& opacities) {
  ProjectionBatch b;
  b.geometry = geometry;
  const int n = geometry.dim(0);
  for (int i = 0; i < n; ++i) {
    ProjectedGaussian g;
    g.mean2d = Eigen::Vector2f(geometry[6 * i], geometry[6 * i + 1]);
    g.cov2d << geometry[6 * i + 2], geometry[6 * i + 3], geometry[6 * i + 3], geometry[6 * i + 4];
    g.depth = geometry[6 * i + 5];
    g.radius = 3.0f * std::sqrt(max_eigenvalue(g.cov2d));
    g.opacity = opacities[i];
    g.source_index = i;
    b.visible.push_back(g);
  }
  sort_by_depth(b.visible);
  return b;
}

inline ad::Tensor geometry_of(const std::vector<ProjectedGaussian>& list) {
  ad::Tensor geo(ad::Shape{static_cast<int>(list.size()), 6});
  for (const auto& g : list) {
    float* r = &geo.data()[6 * g.source_index];
    r[0] = g.mean2d.x();
    r[1] = g.mean2d.y();
    r[2] = g.cov2d(0, 0);
    r[3] = g.cov2d(0, 1);
    r[4] = g.cov2d(1, 1);
    r[5] = g.depth;
  }
  return geo;
}

}  // namespace slgs::test_support
