#pragma once

// Umbrella header.

#include "slgs/checkpoint.hpp"
#include "slgs/colmap.hpp"
#include "slgs/decoders.hpp"
#include "slgs/dual.hpp"
#include "slgs/errors.hpp"
#include "slgs/image_io.hpp"
#include "slgs/losses.hpp"
#include "slgs/model.hpp"
#include "slgs/nn.hpp"
#include "slgs/parallel.hpp"
#include "slgs/projection.hpp"
#include "slgs/rasterizer.hpp"
#include "slgs/scene_model.hpp"
#include "slgs/shading.hpp"
#include "slgs/synthetic.hpp"
#include "slgs/tensor.hpp"
#include "slgs/trainer.hpp"
