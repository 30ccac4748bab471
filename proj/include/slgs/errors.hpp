#pragma once

#include <stdexcept>
#include <string>

namespace slgs {

// Base for every error the library throws; what() carries the detail.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define SLGS_DEFINE_ERROR(Name)          \
  class Name : public Error {            \
   public:                               \
    using Error::Error;                  \
  };

SLGS_DEFINE_ERROR(InvalidPrimitive)
SLGS_DEFINE_ERROR(InvalidCamera)
SLGS_DEFINE_ERROR(MalformedFile)
SLGS_DEFINE_ERROR(UnsupportedCameraModel)
SLGS_DEFINE_ERROR(EmptyReconstruction)
SLGS_DEFINE_ERROR(ShapeError)
SLGS_DEFINE_ERROR(StateError)
SLGS_DEFINE_ERROR(NonFiniteGradient)
SLGS_DEFINE_ERROR(NonFiniteLoss)
SLGS_DEFINE_ERROR(ConfigError)
SLGS_DEFINE_ERROR(IoError)

#undef SLGS_DEFINE_ERROR

}  // namespace slgs
