#pragma once

#include <cmath>
#include <cstddef>

#include "hpinit/error.hpp"
#include "hpinit/geometry.hpp"

namespace hpinit {

/// Landmark pair whose distance normalizes alignment error. Defaults to the
/// outer eye corners of the 68-point iBUG layout (1-based 37 and 46).
struct Normalizer {
  std::size_t left = 36;
  std::size_t right = 45;
};

/// Mean point-to-point error divided by the normalizer distance of `truth`.
inline double normalized_error(const Shape2D& pred, const Shape2D& truth,
                               const Normalizer& norm = {}) {
  require(pred.size() == truth.size(), Errc::ShapeMismatch, "normalized_error: K differs");
  require(norm.left < truth.size() && norm.right < truth.size(), Errc::InvalidArgument,
          "normalizer landmark index out of range");
  const double d = (truth.point(norm.left) - truth.point(norm.right)).norm();
  require(d > 0.0, Errc::ZeroNormalizer, "normalizer landmarks coincide");
  double sum = 0.0;
  for (std::size_t k = 0; k < truth.size(); ++k) sum += (pred.point(k) - truth.point(k)).norm();
  return sum / static_cast<double>(truth.size()) / d;
}

}  // namespace hpinit
