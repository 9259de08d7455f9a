#pragma once

#include <cmath>
#include <vector>

#include "rdc/rng.hpp"
#include "rdc/tensor.hpp"

namespace rdc::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values) v = rng.uniform(lo, hi);
  return t;
}

// Random tensor with every entry at least `margin` away from zero, so relu
// kinks stay outside the finite-difference stencil.
inline Tensor random_tensor_off_kink(Shape shape, Rng& rng,
                                     double margin = 1e-3) {
  Tensor t(std::move(shape));
  for (double& v : t.values) {
    do {
      v = rng.uniform(-1.0, 1.0);
    } while (std::abs(v) < margin);
  }
  return t;
}

inline double max_abs_diff(const std::vector<double>& a,
                           const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace rdc::testing
