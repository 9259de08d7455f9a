#include "rdc/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>

namespace rdc {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape s, double fill)
    : shape(std::move(s)), values(numel(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> v)
    : shape(std::move(s)), values(std::move(v)) {}

bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace rdc
