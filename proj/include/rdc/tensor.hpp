#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace rdc {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major array of doubles. `grad` is empty unless a tape has
// allocated a gradient buffer for it.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> v);

  std::size_t size() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  bool has_grad() const { return !grad.empty(); }

  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }
};

bool all_finite(const std::vector<double>& v);

}  // namespace rdc
