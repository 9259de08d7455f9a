#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "rdc/tape.hpp"

namespace rdc::ad {

using ScalarGraph = std::function<Var(Tape&, Var)>;

// Max over coordinates of |analytic - central difference| /
// max(1e-8, |central difference|). Throws ShapeError if f is not scalar.
double grad_check(const ScalarGraph& f, const Tensor& x, double eps = 1e-5);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  // Coordinates skipped because the perturbation crossed a kink.
  std::size_t kink_skips = 0;
};

// Same measure over a chosen subset of coordinates. A coordinate whose +/-eps
// evaluations change the kink pattern of the tape is skipped and counted.
// With `extrapolate`, the differences at eps and eps/2 are combined as
// (4 D(eps/2) - D(eps)) / 3, which cancels the eps^2 truncation term.
GradCheckReport grad_check_coords(const ScalarGraph& f, const Tensor& x,
                                  std::span<const std::size_t> coords,
                                  double eps = 1e-5, bool extrapolate = false);

// Directional variant: compares the analytic derivative along each unit
// direction, grad . v, with the central difference of f(x + h v). The measure,
// kink skipping and extrapolation match grad_check_coords.
GradCheckReport grad_check_directions(const ScalarGraph& f, const Tensor& x,
                                      std::span<const std::vector<double>> directions,
                                      double eps = 1e-5, bool extrapolate = false);

// Plain-function variant for adjoints computed outside a tape.
double grad_check(const std::function<double(std::span<const double>)>& f,
                  std::span<const double> analytic, std::span<const double> x,
                  double eps = 1e-5);

double relative_error(double analytic, double numeric);

}  // namespace rdc::ad
