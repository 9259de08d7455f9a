#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "rdc/regionstats.hpp"

namespace rdc::gauss {

using regions::CovMode;
using regions::RegionGaussian;

// Square matrices are row-major std::vector<double> of n*n entries.
using Matrix = std::vector<double>;

struct SpdEigen {
  std::vector<double> eigenvalues;  // ascending, clamped >= 0
  Matrix eigenvectors;              // column k pairs with eigenvalues[k]
  std::size_t n = 0;
  std::size_t clamped = 0;          // negative eigenvalues raised to 0
  int sweeps = 0;
};

// Cyclic Jacobi rotations until every off-diagonal entry is negligible
// against its two diagonal entries at rounding level (and below
// 1e-12 * ||A||_F), or 50 sweeps. Throws DomainError if A is not symmetric.
SpdEigen symmetric_eigen(std::span<const double> a, std::size_t n);

// Process-wide count of eigenvalues clamped to zero.
std::size_t clamp_warning_count();

Matrix spd_sqrt(std::span<const double> a, std::size_t n);

Matrix matmul(std::span<const double> a, std::span<const double> b,
              std::size_t n);

// Gradient blocks w.r.t. both arguments. Covariance blocks follow the
// argument's storage mode and are symmetric: dL = tr(dsigma * d(Sigma)).
struct GaussianGrad {
  std::vector<double> dmu1, dsigma1, dmu2, dsigma2;
};

struct DistanceEval {
  double value = 0.0;
  GaussianGrad grad;
};

// Squared 2-Wasserstein distance. Full mode uses the symmetric Bures form
// Tr((S1^{1/2} S2 S1^{1/2})^{1/2}); diag mode the closed form
// |mu1-mu2|^2 + sum_c (sqrt(s1c) - sqrt(s2c))^2. Clamped to >= 0 and bitwise
// symmetric in its arguments.
double wasserstein_sq(const RegionGaussian& g1, const RegionGaussian& g2);
DistanceEval wasserstein_sq_grad(const RegionGaussian& g1,
                                 const RegionGaussian& g2);

// KL(N1 || N2) and its symmetrization 0.5 * (KL(1||2) + KL(2||1)).
double kl_gauss(const RegionGaussian& g1, const RegionGaussian& g2);
DistanceEval kl_gauss_grad(const RegionGaussian& g1, const RegionGaussian& g2);
double jeffreys(const RegionGaussian& g1, const RegionGaussian& g2);
DistanceEval jeffreys_grad(const RegionGaussian& g1, const RegionGaussian& g2);

}  // namespace rdc::gauss
