#pragma once

// Gaussian builders, a block-wise finite-difference check for distance
// gradients and a quadrature KL oracle.

#include <algorithm>
#include <cmath>
#include <numbers>

#include "rdc/gaussmetric.hpp"
#include "rdc/grad_check.hpp"
#include "rdc/rng.hpp"

namespace rdc::testing {

using gauss::GaussianGrad;
using gauss::Matrix;
using regions::CovMode;
using regions::RegionGaussian;

inline Matrix random_spd(std::size_t n, Rng& rng, double ridge = 0.1) {
  Matrix b(n * n);
  for (auto& v : b) v = rng.uniform(-1, 1);
  Matrix a(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t k = 0; k < n; ++k) a[i * n + j] += b[k * n + i] * b[k * n + j];
      if (i == j) a[i * n + j] += ridge;
    }
  return a;
}

inline RegionGaussian full_gaussian(std::vector<double> mu, Matrix sigma,
                             std::uint32_t id = 0) {
  RegionGaussian g;
  g.region_id = id;
  g.mu = std::move(mu);
  g.sigma = std::move(sigma);
  g.mode = CovMode::full;
  g.eps = 1e-5;
  g.n = 10;
  return g;
}

inline RegionGaussian diag_gaussian(std::vector<double> mu, std::vector<double> var,
                             std::uint32_t id = 0) {
  RegionGaussian g = full_gaussian(std::move(mu), std::move(var), id);
  g.mode = CovMode::diag;
  return g;
}

inline RegionGaussian random_full(std::size_t n, Rng& rng, std::uint32_t id = 0) {
  std::vector<double> mu(n);
  for (auto& v : mu) v = rng.uniform(-2, 2);
  return full_gaussian(mu, random_spd(n, rng), id);
}

inline RegionGaussian as_full(const RegionGaussian& d) {
  const std::size_t n = d.dim();
  Matrix s(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) s[i * n + i] = d.sigma[i];
  RegionGaussian g = d;
  g.sigma = s;
  g.mode = CovMode::full;
  return g;
}

// Max relative error of the analytic gradient blocks against central
// differences. Off-diagonal covariance entries are perturbed symmetrically,
// whose directional derivative is 2 * G_ij.
template <typename F>
double fd_check(F dist, const RegionGaussian& g1, const RegionGaussian& g2,
                const GaussianGrad& grad, double eps = 1e-6) {
  double worst = 0.0;
  auto probe = [&](int which, bool is_mu, std::size_t i, std::size_t j,
                   double analytic) {
    auto eval = [&](double h) {
      RegionGaussian a = g1, b = g2;
      RegionGaussian& t = which == 0 ? a : b;
      if (is_mu) {
        t.mu[i] += h;
      } else if (t.mode == CovMode::diag) {
        t.sigma[i] += h;
      } else {
        const std::size_t n = t.dim();
        t.sigma[i * n + j] += h;
        if (i != j) t.sigma[j * n + i] += h;
      }
      return dist(a, b);
    };
    const double numeric = (eval(eps) - eval(-eps)) / (2 * eps);
    worst = std::max(worst, ad::relative_error(analytic, numeric));
  };
  const std::size_t n = g1.dim();
  for (int which = 0; which < 2; ++which) {
    const auto& dmu = which == 0 ? grad.dmu1 : grad.dmu2;
    const auto& ds = which == 0 ? grad.dsigma1 : grad.dsigma2;
    for (std::size_t i = 0; i < n; ++i) probe(which, true, i, 0, dmu[i]);
    if (g1.mode == CovMode::diag) {
      for (std::size_t i = 0; i < n; ++i) probe(which, false, i, 0, ds[i]);
    } else {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i; j < n; ++j)
          probe(which, false, i, j, i == j ? ds[i * n + i] : 2.0 * ds[i * n + j]);
    }
  }
  return worst;
}

// Simpson's rule for KL(N(m1,v1) || N(m2,v2)) over [-20 sd, 20 sd] of p.
inline double kl_quadrature(double m1, double v1, double m2, double v2) {
  const double s1 = std::sqrt(v1);
  const double lo = m1 - 20 * s1, hi = m1 + 20 * s1;
  const int steps = 200000;
  const double h = (hi - lo) / steps;
  auto logpdf = [](double x, double m, double v) {
    return -0.5 * std::log(2 * std::numbers::pi * v) - (x - m) * (x - m) / (2 * v);
  };
  auto f = [&](double x) {
    const double lp = logpdf(x, m1, v1);
    return std::exp(lp) * (lp - logpdf(x, m2, v2));
  };
  double s = f(lo) + f(hi);
  for (int i = 1; i < steps; ++i) s += f(lo + i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}


}  // namespace rdc::testing
