#include <cmath>
#include <cstring>
#include <numbers>

#include "doctest.h"
#include "rdc/errors.hpp"
#include "rdc/gaussmetric.hpp"
#include "rdc/grad_check.hpp"
#include "gauss_oracles.hpp"

using namespace rdc;
using namespace rdc::gauss;
using namespace rdc::testing;

TEST_CASE("symmetric_eigen basics") {
  Matrix eye = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  SpdEigen e = symmetric_eigen(eye, 3);
  for (double l : e.eigenvalues) CHECK(l == 1.0);

  SpdEigen d = symmetric_eigen(Matrix{9, 0, 0, 4}, 2);
  CHECK(d.eigenvalues == std::vector<double>{4.0, 9.0});
  CHECK(std::abs(d.eigenvectors[0 * 2 + 0]) == 0.0);
  CHECK(std::abs(d.eigenvectors[1 * 2 + 0]) == 1.0);
  CHECK(std::abs(d.eigenvectors[0 * 2 + 1]) == 1.0);

  CHECK_THROWS_AS(symmetric_eigen(Matrix{1, 2, 3, 4}, 2), DomainError);
  CHECK_THROWS_AS(symmetric_eigen(Matrix{1, 2, 3}, 2), ShapeError);
}

TEST_CASE("symmetric_eigen reconstruction and orthogonality") {
  for (std::uint64_t s = 0; s < 50; ++s) {
    Rng rng(s);
    const std::size_t n = 5;
    Matrix a(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i; j < n; ++j) a[i * n + j] = a[j * n + i] = rng.uniform(-3, 3);
    SpdEigen e = symmetric_eigen(a, n);
    // Indefinite input: eigenvalues get clamped, so reconstruct from the
    // raw spectrum of A + shift instead.
    Matrix shifted = a;
    for (std::size_t i = 0; i < n; ++i) shifted[i * n + i] += 20.0;
    e = symmetric_eigen(shifted, n);
    CHECK(e.clamped == 0);
    CHECK(std::is_sorted(e.eigenvalues.begin(), e.eigenvalues.end()));
    double recon = 0.0, ortho = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double r = 0.0, o = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          r += e.eigenvectors[i * n + k] * e.eigenvalues[k] * e.eigenvectors[j * n + k];
          o += e.eigenvectors[k * n + i] * e.eigenvectors[k * n + j];
        }
        recon = std::max(recon, std::abs(r - shifted[i * n + j]));
        ortho = std::max(ortho, std::abs(o - (i == j ? 1.0 : 0.0)));
      }
    CHECK(recon <= 1e-10);
    CHECK(ortho <= 1e-9);
  }
}

TEST_CASE("negative eigenvalues are clamped and counted") {
  const std::size_t before = clamp_warning_count();
  SpdEigen e = symmetric_eigen(Matrix{1, 0, 0, -2}, 2);
  CHECK(e.eigenvalues == std::vector<double>{0.0, 1.0});
  CHECK(e.clamped == 1);
  CHECK(clamp_warning_count() == before + 1);
}

TEST_CASE("spd_sqrt") {
  Matrix eye = {1, 0, 0, 1};
  CHECK(spd_sqrt(eye, 2) == eye);
  Matrix r = spd_sqrt(Matrix{4, 0, 0, 9}, 2);
  CHECK(r == Matrix{2, 0, 0, 3});
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(50 + s);
    const std::size_t n = 1 + s % 6;
    Matrix a = random_spd(n, rng, 1.0);
    Matrix q = spd_sqrt(a, n);
    Matrix sq = matmul(q, q, n);
    double err = 0.0, norm = 0.0;
    for (std::size_t i = 0; i < n * n; ++i) {
      err = std::max(err, std::abs(sq[i] - a[i]));
      norm += a[i] * a[i];
      CHECK(q[i] == q[(i % n) * n + i / n]);
    }
    CHECK(err <= 1e-8 * std::sqrt(norm));
  }
}

TEST_CASE("wasserstein_sq examples") {
  Rng rng(3);
  RegionGaussian g = random_full(3, rng);
  CHECK(wasserstein_sq(g, g) == 0.0);

  RegionGaussian a = full_gaussian({0, 0}, {1, 0, 0, 1});
  RegionGaussian b = full_gaussian({3, 4}, {1, 0, 0, 1});
  CHECK(wasserstein_sq(a, b) == doctest::Approx(25.0).epsilon(1e-14));

  RegionGaussian u = full_gaussian({0.5}, {1.0});
  RegionGaussian v = full_gaussian({0.5}, {4.0});
  CHECK(std::abs(wasserstein_sq(u, v) - 1.0) <= 1e-12);
  CHECK(std::abs(wasserstein_sq(diag_gaussian({0.5}, {1.0}), diag_gaussian({0.5}, {4.0})) -
                 1.0) <= 1e-12);

  CHECK_THROWS_AS(wasserstein_sq(a, u), ShapeError);
  CHECK_THROWS_AS(wasserstein_sq(a, diag_gaussian({0, 0}, {1, 1})), ShapeError);
}

TEST_CASE("full-mode path equals diagonal closed form on 500 diagonal pairs") {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 500; ++s) {
    Rng rng(1000 + s);
    const std::size_t n = 1 + s % 6;
    std::vector<double> m1(n), m2(n), v1(n), v2(n);
    for (std::size_t i = 0; i < n; ++i) {
      m1[i] = rng.uniform(-1, 1);
      m2[i] = rng.uniform(-1, 1);
      v1[i] = rng.uniform(1e-3, 3);
      v2[i] = rng.uniform(1e-3, 3);
    }
    double closed = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      closed += (m1[i] - m2[i]) * (m1[i] - m2[i]) +
                (std::sqrt(v1[i]) - std::sqrt(v2[i])) * (std::sqrt(v1[i]) - std::sqrt(v2[i]));
    RegionGaussian d1 = diag_gaussian(m1, v1), d2 = diag_gaussian(m2, v2);
    worst = std::max(worst, std::abs(wasserstein_sq(as_full(d1), as_full(d2)) - closed));
    worst = std::max(worst, std::abs(wasserstein_sq(d1, d2) - closed));
  }
  CHECK(worst <= 1e-10);
}

TEST_CASE("1-D closed form (m1-m2)^2 + (s1-s2)^2") {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 200; ++s) {
    Rng rng(7000 + s);
    const double m1 = rng.uniform(-3, 3), m2 = rng.uniform(-3, 3);
    const double s1 = rng.uniform(0.01, 2), s2 = rng.uniform(0.01, 2);
    const double want = (m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2);
    worst = std::max(worst, std::abs(wasserstein_sq(full_gaussian({m1}, {s1 * s1}),
                                                    full_gaussian({m2}, {s2 * s2})) - want));
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("wasserstein gradients") {
  Rng rng(17);
  RegionGaussian g = random_full(3, rng);
  DistanceEval z = wasserstein_sq_grad(g, g);
  for (const auto* blk : {&z.grad.dmu1, &z.grad.dmu2, &z.grad.dsigma1, &z.grad.dsigma2})
    for (double v : *blk) CHECK(std::abs(v) <= 1e-10);

  DistanceEval d = wasserstein_sq_grad(diag_gaussian({0.0}, {1.0}), diag_gaussian({0.0}, {4.0}));
  CHECK(d.grad.dsigma1[0] == -1.0);
  CHECK(d.grad.dsigma2[0] == 0.5);

  double worst = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng r(2000 + s);
    RegionGaussian a = random_full(3, r), b = random_full(3, r, 1);
    worst = std::max(worst, fd_check(wasserstein_sq, a, b, wasserstein_sq_grad(a, b).grad));
    RegionGaussian da = a, db = b;
    da.mode = db.mode = CovMode::diag;
    da.sigma = {a.sigma[0], a.sigma[4], a.sigma[8]};
    db.sigma = {b.sigma[0], b.sigma[4], b.sigma[8]};
    worst = std::max(worst, fd_check(wasserstein_sq, da, db, wasserstein_sq_grad(da, db).grad));
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("wasserstein gradient near a degenerate spectrum") {
  // Repeated eigenvalues exercise the divided-difference limit.
  RegionGaussian a = full_gaussian({0, 0, 0}, {2, 0, 0, 0, 2, 0, 0, 0, 2});
  RegionGaussian b = full_gaussian({1, 0, 0}, {1, 0.2, 0, 0.2, 1.5, 0.1, 0, 0.1, 0.7}, 1);
  CHECK(fd_check(wasserstein_sq, a, b, wasserstein_sq_grad(a, b).grad) <= 1e-4);
}

TEST_CASE("KL and Jeffreys") {
  Rng rng(23);
  RegionGaussian g = random_full(3, rng);
  CHECK(std::abs(kl_gauss(g, g)) <= 1e-12);
  CHECK(std::abs(jeffreys(g, g)) <= 1e-12);

  CHECK(kl_gauss(full_gaussian({0}, {1}), full_gaussian({1}, {1})) == doctest::Approx(0.5));
  CHECK(kl_gauss(diag_gaussian({0}, {1}), diag_gaussian({1}, {1})) == doctest::Approx(0.5));

  double worst = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    Rng r(400 + s);
    const double m1 = r.uniform(-1, 1), m2 = r.uniform(-1, 1);
    const double v1 = r.uniform(0.2, 2), v2 = r.uniform(0.2, 2);
    const double q = kl_quadrature(m1, v1, m2, v2);
    worst = std::max(worst, std::abs(kl_gauss(full_gaussian({m1}, {v1}), full_gaussian({m2}, {v2})) - q));
  }
  CHECK(worst <= 1e-6);

  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng r(900 + s);
    RegionGaussian a = random_full(3, r), b = random_full(3, r, 1);
    CHECK(jeffreys(a, b) == jeffreys(b, a));
    CHECK(kl_gauss(a, b) >= -1e-10);
    CHECK(fd_check(kl_gauss, a, b, kl_gauss_grad(a, b).grad) <= 1e-4);
    CHECK(fd_check(jeffreys, a, b, jeffreys_grad(a, b).grad) <= 1e-4);
    RegionGaussian da = a, db = b;
    da.mode = db.mode = CovMode::diag;
    da.sigma = {a.sigma[0], a.sigma[4], a.sigma[8]};
    db.sigma = {b.sigma[0], b.sigma[4], b.sigma[8]};
    CHECK(fd_check(kl_gauss, da, db, kl_gauss_grad(da, db).grad) <= 1e-4);
    CHECK(fd_check(jeffreys, da, db, jeffreys_grad(da, db).grad) <= 1e-4);
    // diag KL equals full KL on the embedded diagonal matrices
    CHECK(kl_gauss(da, db) == doctest::Approx(kl_gauss(as_full(da), as_full(db))).epsilon(1e-12));
  }
}

TEST_CASE("wasserstein properties") {
  // Bitwise symmetry.
  for (std::uint64_t s = 0; s < 50; ++s) {
    Rng r(s);
    RegionGaussian a = random_full(4, r), b = random_full(4, r);
    const double ab = wasserstein_sq(a, b), ba = wasserstein_sq(b, a);
    CHECK(std::memcmp(&ab, &ba, sizeof ab) == 0);
    DistanceEval gab = wasserstein_sq_grad(a, b), gba = wasserstein_sq_grad(b, a);
    CHECK(gab.grad.dsigma1 == gba.grad.dsigma2);
    CHECK(gab.grad.dmu2 == gba.grad.dmu1);
  }

  // Triangle inequality of the root distance.
  double slack = 1e300;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    Rng r(50000 + s);
    const std::size_t n = 1 + s % 4;
    RegionGaussian a = random_full(n, r), b = random_full(n, r), c = random_full(n, r);
    const double ab = std::sqrt(wasserstein_sq(a, b));
    const double bc = std::sqrt(wasserstein_sq(b, c));
    const double ac = std::sqrt(wasserstein_sq(a, c));
    slack = std::min(slack, ab + bc - ac);
  }
  CHECK(slack >= -1e-9);

  // Positivity.
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng r(800 + s);
    RegionGaussian a = random_full(3, r), b = random_full(3, r);
    CHECK(wasserstein_sq(a, b) > 0.0);
    RegionGaussian c = a;
    c.sigma[0] += 1e-3;
    CHECK(wasserstein_sq(a, c) > 0.0);
  }

  // 1-D scale law.
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng r(1200 + s);
    const double m1 = r.uniform(-2, 2), m2 = r.uniform(-2, 2);
    const double s1 = r.uniform(0.1, 2), s2 = r.uniform(0.1, 2), t = r.uniform(0.1, 5);
    const double base = wasserstein_sq(full_gaussian({m1}, {s1 * s1}), full_gaussian({m2}, {s2 * s2}));
    const double scaled = wasserstein_sq(full_gaussian({t * m1}, {t * t * s1 * s1}),
                                         full_gaussian({t * m2}, {t * t * s2 * s2}));
    CHECK(std::abs(scaled - t * t * base) <= 1e-9);
  }
}
