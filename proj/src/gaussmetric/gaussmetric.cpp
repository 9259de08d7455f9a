#include "rdc/gaussmetric.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <string>

#include <Eigen/SVD>

#include "rdc/errors.hpp"

namespace rdc::gauss {
namespace {

std::atomic<std::size_t> g_clamp_warnings{0};

constexpr double kSpectralGapFloor = 1e-8;
constexpr double kEigenFloor = 1e-300;

// V * diag(f) * V^T
Matrix spectral(const SpdEigen& e, std::span<const double> f) {
  const std::size_t n = e.n;
  Matrix out(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k)
        s += e.eigenvectors[i * n + k] * f[k] * e.eigenvectors[j * n + k];
      out[i * n + j] = s;
      out[j * n + i] = s;
    }
  return out;
}

Matrix transpose(std::span<const double> a, std::size_t n) {
  Matrix t(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) t[j * n + i] = a[i * n + j];
  return t;
}

void symmetrize(Matrix& a, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double m = 0.5 * (a[i * n + j] + a[j * n + i]);
      a[i * n + j] = m;
      a[j * n + i] = m;
    }
}

double trace(std::span<const double> a, std::size_t n) {
  double t = 0.0;
  for (std::size_t i = 0; i < n; ++i) t += a[i * n + i];
  return t;
}

void require_compatible(const RegionGaussian& g1, const RegionGaussian& g2) {
  if (g1.dim() != g2.dim())
    throw ShapeError("gaussian dimension mismatch: " + std::to_string(g1.dim()) +
                     " vs " + std::to_string(g2.dim()));
  if (g1.mode != g2.mode) throw ShapeError("gaussian covariance mode mismatch");
  const std::size_t want = g1.mode == CovMode::full ? g1.dim() * g1.dim() : g1.dim();
  if (g1.sigma.size() != want || g2.sigma.size() != want)
    throw ShapeError("gaussian covariance storage does not match its mode");
}

// Fixed argument order so that d(a, b) and d(b, a) run identical arithmetic.
bool precedes(const RegionGaussian& a, const RegionGaussian& b) {
  if (a.region_id != b.region_id) return a.region_id < b.region_id;
  if (a.mu != b.mu) return a.mu < b.mu;
  return a.sigma < b.sigma;
}

DistanceEval swapped(DistanceEval e) {
  std::swap(e.grad.dmu1, e.grad.dmu2);
  std::swap(e.grad.dsigma1, e.grad.dsigma2);
  return e;
}

DistanceEval wasserstein_diag(const RegionGaussian& g1, const RegionGaussian& g2,
                              bool want_grad) {
  const std::size_t c = g1.dim();
  DistanceEval out;
  double w = 0.0;
  for (std::size_t i = 0; i < c; ++i) {
    const double d = g1.mu[i] - g2.mu[i];
    w += d * d;
  }
  for (std::size_t i = 0; i < c; ++i) {
    const double d = std::sqrt(g1.sigma[i]) - std::sqrt(g2.sigma[i]);
    w += d * d;
  }
  out.value = std::max(w, 0.0);
  if (!want_grad) return out;
  auto& gr = out.grad;
  gr.dmu1.resize(c);
  gr.dmu2.resize(c);
  gr.dsigma1.resize(c);
  gr.dsigma2.resize(c);
  for (std::size_t i = 0; i < c; ++i) {
    gr.dmu1[i] = 2.0 * (g1.mu[i] - g2.mu[i]);
    gr.dmu2[i] = -gr.dmu1[i];
    const double s1 = std::max(g1.sigma[i], g1.eps);
    const double s2 = std::max(g2.sigma[i], g2.eps);
    gr.dsigma1[i] = 1.0 - std::sqrt(g2.sigma[i] / s1);
    gr.dsigma2[i] = 1.0 - std::sqrt(g1.sigma[i] / s2);
  }
  return out;
}

// Adjoint of S = sqrt(A) through A's eigendecomposition: given G_S, returns
// G_A = V ((V^T G_S V) o K) V^T with K the divided differences of sqrt.
Matrix sqrt_adjoint(const SpdEigen& e, std::span<const double> g_s) {
  const std::size_t n = e.n;
  const Matrix& v = e.eigenvectors;
  const Matrix vt = transpose(v, n);
  Matrix inner = matmul(matmul(vt, g_s, n), v, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double li = std::max(e.eigenvalues[i], kEigenFloor);
      const double lj = std::max(e.eigenvalues[j], kEigenFloor);
      double k;
      if (std::abs(li - lj) < kSpectralGapFloor)
        k = 0.5 / std::sqrt(0.5 * (li + lj));
      else
        k = (std::sqrt(li) - std::sqrt(lj)) / (li - lj);
      inner[i * n + j] *= k;
    }
  Matrix out = matmul(matmul(v, inner, n), vt, n);
  symmetrize(out, n);
  return out;
}

DistanceEval wasserstein_full(const RegionGaussian& g1, const RegionGaussian& g2,
                              bool want_grad) {
  const std::size_t n = g1.dim();
  double mean_term = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = g1.mu[i] - g2.mu[i];
    mean_term += d * d;
  }
  const SpdEigen e1 = symmetric_eigen(g1.sigma, n);
  std::vector<double> root(n);
  for (std::size_t k = 0; k < n; ++k) root[k] = std::sqrt(e1.eigenvalues[k]);
  const Matrix s1 = spectral(e1, root);
  // M = S1 Sigma2 S1 = B B^T with B = S1 Sigma2^{1/2}. tr(M^{1/2}) is the sum
  // of B's singular values, which carry absolute error near ulp(|B|); taking
  // square roots of M's tiny eigenvalues would magnify their rounding error
  // by 1/(2 sqrt(lambda)).
  const SpdEigen e2 = symmetric_eigen(g2.sigma, n);
  std::vector<double> root2(n);
  for (std::size_t k = 0; k < n; ++k) root2[k] = std::sqrt(e2.eigenvalues[k]);
  const Matrix b = matmul(s1, spectral(e2, root2), n);
  const auto ni = static_cast<Eigen::Index>(n);
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
          b.data(), ni, ni),
      Eigen::ComputeFullU);
  SpdEigen em;
  em.n = n;
  em.eigenvalues.resize(n);
  em.eigenvectors.resize(n * n);
  double bures_cross = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double sv = svd.singularValues()(static_cast<Eigen::Index>(k));
    bures_cross += sv;
    em.eigenvalues[k] = sv * sv;
    for (std::size_t i = 0; i < n; ++i)
      em.eigenvectors[i * n + k] =
          svd.matrixU()(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
  }

  DistanceEval out;
  out.value = std::max(
      mean_term + trace(g1.sigma, n) + trace(g2.sigma, n) - 2.0 * bures_cross,
      0.0);
  if (!want_grad) return out;

  auto& gr = out.grad;
  gr.dmu1.resize(n);
  gr.dmu2.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    gr.dmu1[i] = 2.0 * (g1.mu[i] - g2.mu[i]);
    gr.dmu2[i] = -gr.dmu1[i];
  }
  // d tr(M^{1/2}) / dM = 0.5 M^{-1/2}
  std::vector<double> half_inv_root(n);
  for (std::size_t k = 0; k < n; ++k)
    half_inv_root[k] = 0.5 / std::sqrt(std::max(em.eigenvalues[k], kEigenFloor));
  const Matrix g_m = spectral(em, half_inv_root);
  // M = S1 Sigma2 S1
  Matrix g_sigma2 = matmul(matmul(s1, g_m, n), s1, n);
  const Matrix t = matmul(matmul(g_m, s1, n), g2.sigma, n);
  Matrix g_s1 = t;
  const Matrix tt = transpose(t, n);
  for (std::size_t i = 0; i < n * n; ++i) g_s1[i] += tt[i];
  const Matrix g_sigma1 = sqrt_adjoint(e1, g_s1);

  gr.dsigma1.assign(n * n, 0.0);
  gr.dsigma2.assign(n * n, 0.0);
  symmetrize(g_sigma2, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double id = i == j ? 1.0 : 0.0;
      gr.dsigma1[i * n + j] = id - 2.0 * g_sigma1[i * n + j];
      gr.dsigma2[i * n + j] = id - 2.0 * g_sigma2[i * n + j];
    }
  return out;
}

DistanceEval wasserstein_eval(const RegionGaussian& g1, const RegionGaussian& g2,
                              bool want_grad) {
  require_compatible(g1, g2);
  if (precedes(g2, g1)) return swapped(wasserstein_eval(g2, g1, want_grad));
  if (g1.mu == g2.mu && g1.sigma == g2.sigma) {
    DistanceEval zero;
    if (want_grad) {
      zero.grad.dmu1.assign(g1.mu.size(), 0.0);
      zero.grad.dmu2 = zero.grad.dmu1;
      zero.grad.dsigma1.assign(g1.sigma.size(), 0.0);
      zero.grad.dsigma2 = zero.grad.dsigma1;
    }
    return zero;
  }
  return g1.mode == CovMode::diag ? wasserstein_diag(g1, g2, want_grad)
                                  : wasserstein_full(g1, g2, want_grad);
}

struct Inverse {
  Matrix inv;
  double logdet = 0.0;
};

Inverse spd_inverse(const RegionGaussian& g) {
  const std::size_t n = g.dim();
  const SpdEigen e = symmetric_eigen(g.sigma, n);
  std::vector<double> f(n);
  Inverse r;
  for (std::size_t k = 0; k < n; ++k) {
    if (!(e.eigenvalues[k] > 0.0))
      throw NumericError("singular covariance in KL divergence");
    f[k] = 1.0 / e.eigenvalues[k];
    r.logdet += std::log(e.eigenvalues[k]);
  }
  r.inv = spectral(e, f);
  return r;
}

DistanceEval kl_eval(const RegionGaussian& g1, const RegionGaussian& g2,
                     bool want_grad) {
  require_compatible(g1, g2);
  const std::size_t n = g1.dim();
  DistanceEval out;
  auto& gr = out.grad;
  if (g1.mode == CovMode::diag) {
    double kl = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!(g1.sigma[i] > 0.0) || !(g2.sigma[i] > 0.0))
        throw NumericError("singular covariance in KL divergence");
      const double d = g2.mu[i] - g1.mu[i];
      kl += g1.sigma[i] / g2.sigma[i] + d * d / g2.sigma[i] - 1.0 +
            std::log(g2.sigma[i]) - std::log(g1.sigma[i]);
    }
    out.value = std::max(0.5 * kl, 0.0);
    if (!want_grad) return out;
    gr.dmu1.resize(n);
    gr.dmu2.resize(n);
    gr.dsigma1.resize(n);
    gr.dsigma2.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = g2.mu[i] - g1.mu[i];
      gr.dmu1[i] = -d / g2.sigma[i];
      gr.dmu2[i] = d / g2.sigma[i];
      gr.dsigma1[i] = 0.5 * (1.0 / g2.sigma[i] - 1.0 / g1.sigma[i]);
      gr.dsigma2[i] = 0.5 * (1.0 / g2.sigma[i] -
                             (g1.sigma[i] + d * d) / (g2.sigma[i] * g2.sigma[i]));
    }
    return out;
  }

  const Inverse i1 = spd_inverse(g1);
  const Inverse i2 = spd_inverse(g2);
  std::vector<double> delta(n), w(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) delta[i] = g2.mu[i] - g1.mu[i];
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) w[i] += i2.inv[i * n + j] * delta[j];
  double tr = 0.0, quad = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    quad += delta[i] * w[i];
    for (std::size_t j = 0; j < n; ++j) tr += i2.inv[i * n + j] * g1.sigma[j * n + i];
  }
  out.value = std::max(
      0.5 * (tr + quad - static_cast<double>(n) + i2.logdet - i1.logdet), 0.0);
  if (!want_grad) return out;
  gr.dmu1.resize(n);
  gr.dmu2.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    gr.dmu1[i] = -w[i];
    gr.dmu2[i] = w[i];
  }
  // dSigma2 = 0.5 (S2^-1 - S2^-1 (S1 + d d^T) S2^-1)
  Matrix outer = g1.sigma;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) outer[i * n + j] += delta[i] * delta[j];
  const Matrix sandwich = matmul(matmul(i2.inv, outer, n), i2.inv, n);
  gr.dsigma1.resize(n * n);
  gr.dsigma2.resize(n * n);
  for (std::size_t k = 0; k < n * n; ++k) {
    gr.dsigma1[k] = 0.5 * (i2.inv[k] - i1.inv[k]);
    gr.dsigma2[k] = 0.5 * (i2.inv[k] - sandwich[k]);
  }
  symmetrize(gr.dsigma2, n);
  return out;
}

DistanceEval jeffreys_eval(const RegionGaussian& g1, const RegionGaussian& g2,
                           bool want_grad) {
  const DistanceEval a = kl_eval(g1, g2, want_grad);
  const DistanceEval b = kl_eval(g2, g1, want_grad);
  DistanceEval out;
  out.value = 0.5 * (a.value + b.value);
  if (!want_grad) return out;
  auto mix = [](const std::vector<double>& x, const std::vector<double>& y) {
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) r[i] = 0.5 * (x[i] + y[i]);
    return r;
  };
  out.grad.dmu1 = mix(a.grad.dmu1, b.grad.dmu2);
  out.grad.dmu2 = mix(a.grad.dmu2, b.grad.dmu1);
  out.grad.dsigma1 = mix(a.grad.dsigma1, b.grad.dsigma2);
  out.grad.dsigma2 = mix(a.grad.dsigma2, b.grad.dsigma1);
  return out;
}

}  // namespace

Matrix matmul(std::span<const double> a, std::span<const double> b,
              std::size_t n) {
  Matrix c(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = a[i * n + k];
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += aik * b[k * n + j];
    }
  return c;
}

SpdEigen symmetric_eigen(std::span<const double> input, std::size_t n) {
  if (input.size() != n * n)
    throw ShapeError("symmetric_eigen: expected " + std::to_string(n * n) +
                     " entries, got " + std::to_string(input.size()));
  double norm2 = 0.0;
  for (double v : input) norm2 += v * v;
  const double norm = std::sqrt(norm2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(input[i * n + j] - input[j * n + i]) > 1e-9 * std::max(1.0, norm))
        throw DomainError("symmetric_eigen: asymmetric input at (" +
                          std::to_string(i) + "," + std::to_string(j) + ")");

  Matrix a(input.begin(), input.end());
  symmetrize(a, n);
  Matrix v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;

  SpdEigen e;
  e.n = n;
  // Sweeps stop once every off-diagonal entry is negligible next to both of
  // its diagonal entries, which is stricter than 1e-12 * ||A||_F and keeps
  // small eigenvalues (and their square roots) accurate to rounding.
  const double tol = 1e-12 * norm;
  for (e.sweeps = 0; e.sweeps < 50; ++e.sweeps) {
    bool rotated = false;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (apq == 0.0) continue;
        const double g = 100.0 * std::abs(apq);
        if (std::abs(a[p * n + p]) + g == std::abs(a[p * n + p]) &&
            std::abs(a[q * n + q]) + g == std::abs(a[q * n + q]) && std::abs(apq) <= tol) {
          a[p * n + q] = 0.0;
          a[q * n + p] = 0.0;
          continue;
        }
        rotated = true;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        a[p * n + q] = 0.0;
        a[q * n + p] = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
    if (!rotated) break;
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return a[x * n + x] < a[y * n + y];
  });
  e.eigenvalues.resize(n);
  e.eigenvectors.assign(n * n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t src = order[k];
    double lambda = a[src * n + src];
    if (lambda < 0.0) {
      lambda = 0.0;
      ++e.clamped;
    }
    e.eigenvalues[k] = lambda;
    // Sign convention: the largest-magnitude component is positive.
    std::size_t big = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (std::abs(v[i * n + src]) > std::abs(v[big * n + src])) big = i;
    const double sign = v[big * n + src] < 0.0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < n; ++i) e.eigenvectors[i * n + k] = sign * v[i * n + src];
  }
  if (e.clamped) g_clamp_warnings += e.clamped;
  return e;
}

std::size_t clamp_warning_count() { return g_clamp_warnings.load(); }

Matrix spd_sqrt(std::span<const double> a, std::size_t n) {
  const SpdEigen e = symmetric_eigen(a, n);
  std::vector<double> root(n);
  for (std::size_t k = 0; k < n; ++k) root[k] = std::sqrt(e.eigenvalues[k]);
  return spectral(e, root);
}

double wasserstein_sq(const RegionGaussian& g1, const RegionGaussian& g2) {
  return wasserstein_eval(g1, g2, false).value;
}

DistanceEval wasserstein_sq_grad(const RegionGaussian& g1,
                                 const RegionGaussian& g2) {
  return wasserstein_eval(g1, g2, true);
}

double kl_gauss(const RegionGaussian& g1, const RegionGaussian& g2) {
  return kl_eval(g1, g2, false).value;
}

DistanceEval kl_gauss_grad(const RegionGaussian& g1, const RegionGaussian& g2) {
  return kl_eval(g1, g2, true);
}

double jeffreys(const RegionGaussian& g1, const RegionGaussian& g2) {
  return jeffreys_eval(g1, g2, false).value;
}

DistanceEval jeffreys_grad(const RegionGaussian& g1, const RegionGaussian& g2) {
  return jeffreys_eval(g1, g2, true);
}

}  // namespace rdc::gauss
