#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "rdc/maskio.hpp"
#include "rdc/tensor.hpp"

namespace rdc::regions {

using masks::Pixel;

// Regions with fewer feature cells than this are left out of the contrast.
inline constexpr std::size_t kMinRegionCells = 4;
inline constexpr double kDefaultCovEps = 1e-5;

enum class CovMode { full, diag };

// N(mu, sigma) fitted to one region of a [C x H x W] feature map. `sigma` is
// C*C row-major in full mode and the C diagonal variances in diag mode; both
// already include `eps`.
struct RegionGaussian {
  std::uint32_t region_id = 0;
  std::size_t n = 0;
  std::vector<double> mu;
  std::vector<double> sigma;
  CovMode mode = CovMode::diag;
  double eps = 0.0;

  std::size_t dim() const { return mu.size(); }
};

struct RegionVector {
  std::uint32_t region_id = 0;
  std::vector<double> v;
};

// View of a region's pixel features; no feature data is copied.
struct RegionPixels {
  std::uint32_t region_id = 0;
  const Tensor* fmap = nullptr;
  std::vector<Pixel> coords;

  std::size_t size() const { return coords.size(); }
  std::size_t channels() const { return fmap->dim(0); }
  double feature(std::size_t i, std::size_t c) const {
    return fmap->values[(c * fmap->dim(1) + coords[i].row) * fmap->dim(2) +
                        coords[i].col];
  }
};

// Population mean and covariance (1/n) plus eps on the diagonal. Pixels are
// accumulated in row-major order regardless of the order given. Throws
// RegionTooSmall when fewer than max(1, min_cells) pixels are given.
RegionGaussian fit_region_gaussian(const Tensor& fmap,
                                   std::span<const Pixel> pixels, CovMode mode,
                                   double eps, std::size_t min_cells = 1,
                                   std::uint32_t region_id = 0);

// Accumulates dL/dfmap given dL/dmu and dL/dsigma (a symmetric gradient in
// full mode: dL = tr(dsigma * d(sigma))).
void fit_region_gaussian_backward(const Tensor& fmap,
                                  std::span<const Pixel> pixels,
                                  const RegionGaussian& g,
                                  std::span<const double> dmu,
                                  std::span<const double> dsigma,
                                  std::span<double> dfmap);

struct RegionFits {
  std::vector<RegionGaussian> gaussians;  // ordered by region_id
  std::vector<std::uint32_t> skipped;     // too small
};

RegionFits fit_all_regions(const Tensor& fmap, const masks::RegionMask& mask,
                           CovMode mode, double eps,
                           std::size_t min_region_cells = kMinRegionCells);

RegionVector region_mean_vector(const Tensor& fmap,
                                std::span<const Pixel> pixels,
                                std::uint32_t region_id = 0);
void region_mean_vector_backward(const Tensor& fmap,
                                 std::span<const Pixel> pixels,
                                 std::span<const double> dv,
                                 std::span<double> dfmap);

RegionPixels region_pixels(const Tensor& fmap, std::span<const Pixel> pixels,
                           std::uint32_t region_id = 0);
// dfeatures is n x C row-major, aligned with `rp.coords`.
void region_pixels_backward(const RegionPixels& rp,
                            std::span<const double> dfeatures,
                            std::span<double> dfmap);

}  // namespace rdc::regions
