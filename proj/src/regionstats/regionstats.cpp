#include "rdc/regionstats.hpp"

#include <algorithm>
#include <string>

#include "rdc/errors.hpp"

namespace rdc::regions {
namespace {

void require_fmap(const Tensor& fmap) {
  if (fmap.rank() != 3)
    throw ShapeError("feature map must be [C x H x W], got " +
                     shape_string(fmap.shape));
}

// Row-major pixel order, copying only when the input is not already sorted.
std::span<const Pixel> sorted_pixels(std::span<const Pixel> pixels,
                                     std::vector<Pixel>& storage) {
  if (std::is_sorted(pixels.begin(), pixels.end())) return pixels;
  storage.assign(pixels.begin(), pixels.end());
  std::sort(storage.begin(), storage.end());
  return storage;
}

std::size_t offset(const Tensor& fmap, std::size_t c, const Pixel& p) {
  return (c * fmap.dim(1) + static_cast<std::size_t>(p.row)) * fmap.dim(2) +
         static_cast<std::size_t>(p.col);
}

void check_pixels(const Tensor& fmap, std::span<const Pixel> pixels) {
  for (const Pixel& p : pixels)
    if (p.row < 0 || p.col < 0 || static_cast<std::size_t>(p.row) >= fmap.dim(1) ||
        static_cast<std::size_t>(p.col) >= fmap.dim(2))
      throw ShapeError("pixel (" + std::to_string(p.row) + "," +
                       std::to_string(p.col) + ") outside feature map " +
                       shape_string(fmap.shape));
}

}  // namespace

RegionGaussian fit_region_gaussian(const Tensor& fmap,
                                   std::span<const Pixel> pixels, CovMode mode,
                                   double eps, std::size_t min_cells,
                                   std::uint32_t region_id) {
  require_fmap(fmap);
  if (pixels.size() < std::max<std::size_t>(1, min_cells))
    throw RegionTooSmall("region " + std::to_string(region_id) + " has " +
                         std::to_string(pixels.size()) + " cells, needs " +
                         std::to_string(std::max<std::size_t>(1, min_cells)));
  check_pixels(fmap, pixels);
  std::vector<Pixel> storage;
  const auto px = sorted_pixels(pixels, storage);
  const std::size_t c_dim = fmap.dim(0);
  const double n = static_cast<double>(px.size());

  RegionGaussian g;
  g.region_id = region_id;
  g.n = px.size();
  g.mode = mode;
  g.eps = eps;
  g.mu.assign(c_dim, 0.0);
  for (std::size_t c = 0; c < c_dim; ++c) {
    double s = 0.0;
    for (const Pixel& p : px) s += fmap.values[offset(fmap, c, p)];
    g.mu[c] = s / n;
  }

  std::vector<double> centered(px.size() * c_dim);
  for (std::size_t i = 0; i < px.size(); ++i)
    for (std::size_t c = 0; c < c_dim; ++c)
      centered[i * c_dim + c] = fmap.values[offset(fmap, c, px[i])] - g.mu[c];

  if (mode == CovMode::diag) {
    g.sigma.assign(c_dim, 0.0);
    for (std::size_t c = 0; c < c_dim; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < px.size(); ++i)
        s += centered[i * c_dim + c] * centered[i * c_dim + c];
      g.sigma[c] = s / n + eps;
    }
  } else {
    g.sigma.assign(c_dim * c_dim, 0.0);
    for (std::size_t a = 0; a < c_dim; ++a)
      for (std::size_t b = a; b < c_dim; ++b) {
        double s = 0.0;
        for (std::size_t i = 0; i < px.size(); ++i)
          s += centered[i * c_dim + a] * centered[i * c_dim + b];
        const double v = s / n + (a == b ? eps : 0.0);
        g.sigma[a * c_dim + b] = v;
        g.sigma[b * c_dim + a] = v;
      }
  }
  return g;
}

void fit_region_gaussian_backward(const Tensor& fmap,
                                  std::span<const Pixel> pixels,
                                  const RegionGaussian& g,
                                  std::span<const double> dmu,
                                  std::span<const double> dsigma,
                                  std::span<double> dfmap) {
  const std::size_t c_dim = g.dim();
  const double inv_n = 1.0 / static_cast<double>(pixels.size());
  std::vector<double> d(c_dim);
  for (const Pixel& p : pixels) {
    // dL/df_p = dmu/n + (2/n) * sym(dsigma) * (f_p - mu)
    for (std::size_t a = 0; a < c_dim; ++a) {
      double acc = dmu[a];
      if (g.mode == CovMode::diag) {
        acc += 2.0 * dsigma[a] * (fmap.values[offset(fmap, a, p)] - g.mu[a]);
      } else {
        for (std::size_t b = 0; b < c_dim; ++b) {
          const double sym = 0.5 * (dsigma[a * c_dim + b] + dsigma[b * c_dim + a]);
          acc += 2.0 * sym * (fmap.values[offset(fmap, b, p)] - g.mu[b]);
        }
      }
      d[a] = acc * inv_n;
    }
    for (std::size_t a = 0; a < c_dim; ++a) dfmap[offset(fmap, a, p)] += d[a];
  }
}

RegionFits fit_all_regions(const Tensor& fmap, const masks::RegionMask& mask,
                           CovMode mode, double eps,
                           std::size_t min_region_cells) {
  require_fmap(fmap);
  if (mask.height != fmap.dim(1) || mask.width != fmap.dim(2))
    throw ShapeError("mask " + std::to_string(mask.height) + "x" +
                     std::to_string(mask.width) + " does not match feature map " +
                     shape_string(fmap.shape));
  RegionFits out;
  for (std::size_t id = 0; id < mask.region_count(); ++id) {
    const auto rid = static_cast<std::uint32_t>(id);
    if (mask.regions[id].size() < std::max<std::size_t>(1, min_region_cells)) {
      out.skipped.push_back(rid);
      continue;
    }
    out.gaussians.push_back(fit_region_gaussian(fmap, mask.regions[id], mode, eps,
                                                min_region_cells, rid));
  }
  return out;
}

RegionVector region_mean_vector(const Tensor& fmap,
                                std::span<const Pixel> pixels,
                                std::uint32_t region_id) {
  require_fmap(fmap);
  if (pixels.empty()) throw RegionTooSmall("region_mean_vector: empty pixel list");
  check_pixels(fmap, pixels);
  std::vector<Pixel> storage;
  const auto px = sorted_pixels(pixels, storage);
  RegionVector rv{region_id, std::vector<double>(fmap.dim(0), 0.0)};
  for (std::size_t c = 0; c < fmap.dim(0); ++c) {
    double s = 0.0;
    for (const Pixel& p : px) s += fmap.values[offset(fmap, c, p)];
    rv.v[c] = s / static_cast<double>(px.size());
  }
  return rv;
}

void region_mean_vector_backward(const Tensor& fmap,
                                 std::span<const Pixel> pixels,
                                 std::span<const double> dv,
                                 std::span<double> dfmap) {
  const double inv_n = 1.0 / static_cast<double>(pixels.size());
  for (const Pixel& p : pixels)
    for (std::size_t c = 0; c < fmap.dim(0); ++c)
      dfmap[offset(fmap, c, p)] += dv[c] * inv_n;
}

RegionPixels region_pixels(const Tensor& fmap, std::span<const Pixel> pixels,
                           std::uint32_t region_id) {
  require_fmap(fmap);
  if (pixels.empty()) throw RegionTooSmall("region_pixels: empty pixel list");
  check_pixels(fmap, pixels);
  return RegionPixels{region_id, &fmap,
                      std::vector<Pixel>(pixels.begin(), pixels.end())};
}

void region_pixels_backward(const RegionPixels& rp,
                            std::span<const double> dfeatures,
                            std::span<double> dfmap) {
  const std::size_t c_dim = rp.channels();
  for (std::size_t i = 0; i < rp.size(); ++i)
    for (std::size_t c = 0; c < c_dim; ++c)
      dfmap[offset(*rp.fmap, c, rp.coords[i])] += dfeatures[i * c_dim + c];
}

}  // namespace rdc::regions
