#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "rdc/tensor.hpp"

namespace rdc::masks {

// Pixel value marking "no region". ID 0 is an ordinary region.
inline constexpr std::uint32_t kIgnoreId = 65535;

struct Pixel {
  int row = 0;
  int col = 0;
  friend auto operator<=>(const Pixel&, const Pixel&) = default;
};

// Grid of region IDs in canonical form: non-ignore IDs are exactly
// {0, ..., M-1}, numbered by first appearance in row-major order, and
// `regions[id]` lists that region's pixels in row-major order.
struct RegionMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint32_t> ids;
  std::vector<std::vector<Pixel>> regions;

  std::size_t region_count() const { return regions.size(); }
  std::uint32_t at(std::size_t row, std::size_t col) const {
    return ids[row * width + col];
  }
  std::size_t ignore_count() const;
};

// Dense relabeling by first appearance; kIgnoreId is preserved.
RegionMask canonicalize(std::size_t height, std::size_t width,
                        std::span<const std::uint32_t> raw_ids);
RegionMask canonicalize(const RegionMask& mask);

// 16-bit binary PGM (P5, maxval 65535, big-endian samples).
RegionMask load_region_mask(const std::filesystem::path& path);
void store_region_mask(const RegionMask& mask,
                       const std::filesystem::path& path);

// Reduces the mask to fh x fw by majority vote per source block, ties to the
// smallest ID, ignore only when the whole block is ignore. The source extents
// must be integer multiples of the target extents.
RegionMask downsample_mask(const RegionMask& mask, std::size_t fh,
                           std::size_t fw);

// Row-major patch tiling; border patches may be smaller.
RegionMask make_patch_grid(std::size_t h, std::size_t w, std::size_t patch_h,
                           std::size_t patch_w);

// Single-channel PGM with arbitrary maxval <= 65535.
struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::uint32_t maxval = 255;
  std::vector<std::uint32_t> pixels;
};
GrayImage load_pgm(const std::filesystem::path& path);
void store_pgm(const GrayImage& image, const std::filesystem::path& path);

// P6, 8-bit. Tensor is [3 x H x W] with values in [0, 1].
Tensor load_image_ppm(const std::filesystem::path& path);
void store_image_ppm(const Tensor& image, const std::filesystem::path& path);

// PFM, little-endian (scale -1.0), rows stored bottom-to-top. Values are
// float32 on disk; tensors are [1 x H x W] and [3 x H x W].
Tensor load_scalar_pfm(const std::filesystem::path& path);
void store_scalar_pfm(const Tensor& map, const std::filesystem::path& path);
Tensor load_vec3_pfm(const std::filesystem::path& path);
void store_vec3_pfm(const Tensor& map, const std::filesystem::path& path);

}  // namespace rdc::masks
