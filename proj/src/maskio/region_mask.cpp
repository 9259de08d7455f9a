#include <algorithm>
#include <map>
#include <string>
#include <unordered_map>

#include "rdc/errors.hpp"
#include "rdc/maskio.hpp"

namespace rdc::masks {

std::size_t RegionMask::ignore_count() const {
  return static_cast<std::size_t>(
      std::count(ids.begin(), ids.end(), kIgnoreId));
}

RegionMask canonicalize(std::size_t height, std::size_t width,
                        std::span<const std::uint32_t> raw_ids) {
  if (raw_ids.size() != height * width)
    throw ShapeError("region mask: " + std::to_string(raw_ids.size()) +
                     " ids for a " + std::to_string(height) + "x" +
                     std::to_string(width) + " grid");
  RegionMask m;
  m.height = height;
  m.width = width;
  m.ids.resize(raw_ids.size());
  std::unordered_map<std::uint32_t, std::uint32_t> relabel;
  for (std::size_t i = 0; i < raw_ids.size(); ++i) {
    const std::uint32_t raw = raw_ids[i];
    if (raw == kIgnoreId) {
      m.ids[i] = kIgnoreId;
      continue;
    }
    auto [it, fresh] =
        relabel.try_emplace(raw, static_cast<std::uint32_t>(relabel.size()));
    if (fresh) {
      if (it->second >= kIgnoreId)
        throw DomainError("region mask: more than 65534 regions");
      m.regions.emplace_back();
    }
    m.ids[i] = it->second;
    m.regions[it->second].push_back(
        Pixel{static_cast<int>(i / width), static_cast<int>(i % width)});
  }
  return m;
}

RegionMask canonicalize(const RegionMask& mask) {
  return canonicalize(mask.height, mask.width, mask.ids);
}

RegionMask load_region_mask(const std::filesystem::path& path) {
  GrayImage img = load_pgm(path);
  if (img.maxval != 65535)
    throw FormatError(path.string() + ": region mask maxval must be 65535, got " +
                      std::to_string(img.maxval));
  RegionMask m = canonicalize(img.height, img.width, img.pixels);
  if (m.region_count() == 0)
    throw FormatError(path.string() + ": no regions");
  return m;
}

void store_region_mask(const RegionMask& mask,
                       const std::filesystem::path& path) {
  store_pgm(GrayImage{mask.height, mask.width, 65535, mask.ids}, path);
}

RegionMask downsample_mask(const RegionMask& mask, std::size_t fh,
                           std::size_t fw) {
  if (fh == 0 || fw == 0 || fh > mask.height || fw > mask.width ||
      mask.height % fh || mask.width % fw)
    throw ShapeError("downsample_mask: " + std::to_string(mask.height) + "x" +
                     std::to_string(mask.width) +
                     " is not an integer multiple of " + std::to_string(fh) +
                     "x" + std::to_string(fw));
  const std::size_t sy = mask.height / fh, sx = mask.width / fw;
  std::vector<std::uint32_t> out(fh * fw, kIgnoreId);
  std::map<std::uint32_t, std::size_t> counts;
  for (std::size_t by = 0; by < fh; ++by)
    for (std::size_t bx = 0; bx < fw; ++bx) {
      counts.clear();
      for (std::size_t y = by * sy; y < (by + 1) * sy; ++y)
        for (std::size_t x = bx * sx; x < (bx + 1) * sx; ++x) {
          const std::uint32_t id = mask.at(y, x);
          if (id != kIgnoreId) ++counts[id];
        }
      // std::map iterates ascending, so strict > keeps the smallest ID on ties.
      std::size_t best = 0;
      for (const auto& [id, n] : counts)
        if (n > best) {
          best = n;
          out[by * fw + bx] = id;
        }
    }
  return canonicalize(fh, fw, out);
}

RegionMask make_patch_grid(std::size_t h, std::size_t w, std::size_t patch_h,
                           std::size_t patch_w) {
  if (patch_h == 0 || patch_w == 0 || patch_h > h || patch_w > w)
    throw ShapeError("make_patch_grid: patch " + std::to_string(patch_h) + "x" +
                     std::to_string(patch_w) + " does not fit " +
                     std::to_string(h) + "x" + std::to_string(w));
  const std::size_t cols = (w + patch_w - 1) / patch_w;
  std::vector<std::uint32_t> ids(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      ids[y * w + x] = static_cast<std::uint32_t>((y / patch_h) * cols + x / patch_w);
  // Row-major patch numbering coincides with first-appearance order.
  return canonicalize(h, w, ids);
}

}  // namespace rdc::masks
