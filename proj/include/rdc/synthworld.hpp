#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

#include "rdc/maskio.hpp"
#include "rdc/rng.hpp"
#include "rdc/task.hpp"
#include "rdc/tensor.hpp"

namespace rdc::synth {

struct WorldConfig {
  std::size_t height = 48;
  std::size_t width = 64;
  std::size_t num_classes = 5;
  std::size_t min_shapes = 3;
  std::size_t max_shapes = 6;
  double noise_sigma = 0.05;
  // Every shape and the background keep at least this many visible pixels,
  // so each survives a 2x downsampling with several cells.
  std::size_t min_visible_pixels = 24;

  // Throws ConfigError on odd extents, fewer than 2 classes, or a bad shape range.
  void validate() const;
};

enum class ShapeKind { rectangle, ellipse };

// depth(row, col) = a * x + b * y + c with x = (col + 0.5) / W, y = (row + 0.5) / H.
struct Plane {
  double a = 0.0, b = 0.0, c = 0.5;
};

struct ShapeSpec {
  ShapeKind kind = ShapeKind::rectangle;
  double center_row = 0.0, center_col = 0.0;
  double half_h = 1.0, half_w = 1.0;  // half extents or radii
  std::uint32_t class_id = 1;
  Plane plane;

  bool contains(std::size_t row, std::size_t col) const;
};

struct Scene {
  std::size_t height = 0, width = 0;
  Tensor image;                      // [3 x H x W] in [0, 1]
  std::vector<std::uint32_t> seg;    // H * W class ids, background 0
  Tensor depth;                      // [1 x H x W] in [0, 1], float-representable
  Tensor normals;                    // [3 x H x W] unit length
  masks::RegionMask regions;         // background plus one region per visible shape
  TaskSet labeled = kAllTaskBits;
  Plane background;
  std::vector<ShapeSpec> shapes;     // drawing order; not serialized
};

// Shapes painted back to front over a planar background. Deterministic in
// (cfg, rng state).
Scene generate_scene(const WorldConfig& cfg, Rng& rng);

// Scene i draws from Rng(derive_seed(seed, i)).
std::vector<Scene> generate_scenes(const WorldConfig& cfg, std::size_t count,
                                   std::uint64_t seed);

enum class LabelSetting { onelabel, random, full };
std::string_view setting_name(LabelSetting s);
LabelSetting parse_setting(std::string_view name);

// onelabel: one uniform task; random: P uniform in [1, K-1], then a uniform
// P-subset; full: every task. Scene i draws from its own derived stream.
void assign_labels(std::vector<Scene>& scenes, LabelSetting setting, std::size_t num_tasks,
                   std::uint64_t seed);

struct DatasetInfo {
  std::size_t count = 0;
  std::size_t height = 0, width = 0, num_classes = 0;
};

std::string scene_dir_name(std::size_t index);

// <dir>/manifest.txt plus one scene_NNNNN directory per scene.
void write_dataset(const std::vector<Scene>& scenes, std::size_t num_classes,
                   const std::filesystem::path& dir);
DatasetInfo read_manifest(const std::filesystem::path& dir);
Scene read_scene(const std::filesystem::path& dir, std::size_t index, const DatasetInfo& info);
std::vector<Scene> read_dataset(const std::filesystem::path& dir);

}  // namespace rdc::synth
