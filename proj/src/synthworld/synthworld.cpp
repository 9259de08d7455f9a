#include "rdc/synthworld.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "rdc/errors.hpp"

namespace rdc::synth {
namespace {

using Vec3 = std::array<double, 3>;

Vec3 normalize3(const Vec3& v) {
  const double len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  return {v[0] / len, v[1] / len, v[2] / len};
}

// A unit normal whose float32 image renormalizes back to itself, so storing
// it in a PFM and renormalizing on load is lossless.
Vec3 storable_normal(const Plane& p) {
  Vec3 n = normalize3({-p.a, -p.b, 1.0});
  for (int it = 0; it < 16; ++it) {
    const Vec3 m = normalize3({double(float(n[0])), double(float(n[1])), double(float(n[2]))});
    if (float(m[0]) == float(n[0]) && float(m[1]) == float(n[1]) && float(m[2]) == float(n[2]))
      return m;
    n = m;
  }
  return n;
}

double norm_x(std::size_t col, std::size_t w) { return (double(col) + 0.5) / double(w); }
double norm_y(std::size_t row, std::size_t h) { return (double(row) + 0.5) / double(h); }

double plane_depth(const Plane& p, std::size_t row, std::size_t col, std::size_t h,
                   std::size_t w) {
  const double d = p.a * norm_x(col, w) + p.b * norm_y(row, h) + p.c;
  return static_cast<double>(static_cast<float>(std::clamp(d, 0.0, 1.0)));
}

// Plane over the pixel box [r0, r1] x [c0, c1] whose depth stays in [0, 1].
Plane draw_plane(Rng& rng, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1,
                 std::size_t h, std::size_t w) {
  for (int attempt = 0; attempt < 100; ++attempt) {
    Plane p;
    p.a = rng.uniform(-0.5, 0.5);
    p.b = rng.uniform(-0.5, 0.5);
    double lo = INFINITY, hi = -INFINITY;
    for (std::size_t r : {r0, r1})
      for (std::size_t c : {c0, c1}) {
        const double v = p.a * norm_x(c, w) + p.b * norm_y(r, h);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    if (-lo <= 1.0 - hi) {
      p.c = rng.uniform(-lo, 1.0 - hi);
      return p;
    }
  }
  return Plane{0.0, 0.0, 0.5};
}

Vec3 class_color(std::uint32_t cls, std::size_t num_classes) {
  // Evenly spaced hues at fixed saturation and value.
  const double h = 6.0 * double(cls) / double(num_classes);
  const double s = 0.65, v = 0.85;
  const int sector = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

const Vec3 kLight = normalize3({0.3, -0.4, 0.85});

Scene draw_scene(const WorldConfig& cfg, Rng& rng, bool& ok) {
  const std::size_t h = cfg.height, w = cfg.width, plane = h * w;
  Scene s;
  s.height = h;
  s.width = w;
  s.background = draw_plane(rng, 0, h - 1, 0, w - 1, h, w);

  const auto n_shapes = static_cast<std::size_t>(
      rng.uniform_int(static_cast<std::int64_t>(cfg.min_shapes),
                      static_cast<std::int64_t>(cfg.max_shapes)));
  const double hh_lo = double(h) / 16.0, hh_hi = double(h) / 5.0;
  const double hw_lo = double(w) / 16.0, hw_hi = double(w) / 5.0;
  for (std::size_t k = 0; k < n_shapes; ++k) {
    ShapeSpec sh;
    sh.kind = rng.uniform() < 0.5 ? ShapeKind::rectangle : ShapeKind::ellipse;
    sh.center_row = rng.uniform(0.0, double(h));
    sh.center_col = rng.uniform(0.0, double(w));
    sh.half_h = rng.uniform(hh_lo, hh_hi);
    sh.half_w = rng.uniform(hw_lo, hw_hi);
    sh.class_id = static_cast<std::uint32_t>(
        rng.uniform_int(1, static_cast<std::int64_t>(cfg.num_classes) - 1));
    auto clip = [](double v, std::size_t n) {
      return static_cast<std::size_t>(std::clamp(v, 0.0, double(n - 1)));
    };
    sh.plane = draw_plane(rng, clip(sh.center_row - sh.half_h, h), clip(sh.center_row + sh.half_h, h),
                          clip(sh.center_col - sh.half_w, w), clip(sh.center_col + sh.half_w, w),
                          h, w);
    s.shapes.push_back(sh);
  }

  // Painter's order: later shapes overwrite earlier ones.
  std::vector<std::uint32_t> owner(plane, 0);  // 0 = background, k + 1 = shape k
  for (std::size_t k = 0; k < n_shapes; ++k)
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c)
        if (s.shapes[k].contains(r, c)) owner[r * w + c] = static_cast<std::uint32_t>(k + 1);
  std::vector<std::size_t> visible(n_shapes + 1, 0);
  for (std::uint32_t o : owner) ++visible[o];
  ok = std::all_of(visible.begin(), visible.end(),
                   [&](std::size_t v) { return v >= cfg.min_visible_pixels; });

  std::vector<Vec3> normal_of(n_shapes + 1);
  normal_of[0] = storable_normal(s.background);
  for (std::size_t k = 0; k < n_shapes; ++k) normal_of[k + 1] = storable_normal(s.shapes[k].plane);

  s.seg.assign(plane, 0);
  s.depth = Tensor({1, h, w});
  s.normals = Tensor({3, h, w});
  s.image = Tensor({3, h, w});
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t i = r * w + c;
      const std::uint32_t o = owner[i];
      const Plane& pl = o ? s.shapes[o - 1].plane : s.background;
      const std::uint32_t cls = o ? s.shapes[o - 1].class_id : 0;
      const double d = plane_depth(pl, r, c, h, w);
      const Vec3& n = normal_of[o];
      s.seg[i] = cls;
      s.depth.values[i] = d;
      for (std::size_t ch = 0; ch < 3; ++ch) s.normals.values[ch * plane + i] = n[ch];

      const double lambert = std::max(0.0, n[0] * kLight[0] + n[1] * kLight[1] + n[2] * kLight[2]);
      const double shade = (0.5 + 0.5 * lambert) * (1.15 - 0.3 * d);
      const Vec3 base = class_color(cls, cfg.num_classes);
      for (std::size_t ch = 0; ch < 3; ++ch)
        s.image.values[ch * plane + i] =
            std::clamp(base[ch] * shade + cfg.noise_sigma * rng.normal(), 0.0, 1.0);
    }
  s.regions = masks::canonicalize(h, w, owner);
  return s;
}

std::string labels_line(TaskSet labeled) {
  std::string out = "labeled=";
  bool first = true;
  for (Task t : kAllTasks)
    if (labeled & task_bit(t)) {
      if (!first) out += ",";
      out += task_name(t);
      first = false;
    }
  return out + "\n";
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spill(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("short write to " + path.string());
}

TaskSet parse_labels(const std::string& text, const std::filesystem::path& path) {
  std::string line = text.substr(0, text.find('\n'));
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.rfind("labeled=", 0) != 0) throw DataError(path.string() + ": expected 'labeled=...'");
  TaskSet set = 0;
  std::stringstream ss(line.substr(8));
  std::string name;
  while (std::getline(ss, name, ',')) {
    try {
      set |= task_bit(parse_task(name));
    } catch (const ConfigError& e) {
      throw DataError(path.string() + ": " + e.what());
    }
  }
  if (set == 0) throw DataError(path.string() + ": no labeled task");
  return set;
}

}  // namespace

void WorldConfig::validate() const {
  if (height == 0 || width == 0 || height % 2 || width % 2)
    throw ConfigError("world extents must be positive and even, got " +
                      std::to_string(height) + "x" + std::to_string(width));
  if (num_classes < 2 || num_classes > 255)
    throw ConfigError("world needs between 2 and 255 classes");
  if (min_shapes > max_shapes)
    throw ConfigError("min_shapes exceeds max_shapes");
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
}

bool ShapeSpec::contains(std::size_t row, std::size_t col) const {
  const double dy = (double(row) + 0.5 - center_row) / half_h;
  const double dx = (double(col) + 0.5 - center_col) / half_w;
  if (kind == ShapeKind::rectangle) return std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
  return dy * dy + dx * dx <= 1.0;
}

Scene generate_scene(const WorldConfig& cfg, Rng& rng) {
  cfg.validate();
  for (int attempt = 0; attempt < 1000; ++attempt) {
    bool ok = false;
    Scene s = draw_scene(cfg, rng, ok);
    if (ok) return s;
  }
  throw ConfigError("could not place shapes with the required visibility; "
                    "lower min_visible_pixels or enlarge the world");
}

std::vector<Scene> generate_scenes(const WorldConfig& cfg, std::size_t count,
                                   std::uint64_t seed) {
  std::vector<Scene> scenes;
  scenes.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, i));
    scenes.push_back(generate_scene(cfg, rng));
  }
  return scenes;
}

std::string_view setting_name(LabelSetting s) {
  switch (s) {
    case LabelSetting::onelabel: return "onelabel";
    case LabelSetting::random: return "random";
    case LabelSetting::full: return "full";
  }
  return "?";
}

LabelSetting parse_setting(std::string_view name) {
  for (LabelSetting s : {LabelSetting::onelabel, LabelSetting::random, LabelSetting::full})
    if (setting_name(s) == name) return s;
  throw ConfigError("unknown setting '" + std::string(name) +
                    "' (valid: onelabel, random, full)");
}

void assign_labels(std::vector<Scene>& scenes, LabelSetting setting, std::size_t num_tasks,
                   std::uint64_t seed) {
  if (num_tasks < 2 || num_tasks > 32) throw ConfigError("assign_labels: need 2..32 tasks");
  const std::uint64_t base = derive_seed(seed, "labels");
  const auto k = static_cast<std::int64_t>(num_tasks);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    Rng rng(derive_seed(base, i));
    TaskSet set = 0;
    switch (setting) {
      case LabelSetting::onelabel:
        set = TaskSet{1} << rng.uniform_int(0, k - 1);
        break;
      case LabelSetting::random: {
        const auto p = static_cast<std::size_t>(rng.uniform_int(1, k - 1));
        std::vector<std::size_t> order(num_tasks);
        for (std::size_t t = 0; t < num_tasks; ++t) order[t] = t;
        for (std::size_t t = 0; t < p; ++t)
          std::swap(order[t], order[static_cast<std::size_t>(
                                  rng.uniform_int(static_cast<std::int64_t>(t), k - 1))]);
        for (std::size_t t = 0; t < p; ++t) set |= TaskSet{1} << order[t];
        break;
      }
      case LabelSetting::full:
        set = num_tasks == 32 ? ~TaskSet{0} : (TaskSet{1} << num_tasks) - 1;
        break;
    }
    scenes[i].labeled = set;
  }
}

std::string scene_dir_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%05zu", index);
  return buf;
}

void write_dataset(const std::vector<Scene>& scenes, std::size_t num_classes,
                   const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::size_t h = scenes.empty() ? 0 : scenes.front().height;
  const std::size_t w = scenes.empty() ? 0 : scenes.front().width;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Scene& s = scenes[i];
    if (s.height != h || s.width != w) throw ShapeError("write_dataset: scenes differ in extent");
    const auto sd = dir / scene_dir_name(i);
    std::filesystem::create_directories(sd);
    masks::store_image_ppm(s.image, sd / "image.ppm");
    masks::GrayImage seg{h, w, 255, s.seg};
    masks::store_pgm(seg, sd / "seg.pgm");
    masks::store_region_mask(s.regions, sd / "regions.pgm");
    masks::store_scalar_pfm(s.depth, sd / "depth.pfm");
    masks::store_vec3_pfm(s.normals, sd / "normals.pfm");
    spill(sd / "labels.txt", labels_line(s.labeled));
  }
  spill(dir / "manifest.txt", "count=" + std::to_string(scenes.size()) +
                                  "\nheight=" + std::to_string(h) +
                                  "\nwidth=" + std::to_string(w) +
                                  "\nclasses=" + std::to_string(num_classes) + "\n");
}

DatasetInfo read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.txt";
  std::stringstream ss(slurp(path));
  DatasetInfo info;
  bool seen[4] = {false, false, false, false};
  std::string line;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError(path.string() + ": bad line '" + line + "'");
    const std::string key = line.substr(0, eq);
    std::size_t value = 0;
    try {
      std::size_t used = 0;
      value = std::stoull(line.substr(eq + 1), &used);
      if (used != line.size() - eq - 1) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw DataError(path.string() + ": bad value in '" + line + "'");
    }
    const char* keys[4] = {"count", "height", "width", "classes"};
    std::size_t* slots[4] = {&info.count, &info.height, &info.width, &info.num_classes};
    bool known = false;
    for (int k = 0; k < 4; ++k)
      if (key == keys[k]) {
        *slots[k] = value;
        seen[k] = known = true;
      }
    if (!known) throw DataError(path.string() + ": unknown key '" + key + "'");
  }
  if (!seen[0]) throw DataError(path.string() + ": missing count");
  if (info.count > 0 && (!seen[1] || !seen[2] || !seen[3] || info.height == 0 || info.width == 0 ||
                         info.num_classes < 2))
    throw DataError(path.string() + ": incomplete extents or class count");
  return info;
}

Scene read_scene(const std::filesystem::path& dir, std::size_t index, const DatasetInfo& info) {
  const auto sd = dir / scene_dir_name(index);
  const std::size_t h = info.height, w = info.width, plane = h * w;
  auto check_extent = [&](std::size_t gh, std::size_t gw, const char* file) {
    if (gh != h || gw != w)
      throw DataError((sd / file).string() + ": extent " + std::to_string(gh) + "x" +
                      std::to_string(gw) + " does not match manifest " + std::to_string(h) +
                      "x" + std::to_string(w));
  };
  Scene s;
  s.height = h;
  s.width = w;
  s.image = masks::load_image_ppm(sd / "image.ppm");
  check_extent(s.image.dim(1), s.image.dim(2), "image.ppm");

  const masks::GrayImage seg = masks::load_pgm(sd / "seg.pgm");
  check_extent(seg.height, seg.width, "seg.pgm");
  for (std::uint32_t v : seg.pixels)
    if (v >= info.num_classes && v != kSegIgnore)
      throw DataError((sd / "seg.pgm").string() + ": class " + std::to_string(v) +
                      " outside the manifest's " + std::to_string(info.num_classes));
  s.seg = seg.pixels;

  s.regions = masks::load_region_mask(sd / "regions.pgm");
  check_extent(s.regions.height, s.regions.width, "regions.pgm");
  s.depth = masks::load_scalar_pfm(sd / "depth.pfm");
  check_extent(s.depth.dim(1), s.depth.dim(2), "depth.pfm");
  s.normals = masks::load_vec3_pfm(sd / "normals.pfm");
  check_extent(s.normals.dim(1), s.normals.dim(2), "normals.pfm");
  for (std::size_t i = 0; i < plane; ++i) {
    const Vec3 n = normalize3({s.normals.values[i], s.normals.values[plane + i],
                               s.normals.values[2 * plane + i]});
    if (!std::isfinite(n[0] + n[1] + n[2]))
      throw DataError((sd / "normals.pfm").string() + ": zero-length normal at pixel " +
                      std::to_string(i));
    for (std::size_t c = 0; c < 3; ++c) s.normals.values[c * plane + i] = n[c];
  }
  s.labeled = parse_labels(slurp(sd / "labels.txt"), sd / "labels.txt");
  return s;
}

std::vector<Scene> read_dataset(const std::filesystem::path& dir) {
  const DatasetInfo info = read_manifest(dir);
  std::vector<Scene> scenes;
  scenes.reserve(info.count);
  for (std::size_t i = 0; i < info.count; ++i) scenes.push_back(read_scene(dir, i, info));
  return scenes;
}

}  // namespace rdc::synth
