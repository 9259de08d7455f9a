#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "rdc/errors.hpp"
#include "rdc/harness.hpp"

namespace rdc::harness {
namespace {

std::string trim(std::string_view s) {
  const auto ws = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; };
  while (!s.empty() && ws(s.front())) s.remove_prefix(1);
  while (!s.empty() && ws(s.back())) s.remove_suffix(1);
  return std::string(s);
}

template <typename E, std::size_t N>
E parse_enum(const std::string& key, const std::string& value,
             const std::array<std::pair<const char*, E>, N>& table) {
  for (const auto& [name, e] : table)
    if (value == name) return e;
  std::string valid;
  for (const auto& [name, e] : table) valid += (valid.empty() ? "" : ", ") + std::string(name);
  throw ConfigError(key + ": '" + value + "' is not one of {" + valid + "}");
}

constexpr std::array<std::pair<const char*, synth::LabelSetting>, 3> kSettings{{
    {"onelabel", synth::LabelSetting::onelabel},
    {"random", synth::LabelSetting::random},
    {"full", synth::LabelSetting::full},
}};
constexpr std::array<std::pair<const char*, contrast::Strategy>, 3> kStrategies{{
    {"gaussian", contrast::Strategy::gaussian},
    {"vector", contrast::Strategy::vector},
    {"pixel", contrast::Strategy::pixel},
}};
constexpr std::array<std::pair<const char*, Extraction>, 2> kExtractions{{
    {"region", Extraction::region},
    {"patch", Extraction::patch},
}};
constexpr std::array<std::pair<const char*, contrast::Distance>, 3> kDistances{{
    {"wasserstein", contrast::Distance::wasserstein},
    {"jeffreys", contrast::Distance::jeffreys},
    {"kl", contrast::Distance::kl},
}};
constexpr std::array<std::pair<const char*, regions::CovMode>, 2> kCovModes{{
    {"diag", regions::CovMode::diag},
    {"full", regions::CovMode::full},
}};

template <typename E, std::size_t N>
std::string enum_name(E e, const std::array<std::pair<const char*, E>, N>& table) {
  for (const auto& [name, v] : table)
    if (v == e) return name;
  return "?";
}

double parse_double(const std::string& key, const std::string& value) {
  double v = 0.0;
  const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || p != value.data() + value.size() || !std::isfinite(v))
    throw ConfigError(key + ": '" + value + "' is not a finite number");
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || p != value.data() + value.size())
    throw ConfigError(key + ": '" + value + "' is not a non-negative integer");
  return v;
}

std::string format_double(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

}  // namespace

std::string extraction_name(Extraction e) { return enum_name(e, kExtractions); }
std::string strategy_name(contrast::Strategy s) { return enum_name(s, kStrategies); }
std::string distance_name(contrast::Distance d) { return enum_name(d, kDistances); }
std::string cov_mode_name(regions::CovMode m) { return enum_name(m, kCovModes); }

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "data_dir", "setting", "strategy", "extraction", "patch",    "distance",
      "cov_mode", "tau",     "eps",      "lambda_rc",  "epochs",   "batch",
      "lr",       "seed",    "out_dir",  "max_neg_pixels", "threads"};
  return keys;
}

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& raw) {
  const std::string value = trim(raw);
  if (key == "data_dir") {
    cfg.data_dir = value;
  } else if (key == "out_dir") {
    cfg.out_dir = value;
  } else if (key == "setting") {
    cfg.setting = parse_enum(key, value, kSettings);
  } else if (key == "strategy") {
    cfg.strategy = parse_enum(key, value, kStrategies);
  } else if (key == "extraction") {
    cfg.extraction = parse_enum(key, value, kExtractions);
  } else if (key == "distance") {
    cfg.distance = parse_enum(key, value, kDistances);
  } else if (key == "cov_mode") {
    cfg.cov_mode = parse_enum(key, value, kCovModes);
  } else if (key == "patch") {
    // "HxW" or a single side length.
    const auto x = value.find('x');
    if (x == std::string::npos) {
      cfg.patch_h = cfg.patch_w = parse_u64(key, value);
    } else {
      cfg.patch_h = parse_u64(key, value.substr(0, x));
      cfg.patch_w = parse_u64(key, value.substr(x + 1));
    }
  } else if (key == "tau") {
    cfg.tau = parse_double(key, value);
  } else if (key == "eps") {
    cfg.eps = parse_double(key, value);
  } else if (key == "lambda_rc") {
    cfg.lambda_rc = parse_double(key, value);
  } else if (key == "lr") {
    cfg.lr = parse_double(key, value);
  } else if (key == "epochs") {
    cfg.epochs = parse_u64(key, value);
  } else if (key == "batch") {
    cfg.batch = parse_u64(key, value);
  } else if (key == "seed") {
    cfg.seed = parse_u64(key, value);
  } else if (key == "max_neg_pixels") {
    cfg.max_neg_pixels = parse_u64(key, value);
  } else if (key == "threads") {
    cfg.threads = parse_u64(key, value);
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

void RunConfig::validate() const {
  if (data_dir.empty()) throw ConfigError("data_dir is required");
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  if (!(eps > 0.0)) throw ConfigError("eps must be positive");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(lambda_rc >= 0.0)) throw ConfigError("lambda_rc must be non-negative");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch == 0) throw ConfigError("batch must be positive");
  if (patch_h == 0 || patch_w == 0) throw ConfigError("patch sides must be positive");
  if (max_neg_pixels == 0) throw ConfigError("max_neg_pixels must be positive");
  if (threads == 0) throw ConfigError("threads must be positive");
}

std::map<std::string, std::string> read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t lineno = 0;
  const auto& keys = config_keys();
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 && line.starts_with("\xEF\xBB\xBF")) line.erase(0, 3);
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    if (std::find(keys.begin(), keys.end(), key) == keys.end())
      throw ConfigError(where + ": unknown config key '" + key + "'");
    if (!out.emplace(key, value).second)
      throw ConfigError(where + ": duplicate key '" + key + "'");
  }
  return out;
}

RunConfig resolve_config(const std::map<std::string, std::string>& file_values,
                         const std::map<std::string, std::string>& overrides) {
  RunConfig cfg;
  for (const auto& [k, v] : file_values) apply_setting(cfg, k, v);
  for (const auto& [k, v] : overrides) apply_setting(cfg, k, v);
  cfg.validate();
  return cfg;
}

std::string format_config(const RunConfig& cfg) {
  std::ostringstream os;
  os << "data_dir = " << cfg.data_dir.string() << "\n"
     << "setting = " << synth::setting_name(cfg.setting) << "\n"
     << "strategy = " << strategy_name(cfg.strategy) << "\n"
     << "extraction = " << extraction_name(cfg.extraction) << "\n"
     << "patch = " << cfg.patch_h << "x" << cfg.patch_w << "\n"
     << "distance = " << distance_name(cfg.distance) << "\n"
     << "cov_mode = " << cov_mode_name(cfg.cov_mode) << "\n"
     << "tau = " << format_double(cfg.tau) << "\n"
     << "eps = " << format_double(cfg.eps) << "\n"
     << "lambda_rc = " << format_double(cfg.lambda_rc) << "\n"
     << "epochs = " << cfg.epochs << "\n"
     << "batch = " << cfg.batch << "\n"
     << "lr = " << format_double(cfg.lr) << "\n"
     << "seed = " << cfg.seed << "\n"
     << "out_dir = " << cfg.out_dir.string() << "\n"
     << "max_neg_pixels = " << cfg.max_neg_pixels << "\n"
     << "threads = " << cfg.threads << "\n";
  return os.str();
}

contrast::ContrastConfig contrast_config(const RunConfig& cfg, std::uint64_t pixel_seed) {
  contrast::ContrastConfig c;
  c.tau = cfg.tau;
  c.strategy = cfg.strategy;
  c.distance = cfg.distance;
  c.cov_mode = cfg.cov_mode;
  c.eps = cfg.eps;
  c.max_neg_pixels = cfg.max_neg_pixels;
  c.seed = pixel_seed;
  return c;
}

}  // namespace rdc::harness
