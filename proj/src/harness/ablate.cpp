#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "rdc/errors.hpp"
#include "rdc/harness.hpp"

namespace rdc::harness {
namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> f;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i)
    if (i == line.size() || line[i] == ',') {
      f.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  return f;
}

std::string fmt(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

template <typename T>
T parse_num(const std::string& s, const std::filesystem::path& path) {
  T v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw DataError(path.string() + ": bad numeric field '" + s + "'");
  return v;
}

// Textual value of every config key, as format_config writes it.
std::map<std::string, std::string> config_values(const RunConfig& cfg) {
  std::map<std::string, std::string> out;
  std::istringstream in(format_config(cfg));
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find(" = ");
    out[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return out;
}

// Fields that cannot influence a run are reset to their defaults, so
// equivalent cells share one training run.
RunConfig effective_config(RunConfig cfg) {
  const RunConfig defaults;
  if (!(cfg.lambda_rc > 0.0)) {
    cfg.strategy = defaults.strategy;
    cfg.extraction = defaults.extraction;
    cfg.tau = defaults.tau;
    cfg.max_neg_pixels = defaults.max_neg_pixels;
  }
  if (cfg.extraction != Extraction::patch) {
    cfg.patch_h = defaults.patch_h;
    cfg.patch_w = defaults.patch_w;
  }
  if (cfg.strategy != contrast::Strategy::gaussian || !(cfg.lambda_rc > 0.0)) {
    cfg.distance = defaults.distance;
    cfg.cov_mode = defaults.cov_mode;
    cfg.eps = defaults.eps;
  }
  if (cfg.strategy != contrast::Strategy::pixel) cfg.max_neg_pixels = defaults.max_neg_pixels;
  return cfg;
}

std::string comparable(RunConfig cfg) {
  cfg.threads = 1;
  return format_config(cfg);
}

// A finished run directory whose recorded configuration equals `cfg`.
bool run_complete(const RunConfig& cfg) {
  const auto dir = cfg.out_dir;
  if (!std::filesystem::exists(dir / "checkpoint.rdc") ||
      !std::filesystem::exists(dir / "config.txt"))
    return false;
  try {
    const RunConfig recorded = resolve_config(read_config_file(dir / "config.txt"), {});
    return comparable(recorded) == comparable(cfg);
  } catch (const Error&) {
    return false;
  }
}

std::string join(const std::vector<std::string>& v, char sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? std::string(1, sep) : "") + v[i];
  return out;
}

std::string format_row(const ReportRow& r) {
  const bool run = r.kind == "run";
  std::string s = r.kind;
  for (const auto& v : r.axis_values) s += "," + v;
  s += "," + r.seed + "," + std::to_string(r.runs);
  s += "," + fmt(r.miou) + "," + (run ? "" : fmt(r.miou_std));
  s += "," + fmt(r.aerr) + "," + (run ? "" : fmt(r.aerr_std));
  s += "," + fmt(r.merr) + "," + (run ? "" : fmt(r.merr_std));
  s += "," + fmt(r.loss_sup) + "," + fmt(r.loss_rc) + "," + r.run_dir;
  return s;
}

void write_report(const std::filesystem::path& path, const std::vector<std::string>& keys,
                  const std::vector<ReportRow>& rows) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp);
    out << report_header(keys) << "\n";
    for (const auto& r : rows) out << format_row(r) << "\n";
    if (!out) throw DataError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

Axis parse_axis(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size())
    throw ConfigError("axis '" + spec + "' must look like key=value1,value2");
  Axis axis;
  axis.key = spec.substr(0, eq);
  const auto& keys = config_keys();
  if (std::find(keys.begin(), keys.end(), axis.key) == keys.end())
    throw ConfigError("axis '" + spec + "': unknown config key '" + axis.key + "'");
  if (axis.key == "data_dir" || axis.key == "out_dir" || axis.key == "seed" ||
      axis.key == "threads")
    throw ConfigError("'" + axis.key + "' cannot be an ablation axis");
  for (std::string v : split_csv(spec.substr(eq + 1))) {
    if (v.empty()) throw ConfigError("axis '" + spec + "' has an empty value");
    RunConfig probe;
    apply_setting(probe, axis.key, v);
    if (std::find(axis.values.begin(), axis.values.end(), v) != axis.values.end())
      throw ConfigError("axis '" + spec + "' repeats value '" + v + "'");
    axis.values.push_back(v);
  }
  return axis;
}

std::string report_header(const std::vector<std::string>& axis_keys) {
  std::string h = "kind";
  for (const auto& k : axis_keys) h += "," + k;
  return h + ",seed,runs,miou,miou_std,aerr,aerr_std,merr,merr_std,loss_sup,loss_rc,run_dir";
}

Report read_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty report");
  const auto head = split_csv(line);
  if (head.size() < 12 || head.front() != "kind")
    throw DataError(path.string() + ": not a report header");
  Report rep;
  rep.axis_keys.assign(head.begin() + 1, head.end() - 11);
  if (line != report_header(rep.axis_keys))
    throw DataError(path.string() + ": unexpected report columns");
  const std::size_t na = rep.axis_keys.size();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != head.size())
      throw DataError(path.string() + ": row has " + std::to_string(f.size()) +
                      " fields, expected " + std::to_string(head.size()));
    ReportRow r;
    r.kind = f[0];
    if (r.kind != "run" && r.kind != "summary")
      throw DataError(path.string() + ": unknown row kind '" + r.kind + "'");
    r.axis_values.assign(f.begin() + 1, f.begin() + 1 + static_cast<std::ptrdiff_t>(na));
    std::size_t i = 1 + na;
    r.seed = f[i++];
    r.runs = parse_num<std::size_t>(f[i++], path);
    auto opt = [&](const std::string& s) { return s.empty() ? 0.0 : parse_num<double>(s, path); };
    r.miou = parse_num<double>(f[i++], path);
    r.miou_std = opt(f[i++]);
    r.aerr = parse_num<double>(f[i++], path);
    r.aerr_std = opt(f[i++]);
    r.merr = parse_num<double>(f[i++], path);
    r.merr_std = opt(f[i++]);
    r.loss_sup = parse_num<double>(f[i++], path);
    r.loss_rc = parse_num<double>(f[i++], path);
    r.run_dir = f[i++];
    if (r.kind == "run" && r.seed.empty())
      throw DataError(path.string() + ": run row without a seed");
    rep.rows.push_back(std::move(r));
  }
  return rep;
}

std::vector<ReportRow> summarize_runs(const std::vector<ReportRow>& runs) {
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : runs)
    if (r.kind == "run" &&
        std::find(cells.begin(), cells.end(), r.axis_values) == cells.end())
      cells.push_back(r.axis_values);
  std::vector<ReportRow> out;
  for (const auto& cell : cells) {
    std::vector<double> miou, aerr, merr, sup, rc;
    for (const auto& r : runs)
      if (r.kind == "run" && r.axis_values == cell) {
        miou.push_back(r.miou);
        aerr.push_back(r.aerr);
        merr.push_back(r.merr);
        sup.push_back(r.loss_sup);
        rc.push_back(r.loss_rc);
      }
    ReportRow s;
    s.kind = "summary";
    s.axis_values = cell;
    s.runs = miou.size();
    s.miou = mean_of(miou);
    s.miou_std = sample_std(miou);
    s.aerr = mean_of(aerr);
    s.aerr_std = sample_std(aerr);
    s.merr = mean_of(merr);
    s.merr_std = sample_std(merr);
    s.loss_sup = mean_of(sup);
    s.loss_rc = mean_of(rc);
    out.push_back(std::move(s));
  }
  return out;
}

AblateSummary ablate(const RunConfig& base, const AblateOptions& opts,
                     const AblateProgressFn& progress) {
  base.validate();
  if (opts.seeds.empty()) throw ConfigError("ablate needs at least one seed");
  std::vector<std::string> keys;
  for (const auto& a : opts.axes) {
    if (std::find(keys.begin(), keys.end(), a.key) != keys.end())
      throw ConfigError("axis '" + a.key + "' given twice");
    if (a.values.empty()) throw ConfigError("axis '" + a.key + "' has no values");
    keys.push_back(a.key);
  }

  AblateSummary summary;
  summary.report = opts.report.empty() ? base.out_dir / "report.csv" : opts.report;
  std::error_code ec;
  std::filesystem::create_directories(base.out_dir, ec);
  if (ec) throw DataError("cannot create " + base.out_dir.string() + ": " + ec.message());
  if (summary.report.has_parent_path())
    std::filesystem::create_directories(summary.report.parent_path(), ec);

  std::vector<ReportRow> existing;
  if (std::filesystem::exists(summary.report)) {
    Report old = read_report(summary.report);
    if (old.axis_keys != keys)
      throw DataError(summary.report.string() + " was written for axes {" +
                      join(old.axis_keys, ',') + "}, not {" + join(keys, ',') + "}");
    for (auto& r : old.rows)
      if (r.kind == "run") existing.push_back(std::move(r));
  }

  // Cartesian product, first axis outermost.
  std::vector<std::vector<std::string>> cells{{}};
  for (const auto& a : opts.axes) {
    std::vector<std::vector<std::string>> next;
    for (const auto& c : cells)
      for (const auto& v : a.values) {
        next.push_back(c);
        next.back().push_back(v);
      }
    cells = std::move(next);
  }
  summary.cells = cells.size();
  summary.runs_total = cells.size() * opts.seeds.size();

  std::vector<ReportRow> rows;
  auto find_existing = [&](const std::vector<std::string>& cell, const std::string& seed) {
    return std::find_if(existing.begin(), existing.end(), [&](const ReportRow& r) {
      return r.axis_values == cell && r.seed == seed;
    });
  };
  auto flush = [&](bool final) {
    std::vector<ReportRow> all = rows;
    for (const auto& r : existing)
      if (std::find_if(all.begin(), all.end(), [&](const ReportRow& x) {
            return x.axis_values == r.axis_values && x.seed == r.seed;
          }) == all.end())
        all.push_back(r);
    if (final)
      for (auto& s : summarize_runs(all)) all.push_back(std::move(s));
    write_report(summary.report, keys, all);
  };

  for (const auto& cell : cells) {
    std::string cell_name;
    for (std::size_t i = 0; i < keys.size(); ++i)
      cell_name += (i ? " " : "") + keys[i] + "=" + cell[i];
    for (std::uint64_t seed : opts.seeds) {
      const std::string seed_text = std::to_string(seed);
      if (auto it = find_existing(cell, seed_text); it != existing.end()) {
        rows.push_back(*it);
        ++summary.runs_resumed;
        continue;
      }
      RunConfig cfg = base;
      for (std::size_t i = 0; i < keys.size(); ++i) apply_setting(cfg, keys[i], cell[i]);
      cfg.seed = seed;
      cfg = effective_config(cfg);
      cfg.validate();
      const auto values = config_values(cfg);
      std::string dir_name;
      for (const auto& k : keys) dir_name += k + "-" + values.at(k) + "_";
      dir_name += "seed" + seed_text;
      cfg.out_dir = base.out_dir / "runs" / dir_name;

      if (run_complete(cfg)) {
        ++summary.runs_shared;
      } else {
        train(cfg);
        ++summary.runs_trained;
      }
      const EpochRecord rec = evaluate(cfg.out_dir / "checkpoint.rdc", cfg);
      if (progress) progress(cell_name, seed, rec);

      ReportRow r;
      r.kind = "run";
      r.axis_values = cell;
      r.seed = seed_text;
      r.miou = rec.miou;
      r.aerr = rec.aerr;
      r.merr = rec.merr;
      r.loss_sup = rec.loss_sup;
      r.loss_rc = rec.loss_rc;
      r.run_dir = std::filesystem::relative(cfg.out_dir, base.out_dir).generic_string();
      rows.push_back(std::move(r));
      flush(false);
    }
  }
  flush(true);
  return summary;
}

std::string summarize_report(const Report& report) {
  const std::vector<ReportRow> cells = summarize_runs(report.rows);
  std::ostringstream os;
  os << std::fixed;
  std::vector<std::size_t> width;
  for (std::size_t i = 0; i < report.axis_keys.size(); ++i) {
    std::size_t w = report.axis_keys[i].size();
    for (const auto& c : cells) w = std::max(w, c.axis_values[i].size());
    width.push_back(w + 2);
  }
  for (std::size_t i = 0; i < report.axis_keys.size(); ++i)
    os << std::left << std::setw(static_cast<int>(width[i])) << report.axis_keys[i];
  os << std::right << std::setw(5) << "runs" << std::setw(22) << "mIoU" << std::setw(22)
     << "aErr" << std::setw(22) << "mErr" << "\n";
  auto pm = [](double m, double s, int prec) {
    std::ostringstream o;
    o << std::fixed << std::setprecision(prec) << m << " +/- " << s;
    return o.str();
  };
  for (const auto& c : cells) {
    for (std::size_t i = 0; i < c.axis_values.size(); ++i)
      os << std::left << std::setw(static_cast<int>(width[i])) << c.axis_values[i];
    os << std::right << std::setw(5) << c.runs << std::setw(22) << pm(c.miou, c.miou_std, 4)
       << std::setw(22) << pm(c.aerr, c.aerr_std, 4) << std::setw(22)
       << pm(c.merr, c.merr_std, 2) << "\n";
  }

  // Marginal means per axis value, averaging cell means over the other axes.
  for (std::size_t i = 0; i < report.axis_keys.size(); ++i) {
    std::vector<std::string> values;
    for (const auto& c : cells)
      if (std::find(values.begin(), values.end(), c.axis_values[i]) == values.end())
        values.push_back(c.axis_values[i]);
    if (values.size() < 2) continue;
    os << "\n" << report.axis_keys[i] << " (mean over other axes):\n";
    std::string best;
    double best_miou = -1.0;
    for (const auto& v : values) {
      std::vector<double> miou, aerr, merr;
      for (const auto& c : cells)
        if (c.axis_values[i] == v) {
          miou.push_back(c.miou);
          aerr.push_back(c.aerr);
          merr.push_back(c.merr);
        }
      const double m = mean_of(miou);
      os << "  " << std::left << std::setw(14) << v << std::right << std::setprecision(4)
         << " mIoU " << m << "  aErr " << mean_of(aerr) << "  mErr " << std::setprecision(2)
         << mean_of(merr) << "\n";
      if (m > best_miou) {
        best_miou = m;
        best = v;
      }
    }
    os << "  best mIoU: " << best << "\n";
  }
  return os.str();
}

}  // namespace rdc::harness
