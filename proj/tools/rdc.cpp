// Experiment CLI: gen, train, eval, ablate, report.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "rdc/errors.hpp"
#include "rdc/harness.hpp"
#include "rdc/synthworld.hpp"

namespace {

using namespace rdc;

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

// One string option per config key; only flags actually given override the
// config file.
struct ConfigFlags {
  std::string config_file;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App& app) {
    app.add_option("--config", config_file, "config file of 'key = value' lines");
    for (const auto& key : harness::config_keys())
      options[key] = app.add_option("--" + key, values[key], "overrides '" + key + "'");
  }

  harness::RunConfig resolve() const {
    std::map<std::string, std::string> file, overrides;
    if (!config_file.empty()) file = harness::read_config_file(config_file);
    for (const auto& [key, opt] : options)
      if (opt->count() > 0) overrides[key] = values.at(key);
    return harness::resolve_config(file, overrides);
  }
};

void print_record(const harness::EpochRecord& r) {
  std::fprintf(stderr, "epoch %3zu %-5s mIoU %.4f  aErr %.4f  mErr %6.2f  L_sup %.5f  L_rc %.5f\n",
               r.epoch, r.split.c_str(), r.miou, r.aerr, r.merr, r.loss_sup, r.loss_rc);
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      std::size_t used = 0;
      seeds.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--seeds: '" + item + "' is not a non-negative integer");
    }
  }
  if (seeds.empty()) throw ConfigError("--seeds needs at least one seed");
  return seeds;
}

int run(int argc, char** argv) {
  CLI::App app{"Region-aware distributional contrast: synthetic data, training and ablations"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  std::string gen_out;
  std::size_t gen_count = 250;
  std::uint64_t gen_seed = 0;
  std::string gen_setting = "onelabel";
  synth::WorldConfig world;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--count", gen_count, "number of scenes")->capture_default_str();
  gen->add_option("--seed", gen_seed, "scene and label seed")->capture_default_str();
  gen->add_option("--setting", gen_setting, "stored label setting: onelabel, random, full")
      ->capture_default_str();
  gen->add_option("--height", world.height)->capture_default_str();
  gen->add_option("--width", world.width)->capture_default_str();
  gen->add_option("--classes", world.num_classes)->capture_default_str();
  gen->add_option("--min_shapes", world.min_shapes)->capture_default_str();
  gen->add_option("--max_shapes", world.max_shapes)->capture_default_str();
  gen->add_option("--noise", world.noise_sigma)->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "train one configuration");
  ConfigFlags train_flags;
  train_flags.attach(*train);
  bool quiet = false;
  train->add_flag("--quiet", quiet, "no per-epoch progress on stderr");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the validation split");
  ConfigFlags eval_flags;
  eval_flags.attach(*eval);
  std::string checkpoint, eval_out;
  eval->add_option("--checkpoint", checkpoint, "checkpoint written by train")->required();
  eval->add_option("--out", eval_out, "also write the metrics CSV here");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "run a grid of configurations over seeds");
  ConfigFlags ablate_flags;
  ablate_flags.attach(*ablate);
  std::vector<std::string> axes;
  std::string seeds_text = "1,2,3";
  std::string report_path;
  ablate->add_option("--axis", axes, "key=value1,value2 (repeatable)")->required();
  ablate->add_option("--seeds", seeds_text, "comma-separated seeds")->capture_default_str();
  ablate->add_option("--report", report_path, "report path (default <out_dir>/report.csv)");

  // report
  auto* report = app.add_subcommand("report", "summarize a report.csv");
  std::string report_in;
  report->add_option("report", report_in, "report.csv written by ablate")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  if (gen->parsed()) {
    world.validate();
    const auto setting = synth::parse_setting(gen_setting);
    auto scenes = synth::generate_scenes(world, gen_count, gen_seed);
    synth::assign_labels(scenes, setting, kNumTasks, gen_seed);
    synth::write_dataset(scenes, world.num_classes, gen_out);
    std::fprintf(stderr, "wrote %zu scenes to %s\n", scenes.size(), gen_out.c_str());
  } else if (train->parsed()) {
    const harness::RunConfig cfg = train_flags.resolve();
    const auto result = harness::train(cfg, [&](const harness::EpochRecord& r) {
      if (!quiet) print_record(r);
    });
    std::cout << harness::kMetricsHeader << "\n"
              << harness::format_record(result.epochs.back()) << "\n";
  } else if (eval->parsed()) {
    const harness::RunConfig cfg = eval_flags.resolve();
    const auto rec = harness::evaluate(checkpoint, cfg);
    const std::string text =
        std::string(harness::kMetricsHeader) + "\n" + harness::format_record(rec) + "\n";
    std::cout << text;
    if (!eval_out.empty()) {
      std::ofstream out(eval_out, std::ios::binary | std::ios::trunc);
      out << text;
      if (!out) throw DataError("cannot write " + eval_out);
    }
  } else if (ablate->parsed()) {
    const harness::RunConfig base = ablate_flags.resolve();
    harness::AblateOptions opts;
    for (const auto& a : axes) opts.axes.push_back(harness::parse_axis(a));
    opts.seeds = parse_seeds(seeds_text);
    opts.report = report_path;
    const auto s = harness::ablate(
        base, opts,
        [](const std::string& cell, std::uint64_t seed, const harness::EpochRecord& r) {
          std::fprintf(stderr, "%s seed=%llu: mIoU %.4f aErr %.4f mErr %.2f\n", cell.c_str(),
                       static_cast<unsigned long long>(seed), r.miou, r.aerr, r.merr);
        });
    std::fprintf(stderr, "%zu cells, %zu runs (%zu trained, %zu resumed, %zu shared) -> %s\n",
                 s.cells, s.runs_total, s.runs_trained, s.runs_resumed, s.runs_shared,
                 s.report.string().c_str());
  } else if (report->parsed()) {
    std::cout << harness::summarize_report(harness::read_report(report_in));
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const rdc::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const rdc::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const rdc::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const rdc::FormatError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitInternal;
  }
}
