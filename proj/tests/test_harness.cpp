#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "e2e_check.hpp"
#include "rdc/errors.hpp"
#include "rdc/harness.hpp"

using namespace rdc;
using namespace rdc::harness;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rdc_test_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

// 15 small scenes: 12 train, 3 val.
const fs::path& tiny_dataset() {
  static const fs::path dir = [] {
    const fs::path d = scratch("data") / "tiny";
    const auto world = testing::small_world();
    auto scenes = synth::generate_scenes(world, 15, 99);
    synth::assign_labels(scenes, synth::LabelSetting::onelabel, kNumTasks, 99);
    synth::write_dataset(scenes, world.num_classes, d);
    return d;
  }();
  return dir;
}

RunConfig tiny_config(const std::string& out) {
  RunConfig cfg;
  cfg.data_dir = tiny_dataset();
  cfg.out_dir = scratch(out);
  cfg.epochs = 2;
  cfg.batch = 4;
  cfg.seed = 5;
  return cfg;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(RDC_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config files, overrides and validation") {
  const fs::path dir = scratch("config");
  write(dir / "a.cfg", "# comment\n  tau = 0.5   # trailing\n\ndata_dir = /data/x\n");
  const auto file = read_config_file(dir / "a.cfg");
  CHECK(resolve_config(file, {}).tau == 0.5);
  CHECK(resolve_config(file, {{"tau", "2.0"}}).tau == 2.0);

  write(dir / "bad.cfg", "strategy = gaussianish\n");
  try {
    resolve_config(read_config_file(dir / "bad.cfg"), {{"data_dir", "d"}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("gaussian, vector, pixel") != std::string::npos);
  }

  write(dir / "empty.cfg", "");
  const RunConfig d = resolve_config(read_config_file(dir / "empty.cfg"), {{"data_dir", "d"}});
  const RunConfig ref;
  CHECK(d.setting == synth::LabelSetting::onelabel);
  CHECK(d.strategy == contrast::Strategy::gaussian);
  CHECK(d.extraction == Extraction::region);
  CHECK(d.patch_h == 4);
  CHECK(d.patch_w == 4);
  CHECK(d.distance == contrast::Distance::wasserstein);
  CHECK(d.cov_mode == regions::CovMode::diag);
  CHECK(d.tau == 1.0);
  CHECK(d.eps == 1e-5);
  CHECK(d.lambda_rc == 1.0);
  CHECK(d.epochs == 30);
  CHECK(d.batch == 8);
  CHECK(d.lr == 1e-3);
  CHECK(format_config(d) == format_config([] {
          RunConfig c;
          c.data_dir = "d";
          return c;
        }()));

  CHECK_THROWS_AS(resolve_config(read_config_file(dir / "empty.cfg"), {}), ConfigError);
  write(dir / "unknown.cfg", "temperature = 1\n");
  CHECK_THROWS_AS(read_config_file(dir / "unknown.cfg"), ConfigError);
  write(dir / "dup.cfg", "tau = 1\ntau = 2\n");
  CHECK_THROWS_AS(read_config_file(dir / "dup.cfg"), ConfigError);
  write(dir / "noeq.cfg", "tau 1\n");
  CHECK_THROWS_AS(read_config_file(dir / "noeq.cfg"), ConfigError);
  CHECK_THROWS_AS(read_config_file(dir / "missing.cfg"), ConfigError);
  CHECK_THROWS_AS(resolve_config({}, {{"data_dir", "d"}, {"tau", "0"}}), ConfigError);
  CHECK_THROWS_AS(resolve_config({}, {{"data_dir", "d"}, {"tau", "abc"}}), ConfigError);
  CHECK_THROWS_AS(resolve_config({}, {{"data_dir", "d"}, {"epochs", "-1"}}), ConfigError);
  CHECK_THROWS_AS(resolve_config({}, {{"data_dir", "d"}, {"lambda_rc", "-1"}}), ConfigError);
  CHECK_THROWS_AS(resolve_config({}, {{"data_dir", "d"}, {"lambda_rc", "nan"}}), ConfigError);
  CHECK(resolve_config({}, {{"data_dir", "d"}, {"lambda_rc", "0"}}).lambda_rc == 0.0);

  const RunConfig p = resolve_config({}, {{"data_dir", "d"}, {"patch", "2x6"}});
  CHECK(p.patch_h == 2);
  CHECK(p.patch_w == 6);
  CHECK(resolve_config({}, {{"data_dir", "d"}, {"patch", "3"}}).patch_w == 3);

  // The canonical text reproduces the configuration exactly.
  RunConfig odd = p;
  odd.tau = 0.1 + 0.2;
  odd.strategy = contrast::Strategy::pixel;
  odd.distance = contrast::Distance::kl;
  odd.cov_mode = regions::CovMode::full;
  odd.setting = synth::LabelSetting::random;
  write(dir / "round.cfg", format_config(odd));
  CHECK(format_config(resolve_config(read_config_file(dir / "round.cfg"), {})) ==
        format_config(odd));
}

TEST_CASE("end-to-end loss gradient over every parameter tensor") {
  // One direction per tensor, trunk2.b excluded.
  const std::size_t probes = nets::init_params(0, testing::small_world().num_classes).size() - 1;
  for (auto strategy : {contrast::Strategy::gaussian, contrast::Strategy::vector,
                        contrast::Strategy::pixel})
    for (auto mode : {regions::CovMode::diag, regions::CovMode::full})
      for (auto distance : {contrast::Distance::wasserstein, contrast::Distance::jeffreys}) {
        RunConfig cfg;
        cfg.strategy = strategy;
        cfg.cov_mode = mode;
        cfg.distance = distance;
        const auto r = testing::end_to_end_grad_check(cfg, 1);
        CAPTURE(strategy_name(strategy));
        CAPTURE(cov_mode_name(mode));
        CAPTURE(distance_name(distance));
        CAPTURE(r.worst);
        CHECK(r.max_rel_error <= 1e-4);
        CHECK(r.checked + r.kink_skips == probes);
        CHECK(r.checked >= 8);
        CHECK(r.shift_invariant_grad <= 1e-10 * std::max(1.0, std::abs(r.loss)));
      }
  RunConfig patch;
  patch.extraction = Extraction::patch;
  patch.patch_h = patch.patch_w = 3;
  CHECK(testing::end_to_end_grad_check(patch, 2).max_rel_error <= 1e-4);
}

TEST_CASE("item graph bookkeeping") {
  const auto world = testing::small_world();
  Rng rng(3);
  const synth::Scene scene = synth::generate_scene(world, rng);
  const nets::ModelParams params = nets::init_params(1, world.num_classes);
  RunConfig cfg;
  cfg.lambda_rc = 0.7;
  const auto mask = contrast_mask(scene, cfg);
  CHECK(mask.height == 12);
  CHECK(mask.width == 16);

  for (Task t : kAllTasks) {
    ad::Tape tape;
    const auto g = build_item_graph(nets::bind(tape, params), scene, task_bit(t),
                                    contrast::Setting::partial, cfg, mask, 0);
    CHECK(g.pairs == 2);
    CHECK(g.regions_used > 0);
    CHECK(std::abs(g.total.item() - (g.loss_sup + 0.7 * g.loss_rc)) <= 1e-12);
  }
  {
    ad::Tape tape;
    const auto g = build_item_graph(nets::bind(tape, params), scene, kAllTaskBits,
                                    contrast::Setting::partial, cfg, mask, 0);
    CHECK(g.pairs == 0);
    CHECK(g.loss_rc == 0.0);
    CHECK(g.total.item() == g.loss_sup);
  }
  {
    ad::Tape tape;
    const auto g = build_item_graph(nets::bind(tape, params), scene, kAllTaskBits,
                                    contrast::Setting::full, cfg, mask, 0);
    CHECK(g.pairs == 6);
  }
  {
    cfg.lambda_rc = 0.0;
    ad::Tape tape;
    const auto g = build_item_graph(nets::bind(tape, params), scene, task_bit(Task::seg),
                                    contrast::Setting::partial, cfg, mask, 0);
    CHECK(g.pairs == 0);
    CHECK(g.regions_used == 0);
    CHECK(g.total.item() == g.loss_sup);
  }

  RunConfig pc;
  pc.extraction = Extraction::patch;
  const auto grid = contrast_mask(scene, pc);
  CHECK(grid.region_count() == 12);
}

TEST_CASE("training logs decompose and count pairs") {
  const RunConfig cfg = tiny_config("decompose");
  const DatasetSplit data = load_split(cfg.data_dir);
  CHECK(data.train.size() == 12);
  CHECK(data.val.size() == 3);
  const TrainResult r = train_model(cfg, data);
  REQUIRE(r.batches.size() == 2 * 3);
  for (const auto& b : r.batches) {
    CHECK(std::abs(b.loss_total - (b.loss_sup + cfg.lambda_rc * b.loss_rc)) <= 1e-9);
    CHECK(b.pairs == 2 * b.items);  // onelabel with K = 3
  }
  REQUIRE(r.epochs.size() == 4);
  for (std::size_t i = 0; i < r.epochs.size(); ++i) {
    const auto& e = r.epochs[i];
    CHECK(e.epoch == i / 2 + 1);
    CHECK(e.split == (i % 2 ? "val" : "train"));
    CHECK(e.miou >= 0.0);
    CHECK(e.miou <= 1.0);
    CHECK(e.merr >= 0.0);
    CHECK(e.merr <= 180.0);
    CHECK(e.loss_rc > 0.0);
  }

  RunConfig weighted = cfg;
  weighted.lambda_rc = 0.25;
  for (const auto& b : train_model(weighted, data).batches)
    CHECK(std::abs(b.loss_total - (b.loss_sup + 0.25 * b.loss_rc)) <= 1e-9);

  RunConfig plain = cfg;
  plain.setting = synth::LabelSetting::full;
  plain.lambda_rc = 0.0;
  const TrainResult p = train_model(plain, data);
  for (const auto& b : p.batches) {
    CHECK(b.loss_rc == 0.0);
    CHECK(b.pairs == 0);
  }
  for (const auto& e : p.epochs) {
    CHECK(e.loss_rc == 0.0);
    CHECK(e.regions_used == 0);
  }
}

TEST_CASE("training is deterministic and thread-count independent") {
  RunConfig cfg = tiny_config("determinism_a");
  cfg.strategy = contrast::Strategy::pixel;  // exercises the seeded subsampling
  train(cfg);
  const std::string first = slurp(cfg.out_dir / "metrics.csv");
  const std::string first_ckpt = slurp(cfg.out_dir / "checkpoint.rdc");
  train(cfg);
  CHECK(slurp(cfg.out_dir / "metrics.csv") == first);

  RunConfig threaded = cfg;
  threaded.threads = 3;
  threaded.out_dir = scratch("determinism_b");
  train(threaded);
  CHECK(slurp(threaded.out_dir / "metrics.csv") == first);
  CHECK(slurp(threaded.out_dir / "batches.csv") == slurp(cfg.out_dir / "batches.csv"));
  CHECK(slurp(threaded.out_dir / "checkpoint.rdc") == first_ckpt);

  RunConfig other = cfg;
  other.seed = 6;
  other.out_dir = scratch("determinism_c");
  train(other);
  CHECK(slurp(other.out_dir / "metrics.csv") != first);
}

TEST_CASE("seed isolation") {
  RunConfig a;
  a.seed = 4;
  a.data_dir = "one";
  RunConfig b = a;
  b.data_dir = "two";
  b.strategy = contrast::Strategy::vector;
  b.setting = synth::LabelSetting::random;
  const auto pa = initial_params(a, 5), pb = initial_params(b, 5);
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa.tensors[i].values == pb.tensors[i].values);
  b.seed = 5;
  CHECK(initial_params(b, 5).tensors[0].values != pa.tensors[0].values);
}

TEST_CASE("run outputs, evaluation and checkpoints") {
  const RunConfig cfg = tiny_config("outputs");
  train(cfg);
  const auto metrics = lines(slurp(cfg.out_dir / "metrics.csv"));
  REQUIRE(metrics.size() == 1 + 2 * cfg.epochs);
  CHECK(metrics[0] == "epoch,split,miou,aerr,merr,loss_sup,loss_rc,regions_used,regions_skipped");
  CHECK(lines(slurp(cfg.out_dir / "batches.csv"))[0] == kBatchesHeader);
  CHECK(format_record(parse_record(metrics.back())) == metrics.back());

  // Evaluating the saved checkpoint reproduces the final validation row.
  const EpochRecord e = evaluate(cfg.out_dir / "checkpoint.rdc", cfg);
  CHECK(format_record(e) == metrics.back());

  // The recorded config resolves to the same run.
  const RunConfig again = resolve_config(read_config_file(cfg.out_dir / "config.txt"), {});
  CHECK(format_config(again) == format_config(cfg));

  // A checkpoint for a different class count is rejected.
  const fs::path other = scratch("outputs_other");
  nets::save_checkpoint(other / "ckpt.rdc", nets::init_params(1, 7));
  CHECK_THROWS_AS(evaluate(other / "ckpt.rdc", cfg), DataError);
  CHECK_THROWS_AS(evaluate(other / "absent.rdc", cfg), DataError);

  RunConfig bad = cfg;
  bad.data_dir = other / "nothing";
  CHECK_THROWS_AS(train(bad), DataError);
  CHECK_THROWS_AS(parse_record("1,val,0.5"), DataError);
}

TEST_CASE("untrained model scores near chance") {
  synth::WorldConfig world;
  const auto scenes = synth::generate_scenes(world, 10, 77);
  for (std::uint64_t seed : {1, 2, 3}) {
    RunConfig cfg;
    cfg.seed = seed;
    const EpochRecord r = evaluate_model(initial_params(cfg, world.num_classes), scenes, cfg, 0);
    CHECK(r.miou < 0.3);
    CHECK(r.merr >= 0.0);
    CHECK(r.merr <= 180.0);
    CHECK(r.aerr >= 0.0);
    CHECK(r.aerr <= 1.0);
  }
}

TEST_CASE("non-finite losses abort with their location") {
  RunConfig cfg = tiny_config("numeric");
  cfg.tau = 1e-320;  // distances / tau overflow
  try {
    train_model(cfg, load_split(cfg.data_dir));
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CAPTURE(msg);
    CHECK(msg.find("epoch 1, batch 0") != std::string::npos);
    CHECK(msg.find("L_RC") != std::string::npos);
  }
}

TEST_CASE("ablation grid, resume and sharing") {
  RunConfig base = tiny_config("ablate");
  base.epochs = 1;
  AblateOptions opts;
  opts.axes = {parse_axis("strategy=gaussian,vector,pixel"), parse_axis("extraction=region,patch")};
  const AblateSummary s = ablate(base, opts);
  CHECK(s.cells == 6);
  CHECK(s.runs_total == 18);
  CHECK(s.runs_trained == 18);
  const std::string text = slurp(s.report);
  const auto rows = lines(text);
  REQUIRE(rows.size() == 1 + 18 + 6);
  CHECK(rows[0] == report_header({"strategy", "extraction"}));
  CHECK(rows[0] ==
        "kind,strategy,extraction,seed,runs,miou,miou_std,aerr,aerr_std,merr,merr_std,"
        "loss_sup,loss_rc,run_dir");
  const Report rep = read_report(s.report);
  std::size_t runs = 0, summaries = 0;
  for (const auto& r : rep.rows) (r.kind == "run" ? runs : summaries)++;
  CHECK(runs == 18);
  CHECK(summaries == 6);
  CHECK(rep.rows[0].axis_values == std::vector<std::string>{"gaussian", "region"});
  CHECK(rep.rows[0].seed == "1");

  // Summary rows match an independent mean and sample deviation.
  const ReportRow& first = rep.rows[18];
  REQUIRE(first.kind == "summary");
  const double m = (rep.rows[0].miou + rep.rows[1].miou + rep.rows[2].miou) / 3.0;
  double ss = 0.0;
  for (int i = 0; i < 3; ++i) ss += std::pow(rep.rows[i].miou - m, 2);
  CHECK(std::abs(first.miou - m) <= 1e-15);
  CHECK(std::abs(first.miou_std - std::sqrt(ss / 2.0)) <= 1e-15);

  // A complete report is left untouched.
  const AblateSummary again = ablate(base, opts);
  CHECK(again.runs_resumed == 18);
  CHECK(again.runs_trained == 0);
  CHECK(slurp(s.report) == text);

  // Interrupted grid: only the header and five run rows survive, and two run
  // directories are gone.
  std::string partial;
  for (std::size_t i = 0; i < 6; ++i) partial += rows[i] + "\n";
  write(s.report, partial);
  fs::remove_all(base.out_dir / "runs" / "strategy-pixel_extraction-patch_seed3");
  fs::remove_all(base.out_dir / "runs" / "strategy-vector_extraction-patch_seed1");
  const AblateSummary resumed = ablate(base, opts);
  CHECK(resumed.runs_resumed == 5);
  CHECK(resumed.runs_trained == 2);
  CHECK(resumed.runs_shared == 11);
  CHECK(slurp(s.report) == text);

  CHECK(summarize_report(rep).find("best mIoU") != std::string::npos);
}

TEST_CASE("equivalent ablation cells share one run") {
  RunConfig base = tiny_config("ablate_share");
  base.epochs = 1;
  AblateOptions opts;
  opts.axes = {parse_axis("strategy=gaussian,vector"), parse_axis("distance=wasserstein,kl")};
  opts.seeds = {1};
  const AblateSummary s = ablate(base, opts);
  CHECK(s.runs_total == 4);
  CHECK(s.runs_trained == 3);
  CHECK(s.runs_shared == 1);
  const Report rep = read_report(s.report);
  CHECK(rep.rows[2].run_dir == rep.rows[3].run_dir);
  CHECK(rep.rows[2].miou == rep.rows[3].miou);
  CHECK(rep.rows[0].run_dir != rep.rows[1].run_dir);

  // A report for other axes is not silently overwritten.
  AblateOptions other = opts;
  other.axes = {parse_axis("strategy=gaussian")};
  CHECK_THROWS_AS(ablate(base, other), DataError);
}

TEST_CASE("axis and report parsing errors") {
  CHECK_THROWS_AS(parse_axis("strategy"), ConfigError);
  CHECK_THROWS_AS(parse_axis("color=red"), ConfigError);
  CHECK_THROWS_AS(parse_axis("strategy=gaussian,cube"), ConfigError);
  CHECK_THROWS_AS(parse_axis("strategy=gaussian,gaussian"), ConfigError);
  CHECK_THROWS_AS(parse_axis("seed=1,2"), ConfigError);
  CHECK(parse_axis("lambda_rc=0,1").values.size() == 2);

  const fs::path dir = scratch("report");
  write(dir / "r.csv", "kind,strategy,seed\n");
  CHECK_THROWS_AS(read_report(dir / "r.csv"), DataError);
  write(dir / "r.csv", report_header({"strategy"}) + "\nrun,gaussian,1,1,0.5,,0.1,,3,,1,1\n");
  CHECK_THROWS_AS(read_report(dir / "r.csv"), DataError);
  write(dir / "r.csv",
        report_header({"strategy"}) + "\nrun,gaussian,1,1,zero,,0.1,,3,,1,1,runs/x\n");
  CHECK_THROWS_AS(read_report(dir / "r.csv"), DataError);
}

TEST_CASE("command line exit codes and flag precedence") {
  const fs::path dir = scratch("cli");
  const std::string data = (dir / "data").string();
  CHECK(run_cli("gen --out " + data + " --count 6 --height 16 --width 16 --classes 3"
                " --min_shapes 1 --max_shapes 2 --seed 3") == 0);
  CHECK(synth::read_manifest(data).count == 6);

  write(dir / "run.cfg", "data_dir = " + data + "\ntau = 0.5\nepochs = 1\nbatch = 2\n");
  const std::string out = (dir / "run").string();
  CHECK(run_cli("train --config " + (dir / "run.cfg").string() + " --tau 2.0 --out_dir " + out +
                " --quiet") == 0);
  const RunConfig used = resolve_config(read_config_file(fs::path(out) / "config.txt"), {});
  CHECK(used.tau == 2.0);
  CHECK(used.epochs == 1);

  CHECK(run_cli("eval --config " + (fs::path(out) / "config.txt").string() + " --checkpoint " +
                out + "/checkpoint.rdc --out " + (dir / "eval.csv").string()) == 0);
  CHECK(lines(slurp(dir / "eval.csv")).back() == lines(slurp(fs::path(out) / "metrics.csv")).back());

  CHECK(run_cli("train --out_dir " + out) == 2);                              // no data_dir
  CHECK(run_cli("train --data_dir " + data + " --strategy cube") == 2);       // bad value
  CHECK(run_cli("train --data_dir " + data + " --colour red") == 2);          // unknown flag
  write(dir / "unknown.cfg", "colour = red\n");
  CHECK(run_cli("train --config " + (dir / "unknown.cfg").string()) == 2);
  CHECK(run_cli("train --data_dir " + (dir / "missing").string() + " --out_dir " + out) == 3);
  CHECK(run_cli("eval --data_dir " + data + " --checkpoint " + (dir / "none.rdc").string()) == 3);
  CHECK(run_cli("train --data_dir " + data + " --out_dir " + out + " --epochs 1 --tau 1e-320") ==
        4);
  CHECK(run_cli("report " + (dir / "none.csv").string()) == 3);
  CHECK(run_cli("") == 2);
  CHECK(run_cli("--help") == 0);
}
