#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rdc/contrast.hpp"
#include "rdc/nets.hpp"
#include "rdc/supervision.hpp"
#include "rdc/synthworld.hpp"

namespace rdc::harness {

enum class Extraction { region, patch };

struct RunConfig {
  std::filesystem::path data_dir;
  synth::LabelSetting setting = synth::LabelSetting::onelabel;
  contrast::Strategy strategy = contrast::Strategy::gaussian;
  Extraction extraction = Extraction::region;
  std::size_t patch_h = 4, patch_w = 4;
  contrast::Distance distance = contrast::Distance::wasserstein;
  regions::CovMode cov_mode = regions::CovMode::diag;
  double tau = 1.0;
  double eps = 1e-5;
  double lambda_rc = 1.0;
  std::size_t epochs = 30;
  std::size_t batch = 8;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "run";
  std::size_t max_neg_pixels = 16;
  // Worker threads for batch items; results do not depend on it.
  std::size_t threads = 1;

  // Throws ConfigError on non-positive numerics or a missing data_dir.
  void validate() const;
};

// Every key accepted in a config file and as a --flag, in canonical order.
const std::vector<std::string>& config_keys();

// Sets one field from its textual form. Throws ConfigError naming the key
// and, for enumerations, the valid set.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);

// "key = value" lines with '#' comments. Throws ConfigError on unknown keys,
// malformed lines or duplicate keys.
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);

// File values first, then overrides; validates the result.
RunConfig resolve_config(const std::map<std::string, std::string>& file_values,
                         const std::map<std::string, std::string>& overrides);

// Canonical "key = value" text covering every key. Round-trips through
// read_config_file + resolve_config.
std::string format_config(const RunConfig& cfg);

std::string extraction_name(Extraction e);
std::string strategy_name(contrast::Strategy s);
std::string distance_name(contrast::Distance d);
std::string cov_mode_name(regions::CovMode m);

contrast::ContrastConfig contrast_config(const RunConfig& cfg, std::uint64_t pixel_seed);

struct EpochRecord {
  std::size_t epoch = 0;
  std::string split;
  double miou = 0.0, aerr = 0.0, merr = 0.0;
  double loss_sup = 0.0, loss_rc = 0.0;
  std::uint64_t regions_used = 0, regions_skipped = 0;
};

inline constexpr const char* kMetricsHeader =
    "epoch,split,miou,aerr,merr,loss_sup,loss_rc,regions_used,regions_skipped";
inline constexpr const char* kBatchesHeader =
    "epoch,batch,items,loss_total,loss_sup,loss_rc,pairs,regions_used,regions_skipped";

std::string format_record(const EpochRecord& r);
// Throws DataError on a malformed row.
EpochRecord parse_record(const std::string& line);

// Losses of one scene on a tape. `total` is the graph for
// loss_sup + lambda_rc * loss_rc; the doubles are logged values.
struct ItemGraph {
  ad::Var total;
  nets::Predictions pred;
  double loss_sup = 0.0;
  double loss_rc = 0.0;
  std::size_t pairs = 0;
  std::size_t regions_used = 0;
  std::size_t regions_skipped = 0;
};

// Contrast mask for a scene at joint-feature resolution.
masks::RegionMask contrast_mask(const synth::Scene& scene, const RunConfig& cfg);

// Supervised terms over `labeled`, plus the region contrast over the pairs
// scheduled by (labeled, setting). The contrast is skipped when lambda_rc = 0.
ItemGraph build_item_graph(const nets::BoundModel& model, const synth::Scene& scene,
                           TaskSet labeled, contrast::Setting setting,
                           const RunConfig& cfg, const masks::RegionMask& mask,
                           std::uint64_t pixel_seed);

struct DatasetSplit {
  synth::DatasetInfo info;
  std::vector<synth::Scene> train, val;
};

// Last 20% of scenes by index form the validation split.
DatasetSplit load_split(const std::filesystem::path& data_dir);

struct BatchRecord {
  std::size_t epoch = 0, batch = 0, items = 0;
  double loss_total = 0.0, loss_sup = 0.0, loss_rc = 0.0;
  std::size_t pairs = 0, regions_used = 0, regions_skipped = 0;
};

std::string format_batch(const BatchRecord& b);

struct TrainResult {
  nets::ModelParams params;
  std::vector<EpochRecord> epochs;  // train and val row per epoch
  std::vector<BatchRecord> batches;
};

using ProgressFn = std::function<void(const EpochRecord&)>;

// Parameters a run starts from. Depends only on cfg.seed and the class count.
nets::ModelParams initial_params(const RunConfig& cfg, std::size_t num_classes);

// Trains in memory. Throws NumericError naming the epoch, batch, scene and
// term when a loss or gradient goes non-finite.
TrainResult train_model(const RunConfig& cfg, const DatasetSplit& data,
                        const ProgressFn& progress = {});

// train_model plus out_dir/{metrics.csv, batches.csv, checkpoint.rdc, config.txt}.
TrainResult train(const RunConfig& cfg, const ProgressFn& progress = {});

// Validation record of `params` on `val`, labeled as `epoch`. Only forward
// passes; contrast pairs use the full schedule.
EpochRecord evaluate_model(const nets::ModelParams& params,
                           const std::vector<synth::Scene>& val, const RunConfig& cfg,
                           std::size_t epoch);

// Loads the checkpoint and the dataset's validation split. Throws DataError
// when the checkpoint does not match the dataset's class count.
EpochRecord evaluate(const std::filesystem::path& checkpoint, const RunConfig& cfg);

// ---- ablation grid ----

struct Axis {
  std::string key;  // a config key
  std::vector<std::string> values;
};

// "strategy=gaussian,vector" -> Axis. Throws ConfigError on unknown keys or
// values rejected by apply_setting.
Axis parse_axis(const std::string& spec);

struct AblateOptions {
  std::vector<Axis> axes;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::filesystem::path report;  // defaults to <base out_dir>/report.csv
};

struct AblateSummary {
  std::size_t cells = 0;
  std::size_t runs_total = 0;    // cells x seeds
  std::size_t runs_trained = 0;  // trainings actually executed this call
  std::size_t runs_resumed = 0;  // rows already present in the report
  std::size_t runs_shared = 0;   // rows reusing an equivalent configuration
  std::filesystem::path report;
};

using AblateProgressFn = std::function<void(const std::string& cell, std::uint64_t seed,
                                            const EpochRecord&)>;

// Cartesian product of the axes times the seeds, one train + evaluate per
// run. Existing run rows in the report are kept and not recomputed. Runs
// whose settings cannot affect the result (distance and covariance mode for
// the vector and pixel strategies) reuse the equivalent run's directory.
AblateSummary ablate(const RunConfig& base, const AblateOptions& opts,
                     const AblateProgressFn& progress = {});

// Report columns: kind, the axis keys, seed, runs, then metric means with
// sample standard deviations, the losses and the run directory. A "run" row
// holds one training run; a "summary" row aggregates one cell over its seeds.
std::string report_header(const std::vector<std::string>& axis_keys);

struct ReportRow {
  std::string kind;  // run | summary
  std::vector<std::string> axis_values;
  std::string seed;  // empty for summary rows
  std::size_t runs = 1;
  double miou = 0.0, miou_std = 0.0;
  double aerr = 0.0, aerr_std = 0.0;
  double merr = 0.0, merr_std = 0.0;
  double loss_sup = 0.0, loss_rc = 0.0;
  std::string run_dir;  // empty for summary rows
};

// One summary row per distinct axis-value tuple among the run rows, in
// order of first appearance.
std::vector<ReportRow> summarize_runs(const std::vector<ReportRow>& runs);

struct Report {
  std::vector<std::string> axis_keys;
  std::vector<ReportRow> rows;
};

// Throws DataError on a malformed report.
Report read_report(const std::filesystem::path& path);

// Human-readable summary: per-cell mean +/- std, then for each axis the value
// with the best mean mIoU averaged over the other axes.
std::string summarize_report(const Report& report);

}  // namespace rdc::harness
