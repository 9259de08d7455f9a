#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>
#include <thread>

#include "rdc/errors.hpp"
#include "rdc/harness.hpp"
#include "rdc/ops.hpp"

namespace rdc::harness {
namespace {

constexpr std::size_t kTasks = kNumTasks;

// Runs fn(i) for i in [0, n). Each index writes only its own slot, so the
// caller's index-ordered reduction makes results independent of `threads`.
// The exception of the lowest failing index is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n);
  auto run = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t workers = std::min(threads, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) run(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) run(i);
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::string format_double(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

ad::Var supervised_term(Task task, const nets::Predictions& pred, const synth::Scene& scene) {
  switch (task) {
    case Task::seg:
      return supervision::seg_ce_loss(pred.seg, scene.seg);
    case Task::depth:
      return supervision::depth_l1_loss(pred.depth, scene.depth);
    case Task::normal:
      return supervision::normal_cosine_loss(pred.normal, scene.normals);
  }
  throw ConfigError("unknown task");
}

Tensor label_input(Task task, const synth::Scene& scene, std::size_t num_classes) {
  switch (task) {
    case Task::seg:
      return nets::one_hot_labels(scene.height, scene.width, scene.seg, num_classes);
    case Task::depth:
      return scene.depth;
    case Task::normal:
      return scene.normals;
  }
  throw ConfigError("unknown task");
}

void add_metrics(supervision::MetricAccumulator& acc, const nets::Predictions& pred,
                 const synth::Scene& scene) {
  acc.add_seg(supervision::argmax_classes(pred.seg.value()), scene.seg);
  acc.add_depth(pred.depth.value().values, scene.depth.values);
  acc.add_normals(pred.normal.value().values, scene.normals.values);
}

std::string context(std::size_t epoch, std::size_t batch, std::size_t scene) {
  return "epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) +
         ", scene " + std::to_string(scene) + ": ";
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("short write to " + path.string());
}

}  // namespace

std::string format_record(const EpochRecord& r) {
  return std::to_string(r.epoch) + "," + r.split + "," + format_double(r.miou) + "," +
         format_double(r.aerr) + "," + format_double(r.merr) + "," +
         format_double(r.loss_sup) + "," + format_double(r.loss_rc) + "," +
         std::to_string(r.regions_used) + "," + std::to_string(r.regions_skipped);
}

EpochRecord parse_record(const std::string& line) {
  std::vector<std::string> f;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i)
    if (i == line.size() || line[i] == ',') {
      f.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  if (f.size() != 9) throw DataError("metrics row needs 9 fields: '" + line + "'");
  auto num = [&](const std::string& s, auto& out) {
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc() || p != s.data() + s.size())
      throw DataError("bad metrics field '" + s + "'");
  };
  EpochRecord r;
  num(f[0], r.epoch);
  r.split = f[1];
  num(f[2], r.miou);
  num(f[3], r.aerr);
  num(f[4], r.merr);
  num(f[5], r.loss_sup);
  num(f[6], r.loss_rc);
  num(f[7], r.regions_used);
  num(f[8], r.regions_skipped);
  return r;
}

std::string format_batch(const BatchRecord& b) {
  return std::to_string(b.epoch) + "," + std::to_string(b.batch) + "," +
         std::to_string(b.items) + "," + format_double(b.loss_total) + "," +
         format_double(b.loss_sup) + "," + format_double(b.loss_rc) + "," +
         std::to_string(b.pairs) + "," + std::to_string(b.regions_used) + "," +
         std::to_string(b.regions_skipped);
}

masks::RegionMask contrast_mask(const synth::Scene& scene, const RunConfig& cfg) {
  if (cfg.extraction == Extraction::patch)
    return masks::make_patch_grid(scene.height / 2, scene.width / 2, cfg.patch_h, cfg.patch_w);
  return masks::downsample_mask(scene.regions, scene.height / 2, scene.width / 2);
}

ItemGraph build_item_graph(const nets::BoundModel& model, const synth::Scene& scene,
                           TaskSet labeled, contrast::Setting setting,
                           const RunConfig& cfg, const masks::RegionMask& mask,
                           std::uint64_t pixel_seed) {
  ad::Tape& tape = *model.vars.at(0).tape;
  ItemGraph g;
  g.pred = nets::backbone_forward(model, tape.constant(scene.image));

  std::optional<ad::Var> sup;
  for (Task t : kAllTasks)
    if (labeled & task_bit(t)) {
      const ad::Var term = supervised_term(t, g.pred, scene);
      sup = sup ? ad::add(*sup, term) : term;
    }
  if (!sup) sup = tape.constant(Tensor({1}, 0.0));
  g.loss_sup = sup->item();
  g.total = *sup;
  if (!(cfg.lambda_rc > 0.0)) return g;

  const auto pairs =
      contrast::pair_schedule(labeled, kAllTaskBits & ~labeled, kTasks, setting);
  g.pairs = pairs.size();
  if (pairs.empty()) return g;

  // Joint maps are shared between pairs with the same source or target.
  std::array<std::optional<ad::Var>, kTasks> label_maps, pred_maps;
  const std::size_t num_classes = model.params->num_classes;
  std::optional<ad::Var> rc_sum;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const Task s = kAllTasks[pairs[k].source];
    const Task t = kAllTasks[pairs[k].target];
    auto& lm = label_maps[pairs[k].source];
    if (!lm)
      lm = nets::aux_map_forward(model, s, tape.constant(label_input(s, scene, num_classes)));
    auto& pm = pred_maps[pairs[k].target];
    if (!pm) pm = nets::aux_map_forward(model, t, nets::adapter_input_from_prediction(t, g.pred));
    const auto [rc, report] = contrast::cross_task_region_contrast(
        *lm, *pm, mask, contrast_config(cfg, derive_seed(pixel_seed, k)));
    g.regions_used += report.regions_contrasted;
    g.regions_skipped += report.regions_skipped;
    rc_sum = rc_sum ? ad::add(*rc_sum, rc) : rc;
  }
  const ad::Var rc_mean = ad::scale(*rc_sum, 1.0 / static_cast<double>(pairs.size()));
  g.loss_rc = rc_mean.item();
  g.total = ad::add(*sup, ad::scale(rc_mean, cfg.lambda_rc));
  return g;
}

DatasetSplit load_split(const std::filesystem::path& data_dir) {
  DatasetSplit split;
  split.info = synth::read_manifest(data_dir);
  std::vector<synth::Scene> all = synth::read_dataset(data_dir);
  if (all.size() < 2)
    throw DataError(data_dir.string() + ": need at least 2 scenes for a train/val split");
  const std::size_t n_val = std::max<std::size_t>(1, all.size() / 5);
  const std::size_t n_train = all.size() - n_val;
  split.train.assign(std::make_move_iterator(all.begin()),
                     std::make_move_iterator(all.begin() + n_train));
  split.val.assign(std::make_move_iterator(all.begin() + n_train),
                   std::make_move_iterator(all.end()));
  return split;
}

EpochRecord evaluate_model(const nets::ModelParams& params,
                           const std::vector<synth::Scene>& val, const RunConfig& cfg,
                           std::size_t epoch) {
  struct Slot {
    supervision::MetricAccumulator acc;
    double loss_sup = 0.0, loss_rc = 0.0;
    std::size_t used = 0, skipped = 0;
  };
  std::vector<Slot> slots(val.size(), Slot{supervision::MetricAccumulator(params.num_classes)});
  const std::uint64_t eval_seed = derive_seed(cfg.seed, "eval-pixels");
  parallel_for(val.size(), cfg.threads, [&](std::size_t i) {
    ad::Tape tape;
    const nets::BoundModel model = nets::bind(tape, params, false);
    const ItemGraph g =
        build_item_graph(model, val[i], kAllTaskBits, contrast::Setting::full, cfg,
                         contrast_mask(val[i], cfg), derive_seed(eval_seed, i));
    if (!std::isfinite(g.loss_sup) || !std::isfinite(g.loss_rc))
      throw NumericError("validation scene " + std::to_string(i) + ": non-finite loss");
    add_metrics(slots[i].acc, g.pred, val[i]);
    slots[i].loss_sup = g.loss_sup;
    slots[i].loss_rc = g.loss_rc;
    slots[i].used = g.regions_used;
    slots[i].skipped = g.regions_skipped;
  });

  supervision::MetricAccumulator acc(params.num_classes);
  EpochRecord r;
  r.epoch = epoch;
  r.split = "val";
  for (const Slot& s : slots) {
    acc.merge(s.acc);
    r.loss_sup += s.loss_sup;
    r.loss_rc += s.loss_rc;
    r.regions_used += s.used;
    r.regions_skipped += s.skipped;
  }
  if (!val.empty()) {
    r.loss_sup /= static_cast<double>(val.size());
    r.loss_rc /= static_cast<double>(val.size());
  }
  r.miou = acc.miou();
  r.aerr = acc.aerr();
  r.merr = acc.merr();
  return r;
}

nets::ModelParams initial_params(const RunConfig& cfg, std::size_t num_classes) {
  return nets::init_params(derive_seed(cfg.seed, "init"), num_classes);
}

TrainResult train_model(const RunConfig& cfg, const DatasetSplit& data,
                        const ProgressFn& progress) {
  cfg.validate();
  if (data.train.empty()) throw DataError("training split is empty");
  const std::size_t num_classes = data.info.num_classes;

  // Separate streams: parameter init, label assignment, batch order and the
  // pixel-strategy subsampling never share draws.
  TrainResult result;
  result.params = initial_params(cfg, num_classes);
  nets::AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;
  nets::AdamState adam = nets::make_adam(result.params.tensors, adam_cfg);

  std::vector<synth::Scene> train = data.train;
  synth::assign_labels(train, cfg.setting, kTasks, derive_seed(cfg.seed, "labels"));
  const contrast::Setting pair_setting = cfg.setting == synth::LabelSetting::full
                                             ? contrast::Setting::full
                                             : contrast::Setting::partial;
  std::vector<masks::RegionMask> train_masks;
  train_masks.reserve(train.size());
  for (const auto& s : train) train_masks.push_back(contrast_mask(s, cfg));

  const std::uint64_t shuffle_seed = derive_seed(cfg.seed, "shuffle");
  const std::uint64_t pixel_seed = derive_seed(cfg.seed, "pixels");
  const std::size_t np = result.params.size();

  struct ItemOut {
    std::vector<std::vector<double>> grads;
    supervision::MetricAccumulator acc;
    double total = 0.0, loss_sup = 0.0, loss_rc = 0.0;
    std::size_t pairs = 0, used = 0, skipped = 0;
  };

  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(derive_seed(shuffle_seed, epoch));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle.uniform_int(0, i - 1))]);
    const std::uint64_t epoch_pixel_seed = derive_seed(pixel_seed, epoch);

    supervision::MetricAccumulator epoch_acc(num_classes);
    EpochRecord train_rec;
    train_rec.epoch = epoch;
    train_rec.split = "train";

    for (std::size_t b = 0, start = 0; start < order.size(); ++b, start += cfg.batch) {
      const std::size_t items = std::min(cfg.batch, order.size() - start);
      std::vector<ItemOut> outs(items, ItemOut{{}, supervision::MetricAccumulator(num_classes)});
      parallel_for(items, cfg.threads, [&](std::size_t j) {
        const std::size_t idx = order[start + j];
        const synth::Scene& scene = train[idx];
        const std::string where = context(epoch, b, idx);
        ad::Tape tape;
        const nets::BoundModel model = nets::bind(tape, result.params, true);
        ItemGraph g;
        try {
          g = build_item_graph(model, scene, scene.labeled, pair_setting, cfg,
                               train_masks[idx], derive_seed(epoch_pixel_seed, idx));
        } catch (const NumericError& e) {
          throw NumericError(where + "L_RC: " + e.what());
        }
        if (!std::isfinite(g.loss_sup)) throw NumericError(where + "non-finite L_Sup");
        if (!std::isfinite(g.loss_rc)) throw NumericError(where + "non-finite L_RC");
        tape.backward(g.total);
        ItemOut& out = outs[j];
        out.grads.resize(np);
        for (std::size_t p = 0; p < np; ++p) {
          // Parameters off this item's graph (adapters of unused tasks) have
          // no gradient buffer.
          const auto grad = tape.grad(model.vars[p]);
          if (grad.empty())
            out.grads[p].assign(result.params.tensors[p].size(), 0.0);
          else
            out.grads[p].assign(grad.begin(), grad.end());
          if (!all_finite(out.grads[p]))
            throw NumericError(where + "non-finite gradient for " + result.params.names[p]);
        }
        add_metrics(out.acc, g.pred, scene);
        out.total = g.total.item();
        out.loss_sup = g.loss_sup;
        out.loss_rc = g.loss_rc;
        out.pairs = g.pairs;
        out.used = g.regions_used;
        out.skipped = g.regions_skipped;
      });

      std::vector<std::vector<double>> grads(np);
      for (std::size_t p = 0; p < np; ++p) grads[p].assign(result.params.tensors[p].size(), 0.0);
      BatchRecord br;
      br.epoch = epoch;
      br.batch = b;
      br.items = items;
      for (const ItemOut& o : outs) {
        for (std::size_t p = 0; p < np; ++p)
          for (std::size_t k = 0; k < grads[p].size(); ++k) grads[p][k] += o.grads[p][k];
        br.loss_total += o.total;
        br.loss_sup += o.loss_sup;
        br.loss_rc += o.loss_rc;
        br.pairs += o.pairs;
        br.regions_used += o.used;
        br.regions_skipped += o.skipped;
        epoch_acc.merge(o.acc);
        train_rec.loss_sup += o.loss_sup;
        train_rec.loss_rc += o.loss_rc;
      }
      const double inv = 1.0 / static_cast<double>(items);
      for (auto& g : grads)
        for (double& v : g) v *= inv;
      br.loss_total *= inv;
      br.loss_sup *= inv;
      br.loss_rc *= inv;
      train_rec.regions_used += br.regions_used;
      train_rec.regions_skipped += br.regions_skipped;
      nets::adam_step(result.params.tensors, grads, adam);
      result.batches.push_back(br);
    }

    train_rec.loss_sup /= static_cast<double>(train.size());
    train_rec.loss_rc /= static_cast<double>(train.size());
    train_rec.miou = epoch_acc.miou();
    train_rec.aerr = epoch_acc.aerr();
    train_rec.merr = epoch_acc.merr();
    result.epochs.push_back(train_rec);
    if (progress) progress(train_rec);

    const EpochRecord val_rec = evaluate_model(result.params, data.val, cfg, epoch);
    result.epochs.push_back(val_rec);
    if (progress) progress(val_rec);
  }
  return result;
}

TrainResult train(const RunConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  const DatasetSplit data = load_split(cfg.data_dir);
  std::error_code ec;
  std::filesystem::create_directories(cfg.out_dir, ec);
  if (ec) throw DataError("cannot create " + cfg.out_dir.string() + ": " + ec.message());
  write_text(cfg.out_dir / "config.txt", format_config(cfg));

  // Rows are appended as epochs finish so an aborted run keeps its history.
  const auto metrics_path = cfg.out_dir / "metrics.csv";
  std::ofstream metrics(metrics_path, std::ios::binary | std::ios::trunc);
  if (!metrics) throw DataError("cannot write " + metrics_path.string());
  metrics << kMetricsHeader << "\n" << std::flush;
  TrainResult result = train_model(cfg, data, [&](const EpochRecord& r) {
    metrics << format_record(r) << "\n" << std::flush;
    if (progress) progress(r);
  });
  if (!metrics) throw DataError("short write to " + metrics_path.string());

  std::string batches = std::string(kBatchesHeader) + "\n";
  for (const auto& b : result.batches) batches += format_batch(b) + "\n";
  write_text(cfg.out_dir / "batches.csv", batches);
  nets::save_checkpoint(cfg.out_dir / "checkpoint.rdc", result.params);
  return result;
}

EpochRecord evaluate(const std::filesystem::path& checkpoint, const RunConfig& cfg) {
  cfg.validate();
  const nets::ModelParams params = nets::load_checkpoint(checkpoint);
  const DatasetSplit data = load_split(cfg.data_dir);
  if (params.num_classes != data.info.num_classes)
    throw DataError(checkpoint.string() + " has " + std::to_string(params.num_classes) +
                    " classes but the dataset has " + std::to_string(data.info.num_classes));
  return evaluate_model(params, data.val, cfg, cfg.epochs);
}

}  // namespace rdc::harness
