#include "rdc/supervision.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "rdc/errors.hpp"

namespace rdc::supervision {
namespace {

std::size_t count_valid(std::span<const std::uint8_t> valid, std::size_t plane) {
  if (valid.empty()) return plane;
  if (valid.size() != plane)
    throw ShapeError("valid mask has " + std::to_string(valid.size()) +
                     " entries for " + std::to_string(plane) + " pixels");
  return static_cast<std::size_t>(std::count_if(valid.begin(), valid.end(),
                                                [](std::uint8_t v) { return v != 0; }));
}

bool is_valid(std::span<const std::uint8_t> valid, std::size_t i) {
  return valid.empty() || valid[i] != 0;
}

void require_same_shape(const Tensor& pred, const Tensor& gt, std::size_t channels,
                        const char* what) {
  if (pred.rank() != 3 || pred.dim(0) != channels || pred.shape != gt.shape)
    throw ShapeError(std::string(what) + ": expected matching [" +
                     std::to_string(channels) + " x H x W] maps, got " +
                     shape_string(pred.shape) + " and " + shape_string(gt.shape));
}

void require_finite(double x, const char* what) {
  if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite value");
}

}  // namespace

ad::Var seg_ce_loss(ad::Var logits, std::span<const std::uint32_t> labels,
                    std::uint32_t ignore_id) {
  const Tensor& x = logits.value();
  if (x.rank() != 3)
    throw ShapeError("seg_ce_loss: logits must be [L x H x W], got " + shape_string(x.shape));
  const std::size_t classes = x.dim(0), plane = x.dim(1) * x.dim(2);
  if (labels.size() != plane)
    throw ShapeError("seg_ce_loss: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(plane) + " pixels");

  std::size_t count = 0;
  for (std::size_t p = 0; p < plane; ++p) {
    if (labels[p] == ignore_id) continue;
    if (labels[p] >= classes)
      throw DataError("seg_ce_loss: label " + std::to_string(labels[p]) + " at pixel " +
                      std::to_string(p) + " with only " + std::to_string(classes) +
                      " classes");
    ++count;
  }

  // Per-pixel softmax kept for the backward pass.
  std::vector<double> prob(count ? x.size() : 0);
  double total = 0.0;
  for (std::size_t p = 0; p < plane && count; ++p) {
    if (labels[p] == ignore_id) continue;
    double m = x.values[p];
    for (std::size_t c = 1; c < classes; ++c) m = std::max(m, x.values[c * plane + p]);
    double s = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      const double e = std::exp(x.values[c * plane + p] - m);
      prob[c * plane + p] = e;
      s += e;
    }
    for (std::size_t c = 0; c < classes; ++c) prob[c * plane + p] /= s;
    total += m + std::log(s) - x.values[labels[p] * plane + p];
  }
  const double loss = count ? total / static_cast<double>(count) : 0.0;
  require_finite(loss, "seg_ce_loss");

  const std::size_t id = logits.id;
  std::vector<std::uint32_t> lab(labels.begin(), labels.end());
  return logits.tape->record(
      Tensor({1}, {loss}), {logits},
      [id, classes, plane, count, ignore_id, lab = std::move(lab),
       prob = std::move(prob)](ad::Tape& t, std::span<const double> g) {
        auto d = t.grad_sink(id);
        if (d.empty() || count == 0) return;
        const double k = g[0] / static_cast<double>(count);
        for (std::size_t p = 0; p < plane; ++p) {
          if (lab[p] == ignore_id) continue;
          for (std::size_t c = 0; c < classes; ++c)
            d[c * plane + p] += k * (prob[c * plane + p] - (c == lab[p] ? 1.0 : 0.0));
        }
      });
}

ad::Var depth_l1_loss(ad::Var pred, const Tensor& gt, std::span<const std::uint8_t> valid) {
  const Tensor& x = pred.value();
  require_same_shape(x, gt, 1, "depth_l1_loss");
  const std::size_t plane = x.size();
  const std::size_t count = count_valid(valid, plane);
  double total = 0.0;
  for (std::size_t i = 0; i < plane; ++i)
    if (is_valid(valid, i)) total += std::abs(x.values[i] - gt.values[i]);
  const double loss = count ? total / static_cast<double>(count) : 0.0;
  require_finite(loss, "depth_l1_loss");

  const std::size_t id = pred.id;
  std::vector<double> sign(plane, 0.0), diffs(plane, 0.0);
  for (std::size_t i = 0; i < plane; ++i)
    if (is_valid(valid, i)) {
      const double diff = x.values[i] - gt.values[i];
      diffs[i] = diff;
      sign[i] = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
    }
  pred.tape->note_kink_pattern(diffs);
  return pred.tape->record(Tensor({1}, {loss}), {pred},
                           [id, count, sign = std::move(sign)](ad::Tape& t,
                                                               std::span<const double> g) {
                             auto d = t.grad_sink(id);
                             if (d.empty() || count == 0) return;
                             const double k = g[0] / static_cast<double>(count);
                             for (std::size_t i = 0; i < sign.size(); ++i) d[i] += k * sign[i];
                           });
}

ad::Var normal_cosine_loss(ad::Var pred, const Tensor& gt, std::span<const std::uint8_t> valid) {
  const Tensor& x = pred.value();
  require_same_shape(x, gt, 3, "normal_cosine_loss");
  const std::size_t plane = x.dim(1) * x.dim(2);
  const std::size_t count = count_valid(valid, plane);
  double total = 0.0;
  for (std::size_t i = 0; i < plane; ++i) {
    if (!is_valid(valid, i)) continue;
    double dot = 0.0;
    for (std::size_t c = 0; c < 3; ++c) dot += x.values[c * plane + i] * gt.values[c * plane + i];
    total += 1.0 - dot;
  }
  const double loss = count ? total / static_cast<double>(count) : 0.0;
  require_finite(loss, "normal_cosine_loss");

  const std::size_t id = pred.id;
  std::vector<double> target(x.size(), 0.0);
  for (std::size_t i = 0; i < plane; ++i)
    if (is_valid(valid, i))
      for (std::size_t c = 0; c < 3; ++c) target[c * plane + i] = gt.values[c * plane + i];
  return pred.tape->record(Tensor({1}, {loss}), {pred},
                           [id, count, target = std::move(target)](ad::Tape& t,
                                                                   std::span<const double> g) {
                             auto d = t.grad_sink(id);
                             if (d.empty() || count == 0) return;
                             const double k = g[0] / static_cast<double>(count);
                             for (std::size_t i = 0; i < target.size(); ++i) d[i] -= k * target[i];
                           });
}

void ExactSum::add(double x) {
  if (!std::isfinite(x)) throw NumericError("ExactSum: non-finite term");
  std::size_t i = 0;
  for (double y : partials_) {
    if (std::abs(x) < std::abs(y)) std::swap(x, y);
    const double hi = x + y;
    const double lo = y - (hi - x);
    if (lo != 0.0) partials_[i++] = lo;
    x = hi;
  }
  partials_.resize(i);
  partials_.push_back(x);
}

void ExactSum::merge(const ExactSum& other) {
  for (double p : other.partials_) add(p);
}

double ExactSum::value() const {
  // Round the exact sum of the partials once, with a half-way correction.
  std::size_t n = partials_.size();
  if (n == 0) return 0.0;
  double hi = partials_[--n];
  double lo = 0.0;
  while (n > 0) {
    const double x = hi;
    const double y = partials_[--n];
    hi = x + y;
    lo = y - (hi - x);
    if (lo != 0.0) break;
  }
  if (n > 0 && ((lo < 0.0 && partials_[n - 1] < 0.0) || (lo > 0.0 && partials_[n - 1] > 0.0))) {
    const double y = lo * 2.0;
    const double x = hi + y;
    if (y == x - hi) hi = x;
  }
  return hi;
}

MetricAccumulator::MetricAccumulator(std::size_t num_classes, std::uint32_t ignore_id)
    : num_classes_(num_classes),
      ignore_id_(ignore_id),
      intersection_(num_classes, 0),
      pred_count_(num_classes, 0),
      gt_count_(num_classes, 0) {}

void MetricAccumulator::add_seg(std::span<const std::uint32_t> pred,
                                std::span<const std::uint32_t> gt) {
  if (pred.size() != gt.size())
    throw ShapeError("add_seg: " + std::to_string(pred.size()) + " predictions vs " +
                     std::to_string(gt.size()) + " labels");
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == ignore_id_) continue;
    if (gt[i] >= num_classes_ || pred[i] >= num_classes_)
      throw DataError("add_seg: class out of range at pixel " + std::to_string(i));
    ++gt_count_[gt[i]];
    ++pred_count_[pred[i]];
    if (pred[i] == gt[i]) ++intersection_[gt[i]];
    ++seg_pixels_;
  }
}

void MetricAccumulator::add_depth(std::span<const double> pred, std::span<const double> gt) {
  if (pred.size() != gt.size()) throw ShapeError("add_depth: size mismatch");
  for (std::size_t i = 0; i < gt.size(); ++i) depth_error_.add(std::abs(pred[i] - gt[i]));
  depth_pixels_ += gt.size();
}

void MetricAccumulator::add_normals(std::span<const double> pred, std::span<const double> gt) {
  if (pred.size() != gt.size() || gt.size() % 3)
    throw ShapeError("add_normals: expected equal 3-channel maps");
  const std::size_t plane = gt.size() / 3;
  for (std::size_t i = 0; i < plane; ++i) {
    double dot = 0.0;
    for (std::size_t c = 0; c < 3; ++c) dot += pred[c * plane + i] * gt[c * plane + i];
    angle_error_.add(std::acos(std::clamp(dot, -1.0, 1.0)) * (180.0 / std::numbers::pi));
  }
  normal_pixels_ += plane;
}

void MetricAccumulator::merge(const MetricAccumulator& o) {
  if (o.num_classes_ != num_classes_ || o.ignore_id_ != ignore_id_)
    throw ConfigError("MetricAccumulator::merge: incompatible accumulators");
  for (std::size_t c = 0; c < num_classes_; ++c) {
    intersection_[c] += o.intersection_[c];
    pred_count_[c] += o.pred_count_[c];
    gt_count_[c] += o.gt_count_[c];
  }
  seg_pixels_ += o.seg_pixels_;
  depth_pixels_ += o.depth_pixels_;
  normal_pixels_ += o.normal_pixels_;
  depth_error_.merge(o.depth_error_);
  angle_error_.merge(o.angle_error_);
}

double MetricAccumulator::miou() const {
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < num_classes_; ++c) {
    const std::uint64_t uni = pred_count_[c] + gt_count_[c] - intersection_[c];
    if (uni == 0) continue;
    sum += static_cast<double>(intersection_[c]) / static_cast<double>(uni);
    ++present;
  }
  return present ? sum / static_cast<double>(present) : 0.0;
}

double MetricAccumulator::aerr() const {
  return depth_pixels_ ? depth_error_.value() / static_cast<double>(depth_pixels_) : 0.0;
}

double MetricAccumulator::merr() const {
  return normal_pixels_ ? angle_error_.value() / static_cast<double>(normal_pixels_) : 0.0;
}

std::vector<std::uint32_t> argmax_classes(const Tensor& logits) {
  if (logits.rank() != 3) throw ShapeError("argmax_classes: expected [L x H x W]");
  const std::size_t classes = logits.dim(0), plane = logits.dim(1) * logits.dim(2);
  std::vector<std::uint32_t> out(plane, 0);
  for (std::size_t p = 0; p < plane; ++p) {
    double best = logits.values[p];
    for (std::size_t c = 1; c < classes; ++c)
      if (logits.values[c * plane + p] > best) {
        best = logits.values[c * plane + p];
        out[p] = static_cast<std::uint32_t>(c);
      }
  }
  return out;
}

double miou(std::span<const std::uint32_t> pred, std::span<const std::uint32_t> gt,
            std::size_t num_classes, std::uint32_t ignore_id) {
  MetricAccumulator acc(num_classes, ignore_id);
  acc.add_seg(pred, gt);
  return acc.miou();
}

double aerr(std::span<const double> pred, std::span<const double> gt) {
  MetricAccumulator acc;
  acc.add_depth(pred, gt);
  return acc.aerr();
}

double merr(std::span<const double> pred, std::span<const double> gt) {
  MetricAccumulator acc;
  acc.add_normals(pred, gt);
  return acc.merr();
}

}  // namespace rdc::supervision
