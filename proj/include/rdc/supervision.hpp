#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "rdc/tape.hpp"
#include "rdc/task.hpp"

namespace rdc::supervision {

// Mean over non-ignored pixels of -log softmax(logits)[label], fused so the
// adjoint is (softmax - onehot) / count. All pixels ignored gives 0 with a
// zero gradient. Labels >= L other than ignore_id throw DataError.
ad::Var seg_ce_loss(ad::Var logits, std::span<const std::uint32_t> labels,
                    std::uint32_t ignore_id = kSegIgnore);

// Mean |pred - gt| over pixels where valid != 0 (empty valid = all pixels).
// The subgradient at pred == gt is 0.
ad::Var depth_l1_loss(ad::Var pred, const Tensor& gt,
                      std::span<const std::uint8_t> valid = {});

// Mean over valid pixels of 1 - <pred, gt> for [3 x H x W] maps.
ad::Var normal_cosine_loss(ad::Var pred, const Tensor& gt,
                           std::span<const std::uint8_t> valid = {});

// Correctly rounded sum of every value added so far, independent of the
// order and grouping of additions (Shewchuk's non-overlapping partials).
class ExactSum {
 public:
  void add(double x);
  void merge(const ExactSum& other);
  double value() const;

 private:
  std::vector<double> partials_;  // increasing magnitude, non-overlapping
};

class MetricAccumulator {
 public:
  explicit MetricAccumulator(std::size_t num_classes = 0,
                             std::uint32_t ignore_id = kSegIgnore);

  // Pixels whose gt is ignore_id are skipped.
  void add_seg(std::span<const std::uint32_t> pred, std::span<const std::uint32_t> gt);
  void add_depth(std::span<const double> pred, std::span<const double> gt);
  // [3 x H x W] planar layout; both span 3 * H * W values.
  void add_normals(std::span<const double> pred, std::span<const double> gt);

  // Throws ConfigError if class counts or ignore ids differ.
  void merge(const MetricAccumulator& other);

  // Mean IoU over classes with a non-empty union; 0 when nothing was seen.
  double miou() const;
  double aerr() const;  // mean absolute depth error, 0 when empty
  double merr() const;  // mean angular error in degrees, 0 when empty

  std::uint64_t seg_pixels() const { return seg_pixels_; }
  std::uint64_t depth_pixels() const { return depth_pixels_; }
  std::uint64_t normal_pixels() const { return normal_pixels_; }

 private:
  std::size_t num_classes_;
  std::uint32_t ignore_id_;
  std::vector<std::uint64_t> intersection_, pred_count_, gt_count_;
  std::uint64_t seg_pixels_ = 0, depth_pixels_ = 0, normal_pixels_ = 0;
  ExactSum depth_error_, angle_error_;
};

// Per-pixel argmax over channels of an [L x H x W] map; ties go to the
// lowest class.
std::vector<std::uint32_t> argmax_classes(const Tensor& logits);

double miou(std::span<const std::uint32_t> pred, std::span<const std::uint32_t> gt,
            std::size_t num_classes, std::uint32_t ignore_id = kSegIgnore);
double aerr(std::span<const double> pred, std::span<const double> gt);
double merr(std::span<const double> pred, std::span<const double> gt);

}  // namespace rdc::supervision
