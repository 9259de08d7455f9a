#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "rdc/gaussmetric.hpp"
#include "rdc/maskio.hpp"
#include "rdc/regionstats.hpp"
#include "rdc/tape.hpp"
#include "rdc/task.hpp"

namespace rdc::contrast {

using regions::CovMode;
using regions::RegionGaussian;
using regions::RegionPixels;
using regions::RegionVector;

enum class Strategy { gaussian, vector, pixel };
enum class Distance { wasserstein, jeffreys, kl };
enum class NegativeSource { partner_map, both_maps };

struct ContrastConfig {
  double tau = 1.0;
  Strategy strategy = Strategy::gaussian;
  Distance distance = Distance::wasserstein;
  NegativeSource negative_source = NegativeSource::partner_map;
  bool symmetric_anchors = true;
  std::size_t max_neg_pixels = 16;
  std::size_t min_region_cells = regions::kMinRegionCells;
  CovMode cov_mode = CovMode::diag;
  double eps = regions::kDefaultCovEps;
  // Use sqrt(W2^2) instead of the squared distance inside the similarity.
  bool wasserstein_root = false;
  // Drives the pixel-strategy negative subsampling.
  std::uint64_t seed = 0;

  // Throws ConfigError on tau <= 0 or zero caps.
  void validate() const;
};

struct RegionTerm {
  std::uint32_t region_id = 0;
  bool anchor_in_a = true;
  double loss = 0.0;
};

struct ContrastReport {
  double loss = 0.0;
  std::size_t regions_contrasted = 0;
  std::size_t regions_skipped = 0;
  std::size_t skipped_too_small = 0;
  std::size_t skipped_no_negatives = 0;
  bool no_contrastable_regions = false;
  std::vector<RegionTerm> terms;
};

// Loss and its partial derivatives w.r.t. the positive and negative distances.
struct NceTerm {
  double loss = 0.0;
  double d_positive = 0.0;
  std::vector<double> d_negatives;
};

// -log(sim+ / (sim+ + sum sim-)) with sim = exp(-d / tau), evaluated as
// log(1 + sum_k exp((d+ - d-_k) / tau)) with max-shift and sorted summation.
// No negatives gives 0.
NceTerm nce_from_distances(double d_positive, std::span<const double> d_negatives,
                           double tau);

double representation_distance(const RegionGaussian& a, const RegionGaussian& b,
                               const ContrastConfig& cfg);

double nce_region_loss(const RegionGaussian& anchor, const RegionGaussian& positive,
                       std::span<const RegionGaussian> negatives,
                       const ContrastConfig& cfg);
double nce_region_loss(const RegionVector& anchor, const RegionVector& positive,
                       std::span<const RegionVector> negatives,
                       const ContrastConfig& cfg);
// `positive` holds the partner map's pixels at the anchor's coordinates. Each
// negative is used as given; cross_task_region_contrast does the subsampling.
double nce_region_loss(const RegionPixels& anchor, const RegionPixels& positive,
                       std::span<const RegionPixels> negatives,
                       const ContrastConfig& cfg);

struct ContrastResult {
  ContrastReport report;
  Tensor grad_a;  // empty unless gradients were requested
  Tensor grad_b;
};

// Region contrast between two [C x h x w] maps sharing `mask`. Every region
// that survives the size filter anchors one term in map A (and one in map B
// when symmetric_anchors); the loss is the mean over computed terms.
ContrastResult cross_task_region_contrast(const Tensor& map_a, const Tensor& map_b,
                                          const masks::RegionMask& mask,
                                          const ContrastConfig& cfg,
                                          bool want_grad);

// Tape-recorded form; adjoints flow into both maps.
std::pair<ad::Var, ContrastReport> cross_task_region_contrast(
    ad::Var map_a, ad::Var map_b, const masks::RegionMask& mask,
    const ContrastConfig& cfg);

enum class Setting { partial, full };

struct TaskPair {
  std::size_t source = 0;  // labeled task s
  std::size_t target = 0;  // predicted task t
  friend bool operator==(const TaskPair&, const TaskPair&) = default;
};

std::vector<TaskPair> pair_schedule(TaskSet labeled, TaskSet unlabeled,
                                    std::size_t num_tasks, Setting setting);

}  // namespace rdc::contrast
