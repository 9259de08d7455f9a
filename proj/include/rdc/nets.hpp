#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rdc/tape.hpp"
#include "rdc/task.hpp"

namespace rdc::nets {

inline constexpr std::size_t kJointChannels = 16;

// Every trainable tensor of the backbone (encoder + heads) and the auxiliary
// mapper (per-task adapters + shared trunk), in a fixed order.
struct ModelParams {
  std::size_t num_classes = 0;
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  std::size_t size() const { return tensors.size(); }
  // Throws ConfigError for an unknown name.
  std::size_t index_of(const std::string& name) const;
  bool is_backbone(std::size_t i) const;
};

// Parameter names and shapes for a given class count.
std::vector<std::pair<std::string, Shape>> param_layout(std::size_t num_classes);

// Weights uniform in +/- sqrt(6 / fan_in), biases zero. Each tensor draws from
// its own stream derived from (seed, name).
ModelParams init_params(std::uint64_t seed, std::size_t num_classes);

// Parameters placed on a tape.
struct BoundModel {
  const ModelParams* params = nullptr;
  std::vector<ad::Var> vars;
};
BoundModel bind(ad::Tape& tape, const ModelParams& params, bool trainable = true);

struct Predictions {
  ad::Var seg;     // [L x H x W] logits
  ad::Var depth;   // [1 x H x W] in (0, 1)
  ad::Var normal;  // [3 x H x W] unit length per pixel
  ad::Var of(Task t) const;
};

// Throws ShapeError unless image is [3 x H x W] with even H, W.
Predictions backbone_forward(const BoundModel& model, ad::Var image);

// Prediction side of the adapter encoding: softmax probabilities for
// segmentation, pass-through otherwise.
ad::Var adapter_input_from_prediction(Task task, const Predictions& pred);

// Label side: one-hot planes for a segmentation grid (ignore -> all zero);
// labels >= num_classes other than kSegIgnore throw DataError.
Tensor one_hot_labels(std::size_t height, std::size_t width,
                      std::span<const std::uint32_t> labels, std::size_t num_classes);

// Maps a task-channel input at full resolution to the joint feature space at
// half resolution: [kJointChannels x H/2 x W/2].
ad::Var aux_map_forward(const BoundModel& model, Task task, ad::Var adapter_input);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig cfg;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m, v;
};

AdamState make_adam(std::span<const Tensor> params, AdamConfig cfg = {});

// Bias-corrected Adam update. Throws ShapeError when grads or moments do not
// mirror the parameter shapes.
void adam_step(std::span<Tensor> params, std::span<const std::vector<double>> grads,
               AdamState& state);

// "RDC1", u32 count, per tensor {u32 name length, name bytes, u32 rank,
// u32 extents}, then every tensor's values as little-endian f64.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
// Throws DataError on a malformed file or one that does not match the layout.
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace rdc::nets
