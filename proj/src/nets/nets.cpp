#include "rdc/nets.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>

#include "rdc/errors.hpp"
#include "rdc/ops.hpp"
#include "rdc/rng.hpp"

namespace rdc::nets {
namespace {

constexpr std::size_t kEnc1 = 16, kEnc2 = 32, kEnc3 = 32;

// Fixed slots in ModelParams::tensors; each conv owns (weight, bias).
constexpr std::size_t kEncoderSlot = 0;             // 3 convs
constexpr std::size_t kHeadSlot = 6;                // one conv per task
constexpr std::size_t kAdapterSlot = kHeadSlot + 2 * kNumTasks;
constexpr std::size_t kTrunkSlot = kAdapterSlot + 2 * kNumTasks;  // 2 convs
constexpr std::size_t kParamCount = kTrunkSlot + 4;

Shape conv_shape(std::size_t cout, std::size_t cin) { return {cout, cin, 3, 3}; }

ad::Var conv(const BoundModel& m, std::size_t slot, ad::Var x) {
  return ad::conv2d_3x3(x, m.vars[slot], m.vars[slot + 1]);
}

void require_even_chw(const Tensor& t, std::size_t channels, const char* what) {
  if (t.rank() != 3 || t.dim(0) != channels)
    throw ShapeError(std::string(what) + ": expected [" + std::to_string(channels) +
                     " x H x W], got " + shape_string(t.shape));
  if (t.dim(1) % 2 || t.dim(2) % 2 || t.dim(1) == 0 || t.dim(2) == 0)
    throw ShapeError(std::string(what) + ": extents must be even and positive, got " +
                     shape_string(t.shape));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>(v >> (8 * i) & 0xff));
}

struct ByteReader {
  const std::string& bytes;
  const std::filesystem::path& path;
  std::size_t pos = 0;

  [[noreturn]] void fail(const std::string& msg) const {
    throw DataError("checkpoint " + path.string() + ": " + msg);
  }
  const unsigned char* take(std::size_t n) {
    if (bytes.size() - pos < n) fail("truncated");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
    pos += n;
    return p;
  }
  std::uint32_t u32() {
    const unsigned char* p = take(4);
    return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
           std::uint32_t(p[3]) << 24;
  }
  std::uint64_t u64() {
    const std::uint64_t lo = u32();
    return lo | std::uint64_t(u32()) << 32;
  }
};

}  // namespace

std::vector<std::pair<std::string, Shape>> param_layout(std::size_t num_classes) {
  if (num_classes < 2) throw ConfigError("model needs at least 2 classes");
  std::vector<std::pair<std::string, Shape>> layout;
  auto add_conv = [&](const std::string& name, std::size_t cout, std::size_t cin) {
    layout.emplace_back(name + ".w", conv_shape(cout, cin));
    layout.emplace_back(name + ".b", Shape{cout});
  };
  add_conv("enc1", kEnc1, 3);
  add_conv("enc2", kEnc2, kEnc1);
  add_conv("enc3", kEnc3, kEnc2);
  for (Task t : kAllTasks)
    add_conv("head." + std::string(task_name(t)), task_channels(t, num_classes), kEnc3);
  for (Task t : kAllTasks)
    add_conv("adapter." + std::string(task_name(t)), kJointChannels,
             task_channels(t, num_classes));
  add_conv("trunk1", kJointChannels, kJointChannels);
  add_conv("trunk2", kJointChannels, kJointChannels);
  return layout;
}

std::size_t ModelParams::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return i;
  throw ConfigError("no parameter named '" + name + "'");
}

bool ModelParams::is_backbone(std::size_t i) const { return i < kAdapterSlot; }

ModelParams init_params(std::uint64_t seed, std::size_t num_classes) {
  ModelParams p;
  p.num_classes = num_classes;
  for (auto& [name, shape] : param_layout(num_classes)) {
    Tensor t(shape);
    if (shape.size() == 4) {
      const double bound = std::sqrt(6.0 / static_cast<double>(shape[1] * 9));
      Rng rng(derive_seed(seed, name));
      for (double& v : t.values) v = rng.uniform(-bound, bound);
    }
    p.names.push_back(name);
    p.tensors.push_back(std::move(t));
  }
  return p;
}

BoundModel bind(ad::Tape& tape, const ModelParams& params, bool trainable) {
  if (params.size() != kParamCount)
    throw ConfigError("bind: expected " + std::to_string(kParamCount) + " tensors, got " +
                      std::to_string(params.size()));
  BoundModel m;
  m.params = &params;
  for (const Tensor& t : params.tensors)
    m.vars.push_back(trainable ? tape.variable(t) : tape.constant(t));
  return m;
}

ad::Var Predictions::of(Task t) const {
  switch (t) {
    case Task::seg: return seg;
    case Task::depth: return depth;
    case Task::normal: return normal;
  }
  throw ConfigError("unknown task id " + std::to_string(task_index(t)));
}

Predictions backbone_forward(const BoundModel& m, ad::Var image) {
  require_even_chw(image.value(), 3, "backbone_forward");
  ad::Var x = ad::relu(conv(m, kEncoderSlot, image));
  x = ad::downsample_avg2x(x);
  x = ad::relu(conv(m, kEncoderSlot + 2, x));
  x = ad::relu(conv(m, kEncoderSlot + 4, x));
  auto head = [&](Task t) {
    return ad::upsample_nearest2x(conv(m, kHeadSlot + 2 * task_index(t), x));
  };
  Predictions p;
  p.seg = head(Task::seg);
  p.depth = ad::sigmoid(head(Task::depth));
  p.normal = ad::normalize_channels(head(Task::normal));
  return p;
}

ad::Var adapter_input_from_prediction(Task task, const Predictions& pred) {
  if (task == Task::seg) return ad::exp(ad::channel_log_softmax(pred.seg));
  return pred.of(task);
}

Tensor one_hot_labels(std::size_t height, std::size_t width,
                      std::span<const std::uint32_t> labels, std::size_t num_classes) {
  if (labels.size() != height * width)
    throw ShapeError("one_hot_labels: " + std::to_string(labels.size()) +
                     " labels for a " + std::to_string(height) + "x" +
                     std::to_string(width) + " grid");
  Tensor out({num_classes, height, width});
  const std::size_t plane = height * width;
  for (std::size_t i = 0; i < plane; ++i) {
    const std::uint32_t c = labels[i];
    if (c == kSegIgnore) continue;
    if (c >= num_classes)
      throw DataError("one_hot_labels: label " + std::to_string(c) + " at pixel " +
                      std::to_string(i) + " exceeds class count " +
                      std::to_string(num_classes));
    out.values[c * plane + i] = 1.0;
  }
  return out;
}

ad::Var aux_map_forward(const BoundModel& m, Task task, ad::Var input) {
  require_even_chw(input.value(), task_channels(task, m.params->num_classes),
                   "aux_map_forward");
  ad::Var x = ad::downsample_avg2x(input);
  x = conv(m, kAdapterSlot + 2 * task_index(task), x);
  x = ad::relu(conv(m, kTrunkSlot, x));
  return conv(m, kTrunkSlot + 2, x);
}

AdamState make_adam(std::span<const Tensor> params, AdamConfig cfg) {
  AdamState s;
  s.cfg = cfg;
  for (const Tensor& t : params) {
    s.m.emplace_back(t.size(), 0.0);
    s.v.emplace_back(t.size(), 0.0);
  }
  return s;
}

void adam_step(std::span<Tensor> params, std::span<const std::vector<double>> grads,
               AdamState& s) {
  if (grads.size() != params.size() || s.m.size() != params.size() ||
      s.v.size() != params.size())
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " params, " +
                     std::to_string(grads.size()) + " grads, " +
                     std::to_string(s.m.size()) + " moment slots");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (grads[i].size() != params[i].size() || s.m[i].size() != params[i].size() ||
        s.v[i].size() != params[i].size())
      throw ShapeError("adam_step: size mismatch for tensor " + std::to_string(i));
  ++s.step;
  const double b1 = s.cfg.beta1, b2 = s.cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::vector<double>& m = s.m[i];
    std::vector<double>& v = s.v[i];
    const std::vector<double>& g = grads[i];
    std::vector<double>& w = params[i].values;
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      w[j] -= s.cfg.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + s.cfg.eps);
    }
  }
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  std::string out = "RDC1";
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    put_u32(out, static_cast<std::uint32_t>(params.names[i].size()));
    out += params.names[i];
    put_u32(out, static_cast<std::uint32_t>(params.tensors[i].rank()));
    for (std::size_t e : params.tensors[i].shape) put_u32(out, static_cast<std::uint32_t>(e));
  }
  for (const Tensor& t : params.tensors)
    for (double v : t.values) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      put_u32(out, static_cast<std::uint32_t>(bits));
      put_u32(out, static_cast<std::uint32_t>(bits >> 32));
    }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write checkpoint " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("short write to checkpoint " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(f), {}};
  ByteReader r{bytes, path};
  if (std::string(reinterpret_cast<const char*>(r.take(4)), 4) != "RDC1")
    r.fail("bad magic");
  const std::uint32_t count = r.u32();
  ModelParams p;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32();
    if (len > 4096) r.fail("implausible name length");
    p.names.emplace_back(reinterpret_cast<const char*>(r.take(len)), len);
    const std::uint32_t rank = r.u32();
    if (rank > 8) r.fail("implausible rank");
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(r.u32());
    p.tensors.emplace_back(std::move(shape));
  }
  for (Tensor& t : p.tensors)
    for (double& v : t.values) v = std::bit_cast<double>(r.u64());
  if (r.pos != bytes.size()) r.fail("trailing bytes");

  // The seg head's output channels fix the class count; everything else must
  // then match the layout exactly.
  std::size_t classes = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p.names[i] == "head.seg.b") classes = p.tensors[i].size();
  if (classes < 2) r.fail("missing or degenerate head.seg.b");
  const auto layout = param_layout(classes);
  if (layout.size() != p.size()) r.fail("tensor count does not match the model layout");
  for (std::size_t i = 0; i < layout.size(); ++i)
    if (layout[i].first != p.names[i] || layout[i].second != p.tensors[i].shape)
      r.fail("tensor " + std::to_string(i) + " is '" + p.names[i] + "' " +
             shape_string(p.tensors[i].shape) + ", expected '" + layout[i].first + "' " +
             shape_string(layout[i].second));
  p.num_classes = classes;
  return p;
}

}  // namespace rdc::nets
