#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "rdc/tensor.hpp"

namespace rdc::ad {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const;
  std::size_t size() const { return value().size(); }
  double item() const;
};

using BackwardFn = std::function<void(Tape&, std::span<const double>)>;

// Records forward ops in topological order and replays their adjoints in
// exact reverse order. Single-threaded; use one tape per batch item.
class Tape {
 public:
  Var constant(Tensor t);
  Var variable(Tensor t);

  // Appends `out` as a new node computed from `inputs`. The backward closure
  // is kept only if some input needs a gradient.
  Var record(Tensor out, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor out, const std::vector<Var>& inputs, BackwardFn fn);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient accumulator for a node; empty span when the node takes no
  // gradient, so backward closures can skip it.
  std::span<double> grad_sink(std::size_t id);
  std::span<const double> grad(Var v) const;

  // Seeds d(v)/d(v) = 1 for a scalar v and runs all recorded adjoints.
  void backward(Var scalar);

  std::size_t size() const { return nodes_.size(); }

  // Folds the sign pattern of a kinked op's switching quantity (relu input,
  // L1 residual, clamped norm) into a running hash, so finite-difference
  // checks can detect a perturbation that crossed a kink.
  void note_kink_pattern(std::span<const double> input);
  std::uint64_t kink_signature() const { return kink_signature_; }

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  Var push(Tensor t, bool requires_grad, std::vector<std::size_t> inputs,
           BackwardFn fn);

  std::vector<Node> nodes_;
  std::uint64_t kink_signature_ = 1469598103934665603ULL;
};

}  // namespace rdc::ad
