#include "rdc/tape.hpp"

#include <algorithm>
#include <cstring>

#include "rdc/errors.hpp"

namespace rdc::ad {

const Tensor& Var::value() const { return tape->value(*this); }
const Shape& Var::shape() const { return value().shape; }

double Var::item() const {
  const Tensor& t = value();
  if (t.size() != 1)
    throw ShapeError("item() on non-scalar " + shape_string(t.shape));
  return t.values[0];
}

Var Tape::push(Tensor t, bool requires_grad, std::vector<std::size_t> inputs,
               BackwardFn fn) {
  if (numel(t.shape) != t.values.size())
    throw ShapeError("tensor values do not match shape " +
                     shape_string(t.shape));
  nodes_.push_back(Node{std::move(t), requires_grad, std::move(inputs),
                        std::move(fn)});
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor t) { return push(std::move(t), false, {}, {}); }

Var Tape::variable(Tensor t) { return push(std::move(t), true, {}, {}); }

Var Tape::record(Tensor out, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(out), std::vector<Var>(inputs), std::move(fn));
}

Var Tape::record(Tensor out, const std::vector<Var>& inputs, BackwardFn fn) {
  std::vector<std::size_t> ids;
  bool needs = false;
  for (const Var& v : inputs) {
    if (v.tape != this) throw ShapeError("input belongs to another tape");
    ids.push_back(v.id);
    needs = needs || nodes_[v.id].requires_grad;
  }
  if (!needs) return push(std::move(out), false, std::move(ids), {});
  return push(std::move(out), true, std::move(ids), std::move(fn));
}

std::span<double> Tape::grad_sink(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return {};
  if (n.value.grad.empty()) n.value.grad.assign(n.value.values.size(), 0.0);
  return n.value.grad;
}

std::span<const double> Tape::grad(Var v) const {
  return nodes_[v.id].value.grad;
}

void Tape::backward(Var scalar) {
  if (nodes_[scalar.id].value.size() != 1)
    throw ShapeError("backward() requires a scalar output, got " +
                     shape_string(nodes_[scalar.id].value.shape));
  for (Node& n : nodes_) n.value.grad.clear();
  auto seed = grad_sink(scalar.id);
  if (seed.empty()) return;
  seed[0] = 1.0;
  for (std::size_t i = scalar.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.value.grad.empty()) continue;
    std::span<const double> g = n.value.grad;
    n.backward(*this, g);
  }
}

void Tape::note_kink_pattern(std::span<const double> input) {
  std::uint64_t h = kink_signature_;
  for (double x : input) {
    h ^= (x > 0.0) ? 0x9e3779b97f4a7c15ULL : 0x7f4a7c159e3779b9ULL;
    h *= 1099511628211ULL;
  }
  kink_signature_ = h;
}

}  // namespace rdc::ad
