#include "rdc/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rdc/errors.hpp"

namespace rdc::ad {
namespace {

struct Eval {
  double value;
  std::uint64_t kink_signature;
};

Eval evaluate(const ScalarGraph& f, const Tensor& x) {
  Tape tape;
  Var in = tape.variable(x);
  Var out = f(tape, in);
  if (out.size() != 1)
    throw ShapeError("grad_check: f must be scalar, got " +
                     shape_string(out.shape()));
  return {out.item(), tape.kink_signature()};
}

}  // namespace

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(numeric));
}

GradCheckReport grad_check_coords(const ScalarGraph& f, const Tensor& x,
                                  std::span<const std::size_t> coords,
                                  double eps, bool extrapolate) {
  Tape tape;
  Var in = tape.variable(x);
  Var out = f(tape, in);
  if (out.size() != 1)
    throw ShapeError("grad_check: f must be scalar, got " +
                     shape_string(out.shape()));
  const std::uint64_t base_signature = tape.kink_signature();
  tape.backward(out);
  std::vector<double> analytic(x.size(), 0.0);
  if (auto g = tape.grad(in); !g.empty())
    std::copy(g.begin(), g.end(), analytic.begin());

  GradCheckReport report;
  Tensor probe = x;
  for (std::size_t i : coords) {
    const double orig = probe.values[i];
    bool crossed = false;
    auto central = [&](double h) {
      probe.values[i] = orig + h;
      const Eval plus = evaluate(f, probe);
      probe.values[i] = orig - h;
      const Eval minus = evaluate(f, probe);
      probe.values[i] = orig;
      crossed = crossed || plus.kink_signature != base_signature ||
                minus.kink_signature != base_signature;
      return (plus.value - minus.value) / (2.0 * h);
    };
    double numeric = central(eps);
    if (extrapolate) numeric = (4.0 * central(0.5 * eps) - numeric) / 3.0;
    if (crossed) {
      ++report.kink_skips;
      continue;
    }
    report.max_rel_error =
        std::max(report.max_rel_error, relative_error(analytic[i], numeric));
    ++report.checked;
  }
  return report;
}

GradCheckReport grad_check_directions(const ScalarGraph& f, const Tensor& x,
                                      std::span<const std::vector<double>> directions,
                                      double eps, bool extrapolate) {
  Tape tape;
  Var in = tape.variable(x);
  Var out = f(tape, in);
  if (out.size() != 1)
    throw ShapeError("grad_check: f must be scalar, got " +
                     shape_string(out.shape()));
  const std::uint64_t base_signature = tape.kink_signature();
  tape.backward(out);
  std::vector<double> grad(x.size(), 0.0);
  if (auto g = tape.grad(in); !g.empty()) std::copy(g.begin(), g.end(), grad.begin());

  GradCheckReport report;
  Tensor probe = x;
  for (const auto& v : directions) {
    if (v.size() != x.size())
      throw ShapeError("grad_check: direction size does not match the point");
    double analytic = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) analytic += grad[i] * v[i];
    bool crossed = false;
    auto central = [&](double h) {
      auto at = [&](double t) {
        for (std::size_t i = 0; i < v.size(); ++i) probe.values[i] = x.values[i] + t * v[i];
        const Eval e = evaluate(f, probe);
        crossed = crossed || e.kink_signature != base_signature;
        return e.value;
      };
      return (at(h) - at(-h)) / (2.0 * h);
    };
    double numeric = central(eps);
    if (extrapolate) numeric = (4.0 * central(0.5 * eps) - numeric) / 3.0;
    if (crossed) {
      ++report.kink_skips;
      continue;
    }
    report.max_rel_error =
        std::max(report.max_rel_error, relative_error(analytic, numeric));
    ++report.checked;
  }
  return report;
}

double grad_check(const ScalarGraph& f, const Tensor& x, double eps) {
  std::vector<std::size_t> coords(x.size());
  std::iota(coords.begin(), coords.end(), 0);
  return grad_check_coords(f, x, coords, eps).max_rel_error;
}

double grad_check(const std::function<double(std::span<const double>)>& f,
                  std::span<const double> analytic, std::span<const double> x,
                  double eps) {
  if (analytic.size() != x.size())
    throw ShapeError("grad_check: gradient and point sizes differ");
  std::vector<double> probe(x.begin(), x.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double fp = f(probe);
    probe[i] = orig - eps;
    const double fm = f(probe);
    probe[i] = orig;
    worst = std::max(worst, relative_error(analytic[i], (fp - fm) / (2.0 * eps)));
  }
  return worst;
}

}  // namespace rdc::ad
