#include "rdc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Core>

#include "rdc/errors.hpp"

namespace rdc::ad {
namespace {

void require_same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
}

// Applies a unary map with derivative expressed through input x and output y.
template <typename Fwd, typename Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
  const Tensor& x = a.value();
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out.values[i] = fwd(x.values[i]);
  const std::size_t ia = a.id;
  Tape& tape = *a.tape;
  const std::size_t io = tape.size();
  return tape.record(std::move(out), {a},
                     [ia, io, deriv](Tape& t, std::span<const double> g) {
                       auto da = t.grad_sink(ia);
                       const auto& xv = t.value(ia).values;
                       const auto& yv = t.value(io).values;
                       for (std::size_t i = 0; i < g.size(); ++i)
                         da[i] += g[i] * deriv(xv[i], yv[i]);
                     });
}

std::size_t channels(const Shape& s) { return s.at(0); }

void require_chw(Var v, const char* op) {
  if (v.shape().size() != 3)
    throw ShapeError(std::string(op) + ": expected [C x H x W], got " +
                     shape_string(v.shape()));
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  const auto& x = a.value().values;
  const auto& y = b.value().values;
  for (std::size_t i = 0; i < x.size(); ++i) out.values[i] = x[i] + y[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b},
                        [ia, ib](Tape& t, std::span<const double> g) {
                          auto da = t.grad_sink(ia);
                          for (std::size_t i = 0; i < da.size(); ++i)
                            da[i] += g[i];
                          auto db = t.grad_sink(ib);
                          for (std::size_t i = 0; i < db.size(); ++i)
                            db[i] += g[i];
                        });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  const auto& x = a.value().values;
  const auto& y = b.value().values;
  for (std::size_t i = 0; i < x.size(); ++i) out.values[i] = x[i] - y[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b},
                        [ia, ib](Tape& t, std::span<const double> g) {
                          auto da = t.grad_sink(ia);
                          for (std::size_t i = 0; i < da.size(); ++i)
                            da[i] += g[i];
                          auto db = t.grad_sink(ib);
                          for (std::size_t i = 0; i < db.size(); ++i)
                            db[i] -= g[i];
                        });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  const auto& x = a.value().values;
  const auto& y = b.value().values;
  for (std::size_t i = 0; i < x.size(); ++i) out.values[i] = x[i] * y[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(
      std::move(out), {a, b}, [ia, ib](Tape& t, std::span<const double> g) {
        const auto& xv = t.value(ia).values;
        const auto& yv = t.value(ib).values;
        auto da = t.grad_sink(ia);
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * yv[i];
        auto db = t.grad_sink(ib);
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += g[i] * xv[i];
      });
}

Var scale(Var a, double c) {
  return unary(
      a, [c](double x) { return c * x; },
      [c](double, double) { return c; });
}

Var exp(Var a) {
  return unary(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Var log(Var a) {
  const auto& x = a.value().values;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!(x[i] > 0.0))
      throw DomainError("log: non-positive input " + std::to_string(x[i]) +
                        " at index " + std::to_string(i));
  return unary(
      a, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

Var negate(Var a) {
  return unary(
      a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var relu(Var a) {
  a.tape->note_kink_pattern(a.value().values);
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values) s += v;
  const std::size_t ia = a.id;
  return a.tape->record(Tensor({1}, {s}), {a},
                        [ia](Tape& t, std::span<const double> g) {
                          auto da = t.grad_sink(ia);
                          for (double& d : da) d += g[0];
                        });
}

Var matmul(Var a, Var b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw ShapeError("matmul: inner extents differ " + shape_string(sa) +
                     " * " + shape_string(sb));
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  Tensor out({m, n});
  const auto& x = a.value().values;
  const auto& y = b.value().values;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      for (std::size_t j = 0; j < n; ++j)
        out.values[i * n + j] += xv * y[p * n + j];
    }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(
      std::move(out), {a, b},
      [ia, ib, m, k, n](Tape& t, std::span<const double> g) {
        const auto& xv = t.value(ia).values;
        const auto& yv = t.value(ib).values;
        // dA = dC * B^T
        if (auto da = t.grad_sink(ia); !da.empty())
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (std::size_t j = 0; j < n; ++j)
                s += g[i * n + j] * yv[p * n + j];
              da[i * k + p] += s;
            }
        // dB = A^T * dC
        if (auto db = t.grad_sink(ib); !db.empty())
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double a_ip = xv[i * k + p];
              for (std::size_t j = 0; j < n; ++j)
                db[p * n + j] += a_ip * g[i * n + j];
            }
      });
}

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Unfolds a [C x h x w] input into a (C*9) x (h*w) matrix whose row
// c*9 + ky*3 + kx holds in[c][y + ky - 1][x + kx - 1] (zero outside).
RowMatrix im2col(const double* in, std::size_t cin, int h, int w) {
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  RowMatrix col = RowMatrix::Zero(static_cast<Eigen::Index>(cin * 9),
                                  static_cast<Eigen::Index>(plane));
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const int dy = ky - 1, dx = kx - 1;
        double* row = col.row(static_cast<Eigen::Index>(ci * 9 + ky * 3 + kx)).data();
        const double* src = in + ci * plane;
        const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
        for (int y = std::max(0, -dy); y < std::min(h, h - dy); ++y)
          std::copy(src + (y + dy) * w + x0 + dx, src + (y + dy) * w + x1 + dx,
                    row + y * w + x0);
      }
  return col;
}

// Adjoint of im2col: scatter-adds every unfolded entry back to its source.
void col2im_add(const RowMatrix& col, double* out, std::size_t cin, int h, int w) {
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const int dy = ky - 1, dx = kx - 1;
        const double* row = col.row(static_cast<Eigen::Index>(ci * 9 + ky * 3 + kx)).data();
        double* dst = out + ci * plane;
        const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
        for (int y = std::max(0, -dy); y < std::min(h, h - dy); ++y) {
          double* d = dst + (y + dy) * w + dx;
          const double* r = row + y * w;
          for (int x = x0; x < x1; ++x) d[x] += r[x];
        }
      }
}

}  // namespace

Var conv2d_3x3(Var input, Var kernel, Var bias) {
  require_chw(input, "conv2d_3x3");
  const Shape& si = input.shape();
  const Shape& sk = kernel.shape();
  if (sk.size() != 4 || sk[2] != 3 || sk[3] != 3)
    throw ShapeError("conv2d_3x3: kernel must be [Cout x Cin x 3 x 3], got " +
                     shape_string(sk));
  if (sk[1] != si[0])
    throw ShapeError("conv2d_3x3: channel mismatch, input has " +
                     std::to_string(si[0]) + ", kernel expects " +
                     std::to_string(sk[1]));
  if (bias.shape() != Shape{sk[0]})
    throw ShapeError("conv2d_3x3: bias must be [" + std::to_string(sk[0]) +
                     "], got " + shape_string(bias.shape()));
  const std::size_t cin = si[0], cout = sk[0];
  const int h = static_cast<int>(si[1]), w = static_cast<int>(si[2]);
  const auto plane = static_cast<Eigen::Index>(si[1] * si[2]);
  const auto rows = static_cast<Eigen::Index>(cout), inner = static_cast<Eigen::Index>(cin * 9);

  Tensor out({cout, si[1], si[2]});
  {
    const RowMatrix col = im2col(input.value().values.data(), cin, h, w);
    Eigen::Map<const RowMatrix> k(kernel.value().values.data(), rows, inner);
    Eigen::Map<RowMatrix> o(out.values.data(), rows, plane);
    o.noalias() = k * col;
    const double* b = bias.value().values.data();
    for (Eigen::Index co = 0; co < rows; ++co) o.row(co).array() += b[co];
  }

  const std::size_t ii = input.id, ik = kernel.id, ib = bias.id;
  return input.tape->record(
      std::move(out), {input, kernel, bias},
      [ii, ik, ib, cin, h, w, plane, rows, inner](Tape& t, std::span<const double> g) {
        Eigen::Map<const RowMatrix> gm(g.data(), rows, plane);
        // Plain loop: Eigen's vectorized reductions peel by alignment, which
        // would make the summation order depend on the allocation address.
        if (auto db = t.grad_sink(ib); !db.empty())
          for (Eigen::Index co = 0; co < rows; ++co) {
            double s = 0.0;
            for (Eigen::Index p = 0; p < plane; ++p) s += g[co * plane + p];
            db[co] += s;
          }
        if (auto dk = t.grad_sink(ik); !dk.empty()) {
          const RowMatrix col = im2col(t.value(ii).values.data(), cin, h, w);
          Eigen::Map<RowMatrix>(dk.data(), rows, inner).noalias() += gm * col.transpose();
        }
        if (auto di = t.grad_sink(ii); !di.empty()) {
          Eigen::Map<const RowMatrix> k(t.value(ik).values.data(), rows, inner);
          const RowMatrix dcol = k.transpose() * gm;
          col2im_add(dcol, di.data(), cin, h, w);
        }
      });
}

Var downsample_avg2x(Var input) {
  require_chw(input, "downsample_avg2x");
  const Shape& s = input.shape();
  if (s[1] % 2 || s[2] % 2)
    throw ShapeError("downsample_avg2x: odd extent " + shape_string(s));
  const std::size_t c = s[0], h = s[1], w = s[2], oh = h / 2, ow = w / 2;
  Tensor out({c, oh, ow});
  const auto& x = input.value().values;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xo = 0; xo < ow; ++xo) {
        const std::size_t base = (ch * h + 2 * y) * w + 2 * xo;
        out.values[(ch * oh + y) * ow + xo] =
            0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
      }
  const std::size_t ia = input.id;
  return input.tape->record(
      std::move(out), {input},
      [ia, c, h, w, oh, ow](Tape& t, std::span<const double> g) {
        auto d = t.grad_sink(ia);
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xo = 0; xo < ow; ++xo) {
              const double v = 0.25 * g[(ch * oh + y) * ow + xo];
              const std::size_t base = (ch * h + 2 * y) * w + 2 * xo;
              d[base] += v;
              d[base + 1] += v;
              d[base + w] += v;
              d[base + w + 1] += v;
            }
      });
}

Var upsample_nearest2x(Var input) {
  require_chw(input, "upsample_nearest2x");
  const Shape& s = input.shape();
  const std::size_t c = s[0], h = s[1], w = s[2], oh = 2 * h, ow = 2 * w;
  Tensor out({c, oh, ow});
  const auto& x = input.value().values;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xo = 0; xo < ow; ++xo)
        out.values[(ch * oh + y) * ow + xo] = x[(ch * h + y / 2) * w + xo / 2];
  const std::size_t ia = input.id;
  return input.tape->record(
      std::move(out), {input},
      [ia, c, h, w, oh, ow](Tape& t, std::span<const double> g) {
        auto d = t.grad_sink(ia);
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xo = 0; xo < ow; ++xo)
              d[(ch * h + y / 2) * w + xo / 2] += g[(ch * oh + y) * ow + xo];
      });
}

Var channel_log_softmax(Var logits) {
  require_chw(logits, "channel_log_softmax");
  const Shape& s = logits.shape();
  const std::size_t l = s[0], plane = s[1] * s[2];
  const auto& x = logits.value().values;
  if (!all_finite(x)) throw NumericError("channel_log_softmax: non-finite logit");
  Tensor out(s);
  for (std::size_t p = 0; p < plane; ++p) {
    double mx = x[p];
    for (std::size_t c = 1; c < l; ++c) mx = std::max(mx, x[c * plane + p]);
    double z = 0.0;
    for (std::size_t c = 0; c < l; ++c) z += std::exp(x[c * plane + p] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t c = 0; c < l; ++c)
      out.values[c * plane + p] = x[c * plane + p] - lz;
  }
  const std::size_t ia = logits.id;
  Tape& tape = *logits.tape;
  const std::size_t io = tape.size();
  return tape.record(std::move(out), {logits},
                     [ia, io, l, plane](Tape& t, std::span<const double> g) {
                       auto d = t.grad_sink(ia);
                       const auto& y = t.value(io).values;
                       for (std::size_t p = 0; p < plane; ++p) {
                         double gs = 0.0;
                         for (std::size_t c = 0; c < l; ++c)
                           gs += g[c * plane + p];
                         for (std::size_t c = 0; c < l; ++c)
                           d[c * plane + p] +=
                               g[c * plane + p] - std::exp(y[c * plane + p]) * gs;
                       }
                     });
}

Var normalize_channels(Var input, double floor) {
  require_chw(input, "normalize_channels");
  const Shape& s = input.shape();
  const std::size_t c = channels(s), plane = s[1] * s[2];
  const auto& x = input.value().values;
  Tensor out(s);
  std::vector<double> norms(plane), margin(plane);
  for (std::size_t p = 0; p < plane; ++p) {
    double n2 = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) n2 += x[ch * plane + p] * x[ch * plane + p];
    margin[p] = std::sqrt(n2) - floor;
    norms[p] = std::max(std::sqrt(n2), floor);
    for (std::size_t ch = 0; ch < c; ++ch)
      out.values[ch * plane + p] = x[ch * plane + p] / norms[p];
  }
  const std::size_t ia = input.id;
  Tape& tape = *input.tape;
  tape.note_kink_pattern(margin);
  const std::size_t io = tape.size();
  return tape.record(
      std::move(out), {input},
      [ia, io, c, plane, floor, norms = std::move(norms)](
          Tape& t, std::span<const double> g) {
        auto d = t.grad_sink(ia);
        const auto& y = t.value(io).values;
        for (std::size_t p = 0; p < plane; ++p) {
          const double n = norms[p];
          if (n <= floor) {
            // Norm is clamped: the map is linear x / floor here.
            for (std::size_t ch = 0; ch < c; ++ch)
              d[ch * plane + p] += g[ch * plane + p] / n;
            continue;
          }
          double gy = 0.0;
          for (std::size_t ch = 0; ch < c; ++ch)
            gy += g[ch * plane + p] * y[ch * plane + p];
          for (std::size_t ch = 0; ch < c; ++ch)
            d[ch * plane + p] += (g[ch * plane + p] - gy * y[ch * plane + p]) / n;
        }
      });
}

}  // namespace rdc::ad
