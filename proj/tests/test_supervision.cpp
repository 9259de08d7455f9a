#include <algorithm>
#include <cmath>
#include <numbers>

#include <boost/multiprecision/cpp_bin_float.hpp>

#include "doctest.h"
#include "rdc/errors.hpp"
#include "rdc/grad_check.hpp"
#include "rdc/ops.hpp"
#include "rdc/supervision.hpp"
#include "test_util.hpp"

using namespace rdc;
using namespace rdc::supervision;
using rdc::testing::random_tensor;

namespace {

// Wide enough to hold sums of doubles spanning 1e-30..1e30 exactly.
using BigFloat = boost::multiprecision::number<
    boost::multiprecision::cpp_bin_float<400, boost::multiprecision::digit_base_2>>;

double exact_oracle(const std::vector<double>& xs) {
  BigFloat s = 0;
  for (double x : xs) s += BigFloat(x);
  return s.convert_to<double>();
}

Tensor unit_normals(std::size_t h, std::size_t w, Rng& rng) {
  Tensor t({3, h, w});
  const std::size_t plane = h * w;
  for (std::size_t i = 0; i < plane; ++i) {
    double v[3], n = 0.0;
    for (double& c : v) {
      c = rng.normal();
      n += c * c;
    }
    for (std::size_t c = 0; c < 3; ++c) t.values[c * plane + i] = v[c] / std::sqrt(n);
  }
  return t;
}

std::vector<std::uint32_t> random_labels(std::size_t n, std::uint32_t classes, Rng& rng,
                                         double ignore_rate = 0.0) {
  std::vector<std::uint32_t> l(n);
  for (auto& v : l)
    v = rng.uniform() < ignore_rate ? kSegIgnore
                                    : static_cast<std::uint32_t>(rng.uniform_int(0, classes - 1));
  return l;
}

}  // namespace

TEST_CASE("cross entropy closed forms") {
  ad::Tape tape;
  ad::Var uniform = tape.variable(Tensor({4, 2, 3}, 0.25));
  const std::vector<std::uint32_t> labels{0, 1, 2, 3, 0, 1};
  CHECK(seg_ce_loss(uniform, labels).item() == doctest::Approx(std::log(4.0)).epsilon(1e-15));

  Tensor sharp({3, 1, 2}, 0.0);
  sharp.values[2 * 2 + 0] = 1000.0;  // class 2 at pixel 0
  sharp.values[0 * 2 + 1] = 1000.0;  // class 0 at pixel 1
  const std::vector<std::uint32_t> sharp_labels{2, 0};
  CHECK(seg_ce_loss(tape.variable(sharp), sharp_labels).item() < 1e-6);

  ad::Var x = tape.variable(Tensor({3, 1, 2}, 0.7));
  const std::vector<std::uint32_t> ignored{kSegIgnore, kSegIgnore};
  ad::Var l = seg_ce_loss(x, ignored);
  CHECK(l.item() == 0.0);
  tape.backward(l);
  const auto g = tape.grad(x);
  CHECK(std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; }));

  const std::vector<std::uint32_t> bad{0, 3};
  CHECK_THROWS_AS(seg_ce_loss(x, bad), DataError);
  const std::vector<std::uint32_t> short_labels{0};
  CHECK_THROWS_AS(seg_ce_loss(x, short_labels), ShapeError);
}

TEST_CASE("cross entropy matches a direct oracle and passes finite differences") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    const Tensor logits = random_tensor({5, 3, 4}, rng, -3.0, 3.0);
    const auto labels = random_labels(12, 5, rng, 0.2);
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t p = 0; p < 12; ++p) {
      if (labels[p] == kSegIgnore) continue;
      double z = 0.0;
      for (std::size_t c = 0; c < 5; ++c) z += std::exp(logits.values[c * 12 + p]);
      total += std::log(z) - logits.values[labels[p] * 12 + p];
      ++n;
    }
    ad::Tape tape;
    const double got = seg_ce_loss(tape.variable(logits), labels).item();
    CHECK(std::abs(got - (n ? total / n : 0.0)) <= 1e-12);
    auto f = [&](ad::Tape&, ad::Var x) { return seg_ce_loss(x, labels); };
    CHECK(ad::grad_check(f, logits) <= 1e-4);
  }
}

TEST_CASE("depth l1 values and gradients") {
  ad::Tape tape;
  Tensor gt({1, 2, 2}, {0.1, 0.2, 0.3, 0.4});
  CHECK(depth_l1_loss(tape.variable(gt), gt).item() == 0.0);
  Tensor shifted = gt;
  for (double& v : shifted.values) v += 0.2;
  CHECK(depth_l1_loss(tape.variable(shifted), gt).item() == doctest::Approx(0.2).epsilon(1e-14));

  // Equal pixels contribute a zero subgradient.
  ad::Var x = tape.variable(Tensor({1, 2, 2}, {0.1, 0.5, 0.3, 0.0}));
  tape.backward(depth_l1_loss(x, gt));
  const auto g = tape.grad(x);
  CHECK(std::vector<double>(g.begin(), g.end()) == std::vector<double>{0.0, 0.25, 0.0, -0.25});

  const std::vector<std::uint8_t> valid{1, 0, 0, 1};
  CHECK(depth_l1_loss(tape.constant(shifted), gt, valid).item() ==
        doctest::Approx(0.2).epsilon(1e-14));
  const std::vector<std::uint8_t> none{0, 0, 0, 0};
  CHECK(depth_l1_loss(tape.constant(shifted), gt, none).item() == 0.0);
  CHECK_THROWS_AS(depth_l1_loss(tape.constant(Tensor({1, 2, 3})), gt), ShapeError);

  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    const Tensor p = random_tensor({1, 4, 5}, rng, 0.0, 1.0);
    const Tensor t = random_tensor({1, 4, 5}, rng, 0.0, 1.0);
    double direct = 0.0;
    for (std::size_t i = 0; i < 20; ++i) direct += std::abs(p.values[i] - t.values[i]);
    ad::Tape tp;
    CHECK(std::abs(depth_l1_loss(tp.variable(p), t).item() - direct / 20.0) <= 1e-12);
    auto f = [&](ad::Tape&, ad::Var x) { return depth_l1_loss(x, t); };
    CHECK(ad::grad_check(f, p) <= 1e-4);
  }
}

TEST_CASE("normal cosine values and gradients") {
  Rng rng(7);
  const Tensor gt = unit_normals(3, 3, rng);
  Tensor neg = gt;
  for (double& v : neg.values) v = -v;
  ad::Tape tape;
  CHECK(std::abs(normal_cosine_loss(tape.constant(gt), gt).item()) <= 1e-15);
  CHECK(normal_cosine_loss(tape.constant(neg), gt).item() == doctest::Approx(2.0).epsilon(1e-15));
  Tensor ez({3, 1, 2}, {0, 0, 0, 0, 1, 1});
  Tensor ex({3, 1, 2}, {1, 1, 0, 0, 0, 0});
  CHECK(normal_cosine_loss(tape.constant(ex), ez).item() == 1.0);

  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng r(seed);
    const Tensor target = unit_normals(2, 3, r);
    const Tensor raw = random_tensor({3, 2, 3}, r);
    // Through the head's normalization, as in training.
    auto f = [&](ad::Tape&, ad::Var x) {
      return normal_cosine_loss(ad::normalize_channels(x), target);
    };
    CHECK(ad::grad_check(f, raw) <= 1e-4);
  }
}

TEST_CASE("metric closed forms") {
  const std::vector<std::uint32_t> pred{0, 0, 1, 1}, gt{0, 1, 1, 1};
  CHECK(miou(pred, gt, 2) == doctest::Approx(7.0 / 12.0).epsilon(1e-15));
  CHECK(miou(gt, gt, 2) == 1.0);
  // A class absent from both sides does not count.
  CHECK(miou(gt, gt, 5) == 1.0);
  const std::vector<std::uint32_t> gt_ignore{0, kSegIgnore, 1, 1};
  CHECK(miou(pred, gt_ignore, 2) == 1.0);

  const std::vector<double> d{0.1, 0.5, 0.9};
  CHECK(aerr(d, d) == 0.0);
  const std::vector<double> d2{0.3, 0.5, 0.6};
  CHECK(aerr(d, d2) == doctest::Approx((0.2 + 0.0 + 0.3) / 3.0).epsilon(1e-15));

  const std::vector<double> ez{0, 0, 0, 0, 1, 1}, ex{1, 1, 0, 0, 0, 0};
  CHECK(merr(ez, ez) == 0.0);
  CHECK(merr(ex, ez) == 90.0);
  const std::vector<double> mez{0, 0, 0, 0, -1, -1};
  CHECK(merr(mez, ez) == 180.0);

  MetricAccumulator empty(3);
  CHECK(empty.miou() == 0.0);
  CHECK(empty.aerr() == 0.0);
  CHECK(empty.merr() == 0.0);
  MetricAccumulator acc(2);
  const std::vector<std::uint32_t> out_of_range{0, 2, 1, 1};
  CHECK_THROWS_AS(acc.add_seg(out_of_range, gt), DataError);
  CHECK_THROWS_AS(acc.merge(MetricAccumulator(3)), ConfigError);
}

TEST_CASE("miou is invariant under a shared class permutation") {
  Rng rng(15);
  for (int trial = 0; trial < 50; ++trial) {
    const auto pred = random_labels(64, 6, rng);
    const auto gt = random_labels(64, 6, rng, 0.1);
    std::vector<std::uint32_t> perm{0, 1, 2, 3, 4, 5};
    for (std::size_t i = 5; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, i)]);
    auto relabel = [&](std::vector<std::uint32_t> v) {
      for (auto& x : v)
        if (x != kSegIgnore) x = perm[x];
      return v;
    };
    CHECK(miou(relabel(pred), relabel(gt), 6) == doctest::Approx(miou(pred, gt, 6)).epsilon(1e-15));
  }
}

TEST_CASE("exact summation is correctly rounded and order independent") {
  Rng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> xs(rng.uniform_int(1, 300));
    for (double& x : xs)
      x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * std::pow(10.0, rng.uniform(-30.0, 30.0));
    // Large cancelling pairs.
    if (trial % 3 == 0)
      for (std::size_t i = 0; i + 1 < xs.size(); i += 5) xs[i + 1] = -xs[i];
    ExactSum s;
    for (double x : xs) s.add(x);
    CHECK(s.value() == exact_oracle(xs));
    std::reverse(xs.begin(), xs.end());
    ExactSum r;
    for (double x : xs) r.add(x);
    CHECK(r.value() == s.value());
  }
  ExactSum tiny;
  for (int i = 0; i < 10; ++i) tiny.add(0.1);
  CHECK(tiny.value() == 1.0);
  ExactSum z;
  CHECK(z.value() == 0.0);
  CHECK_THROWS_AS(z.add(NAN), NumericError);
}

TEST_CASE("accumulator merge equals a single pass bitwise") {
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    Rng rng(seed);
    const std::size_t n = 200;
    const auto pred = random_labels(n, 5, rng);
    const auto gt = random_labels(n, 5, rng, 0.1);
    const Tensor dp = random_tensor({1, 1, n}, rng, 0.0, 1.0);
    const Tensor dg = random_tensor({1, 1, n}, rng, 0.0, 1.0);
    const Tensor np = unit_normals(1, n, rng), ng = unit_normals(1, n, rng);

    MetricAccumulator whole(5);
    whole.add_seg(pred, gt);
    whole.add_depth(dp.values, dg.values);
    whole.add_normals(np.values, ng.values);

    // Random contiguous split into k chunks merged in random grouping.
    std::vector<std::size_t> cuts{0, n};
    for (int k = 0; k < 4; ++k) cuts.push_back(rng.uniform_int(1, n - 1));
    std::sort(cuts.begin(), cuts.end());
    std::vector<MetricAccumulator> parts;
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
      const std::size_t a = cuts[i], b = cuts[i + 1];
      MetricAccumulator part(5);
      part.add_seg(std::span(pred).subspan(a, b - a), std::span(gt).subspan(a, b - a));
      part.add_depth(std::span(dp.values).subspan(a, b - a), std::span(dg.values).subspan(a, b - a));
      // Normals are planar: gather the chunk's three channels.
      std::vector<double> cp, cg;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i2 = a; i2 < b; ++i2) {
          cp.push_back(np.values[c * n + i2]);
          cg.push_back(ng.values[c * n + i2]);
        }
      part.add_normals(cp, cg);
      parts.push_back(part);
    }
    while (parts.size() > 1) {
      const std::size_t i = rng.uniform_int(0, parts.size() - 2);
      parts[i].merge(parts[i + 1]);
      parts.erase(parts.begin() + static_cast<std::ptrdiff_t>(i) + 1);
    }
    CHECK(parts[0].miou() == whole.miou());
    CHECK(parts[0].aerr() == whole.aerr());
    CHECK(parts[0].merr() == whole.merr());
    CHECK(parts[0].seg_pixels() == whole.seg_pixels());
    CHECK(whole.merr() >= 0.0);
    CHECK(whole.merr() <= 180.0);
  }
}

TEST_CASE("argmax picks the lowest class on ties") {
  Tensor t({3, 1, 3}, {1, 0, 2, 1, 5, 2, 0, 5, 2});
  CHECK(argmax_classes(t) == std::vector<std::uint32_t>{0, 1, 0});
}
