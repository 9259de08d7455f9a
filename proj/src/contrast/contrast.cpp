#include "rdc/contrast.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "rdc/errors.hpp"
#include "rdc/rng.hpp"

namespace rdc::contrast {
namespace {

void require_finite(double d, const char* what) {
  if (!std::isfinite(d))
    throw NumericError(std::string("non-finite ") + what + " distance");
}

double squared_euclidean(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw ShapeError("representation dimension mismatch: " +
                     std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

struct GaussDistance {
  double value;
  gauss::GaussianGrad grad;
};

GaussDistance gaussian_distance(const RegionGaussian& a, const RegionGaussian& b,
                                const ContrastConfig& cfg) {
  gauss::DistanceEval e;
  switch (cfg.distance) {
    case Distance::wasserstein:
      e = gauss::wasserstein_sq_grad(a, b);
      if (cfg.wasserstein_root) {
        const double r = std::sqrt(std::max(e.value, 1e-12));
        const double k = 0.5 / r;
        for (auto* blk : {&e.grad.dmu1, &e.grad.dmu2, &e.grad.dsigma1, &e.grad.dsigma2})
          for (double& v : *blk) v *= k;
        e.value = std::sqrt(e.value);
      }
      break;
    case Distance::jeffreys:
      e = gauss::jeffreys_grad(a, b);
      break;
    case Distance::kl:
      e = gauss::kl_gauss_grad(a, b);
      break;
  }
  require_finite(e.value, "gaussian");
  return {e.value, std::move(e.grad)};
}

// One side of the contrast: which map, which region.
struct Ref {
  bool in_a;
  std::size_t slot;  // index into the surviving-region list
};

// Per-map accumulators for representation gradients.
struct GaussGrads {
  std::vector<std::vector<double>> dmu, dsigma;
  void init(const std::vector<RegionGaussian>& reps) {
    dmu.assign(reps.size(), {});
    dsigma.assign(reps.size(), {});
    for (std::size_t i = 0; i < reps.size(); ++i) {
      dmu[i].assign(reps[i].mu.size(), 0.0);
      dsigma[i].assign(reps[i].sigma.size(), 0.0);
    }
  }
};

void axpy(std::vector<double>& y, double a, const std::vector<double>& x) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

// Seeded choice of at most `cap` pixels from a region, kept in row-major order.
std::vector<masks::Pixel> subsample(const std::vector<masks::Pixel>& px,
                                    std::size_t cap, std::uint64_t seed) {
  if (px.size() <= cap) return px;
  std::vector<std::size_t> idx(px.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (std::size_t i = 0; i < cap; ++i)
    std::swap(idx[i], idx[static_cast<std::size_t>(
                          rng.uniform_int(static_cast<std::int64_t>(i),
                                          static_cast<std::int64_t>(px.size() - 1)))]);
  idx.resize(cap);
  std::sort(idx.begin(), idx.end());
  std::vector<masks::Pixel> out;
  out.reserve(cap);
  for (std::size_t i : idx) out.push_back(px[i]);
  return out;
}

// Per-pixel NCE averaged over anchor pixels. Gradient sinks are n x C
// row-major buffers aligned with each RegionPixels' coords (may be null).
double pixel_nce(const RegionPixels& anchor, const RegionPixels& positive,
                 std::span<const RegionPixels* const> negatives, double tau,
                 std::vector<double>* d_anchor, std::vector<double>* d_positive,
                 std::span<std::vector<double>* const> d_negatives) {
  const std::size_t c_dim = anchor.channels();
  const std::size_t n = anchor.size();
  if (positive.size() != n || positive.channels() != c_dim)
    throw ShapeError("pixel contrast: positive does not align with anchor");
  std::size_t total_neg = 0;
  for (const RegionPixels* r : negatives) {
    if (r->channels() != c_dim) throw ShapeError("pixel contrast: channel mismatch");
    total_neg += r->size();
  }
  if (total_neg == 0) return 0.0;

  // Gather features once.
  auto gather = [c_dim](const RegionPixels& r) {
    std::vector<double> f(r.size() * c_dim);
    for (std::size_t i = 0; i < r.size(); ++i)
      for (std::size_t c = 0; c < c_dim; ++c) f[i * c_dim + c] = r.feature(i, c);
    return f;
  };
  const std::vector<double> fa = gather(anchor), fp = gather(positive);
  std::vector<std::vector<double>> fn;
  for (const RegionPixels* r : negatives) fn.push_back(gather(*r));

  double total = 0.0;
  std::vector<double> dneg(total_neg);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::span<const double> a(&fa[i * c_dim], c_dim);
    const double dpos = squared_euclidean(a, std::span<const double>(&fp[i * c_dim], c_dim));
    std::size_t k = 0;
    for (std::size_t r = 0; r < fn.size(); ++r)
      for (std::size_t j = 0; j < negatives[r]->size(); ++j)
        dneg[k++] = squared_euclidean(a, std::span<const double>(&fn[r][j * c_dim], c_dim));
    const NceTerm t = nce_from_distances(dpos, dneg, tau);
    total += t.loss;
    if (!d_anchor) continue;
    // d/da ||a - b||^2 = 2 (a - b)
    for (std::size_t c = 0; c < c_dim; ++c) {
      const double diff = fa[i * c_dim + c] - fp[i * c_dim + c];
      (*d_anchor)[i * c_dim + c] += inv_n * t.d_positive * 2.0 * diff;
      (*d_positive)[i * c_dim + c] -= inv_n * t.d_positive * 2.0 * diff;
    }
    k = 0;
    for (std::size_t r = 0; r < fn.size(); ++r)
      for (std::size_t j = 0; j < negatives[r]->size(); ++j, ++k) {
        const double w = inv_n * t.d_negatives[k] * 2.0;
        for (std::size_t c = 0; c < c_dim; ++c) {
          const double diff = fa[i * c_dim + c] - fn[r][j * c_dim + c];
          (*d_anchor)[i * c_dim + c] += w * diff;
          (*d_negatives[r])[j * c_dim + c] -= w * diff;
        }
      }
  }
  return total * inv_n;
}

}  // namespace

void ContrastConfig::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("contrast: tau must be > 0");
  if (max_neg_pixels == 0) throw ConfigError("contrast: max_neg_pixels must be positive");
  if (min_region_cells == 0) throw ConfigError("contrast: min_region_cells must be positive");
  if (!(eps >= 0.0)) throw ConfigError("contrast: eps must be >= 0");
}

NceTerm nce_from_distances(double d_positive, std::span<const double> d_negatives,
                           double tau) {
  NceTerm t;
  t.d_negatives.assign(d_negatives.size(), 0.0);
  if (d_negatives.empty()) return t;
  require_finite(d_positive, "positive");
  // z_0 = 0 for the positive, z_k = (d+ - d-_k) / tau for negatives.
  std::vector<double> z(d_negatives.size());
  for (std::size_t k = 0; k < z.size(); ++k) {
    require_finite(d_negatives[k], "negative");
    z[k] = (d_positive - d_negatives[k]) / tau;
  }
  const double m = std::max(0.0, *std::max_element(z.begin(), z.end()));
  std::vector<double> e(z.size());
  for (std::size_t k = 0; k < z.size(); ++k) e[k] = std::exp(z[k] - m);
  std::vector<double> sorted = e;
  std::sort(sorted.begin(), sorted.end());
  double s = std::exp(-m);
  for (double v : sorted) s += v;
  t.loss = m + std::log(s);
  // softmax weights over {z_0, z_k}
  const double s0 = std::exp(-m) / s;
  t.d_positive = (1.0 - s0) / tau;
  for (std::size_t k = 0; k < z.size(); ++k) t.d_negatives[k] = -(e[k] / s) / tau;
  return t;
}

double representation_distance(const RegionGaussian& a, const RegionGaussian& b,
                               const ContrastConfig& cfg) {
  return gaussian_distance(a, b, cfg).value;
}

double nce_region_loss(const RegionGaussian& anchor, const RegionGaussian& positive,
                       std::span<const RegionGaussian> negatives,
                       const ContrastConfig& cfg) {
  cfg.validate();
  const double dp = gaussian_distance(anchor, positive, cfg).value;
  std::vector<double> dn;
  for (const auto& n : negatives) dn.push_back(gaussian_distance(anchor, n, cfg).value);
  return nce_from_distances(dp, dn, cfg.tau).loss;
}

double nce_region_loss(const RegionVector& anchor, const RegionVector& positive,
                       std::span<const RegionVector> negatives,
                       const ContrastConfig& cfg) {
  cfg.validate();
  const double dp = squared_euclidean(anchor.v, positive.v);
  std::vector<double> dn;
  for (const auto& n : negatives) dn.push_back(squared_euclidean(anchor.v, n.v));
  return nce_from_distances(dp, dn, cfg.tau).loss;
}

double nce_region_loss(const RegionPixels& anchor, const RegionPixels& positive,
                       std::span<const RegionPixels> negatives,
                       const ContrastConfig& cfg) {
  cfg.validate();
  std::vector<const RegionPixels*> ptrs;
  for (const auto& n : negatives) ptrs.push_back(&n);
  return pixel_nce(anchor, positive, ptrs, cfg.tau, nullptr, nullptr, {});
}

ContrastResult cross_task_region_contrast(const Tensor& map_a, const Tensor& map_b,
                                          const masks::RegionMask& mask,
                                          const ContrastConfig& cfg,
                                          bool want_grad) {
  cfg.validate();
  if (map_a.rank() != 3 || map_a.shape != map_b.shape)
    throw ShapeError("contrast: maps must share a [C x h x w] shape, got " +
                     shape_string(map_a.shape) + " and " + shape_string(map_b.shape));
  if (mask.height != map_a.dim(1) || mask.width != map_a.dim(2))
    throw ShapeError("contrast: mask " + std::to_string(mask.height) + "x" +
                     std::to_string(mask.width) + " does not match maps " +
                     shape_string(map_a.shape));

  ContrastResult result;
  ContrastReport& rep = result.report;
  if (want_grad) {
    result.grad_a = Tensor(map_a.shape);
    result.grad_b = Tensor(map_b.shape);
  }

  std::vector<std::uint32_t> live;
  for (std::size_t id = 0; id < mask.region_count(); ++id) {
    if (mask.regions[id].size() >= cfg.min_region_cells)
      live.push_back(static_cast<std::uint32_t>(id));
    else
      ++rep.skipped_too_small;
  }
  if (live.size() < 2) {
    rep.skipped_no_negatives = live.size();
    rep.regions_skipped = rep.skipped_too_small + rep.skipped_no_negatives;
    rep.no_contrastable_regions = true;
    return result;
  }
  rep.regions_contrasted = live.size();
  rep.regions_skipped = rep.skipped_too_small;

  // Anchor/positive/negative plan shared by all strategies.
  struct Plan {
    Ref anchor, positive;
    std::vector<Ref> negatives;
    std::uint32_t region_id;
  };
  std::vector<Plan> plans;
  for (int dir = 0; dir < (cfg.symmetric_anchors ? 2 : 1); ++dir) {
    const bool anchor_in_a = dir == 0;
    for (std::size_t i = 0; i < live.size(); ++i) {
      Plan p{{anchor_in_a, i}, {!anchor_in_a, i}, {}, live[i]};
      for (std::size_t j = 0; j < live.size(); ++j) {
        if (j == i) continue;
        p.negatives.push_back({!anchor_in_a, j});
        if (cfg.negative_source == NegativeSource::both_maps)
          p.negatives.push_back({anchor_in_a, j});
      }
      plans.push_back(std::move(p));
    }
  }
  const double weight = 1.0 / static_cast<double>(plans.size());
  const auto& regions = mask.regions;

  switch (cfg.strategy) {
    case Strategy::gaussian: {
      std::vector<RegionGaussian> ga, gb;
      for (std::uint32_t id : live) {
        ga.push_back(regions::fit_region_gaussian(map_a, regions[id], cfg.cov_mode,
                                                  cfg.eps, cfg.min_region_cells, id));
        gb.push_back(regions::fit_region_gaussian(map_b, regions[id], cfg.cov_mode,
                                                  cfg.eps, cfg.min_region_cells, id));
      }
      GaussGrads acc_a, acc_b;
      if (want_grad) {
        acc_a.init(ga);
        acc_b.init(gb);
      }
      auto rep_of = [&](Ref r) -> const RegionGaussian& { return r.in_a ? ga[r.slot] : gb[r.slot]; };
      auto acc_of = [&](Ref r) -> GaussGrads& { return r.in_a ? acc_a : acc_b; };
      for (const Plan& p : plans) {
        const RegionGaussian& anchor = rep_of(p.anchor);
        GaussDistance pos = gaussian_distance(anchor, rep_of(p.positive), cfg);
        std::vector<GaussDistance> negs;
        std::vector<double> dn;
        for (Ref r : p.negatives) {
          negs.push_back(gaussian_distance(anchor, rep_of(r), cfg));
          dn.push_back(negs.back().value);
        }
        const NceTerm t = nce_from_distances(pos.value, dn, cfg.tau);
        rep.terms.push_back({p.region_id, p.anchor.in_a, t.loss});
        if (!want_grad) continue;
        auto push = [&](Ref key, const GaussDistance& d, double coef) {
          GaussGrads& aa = acc_of(p.anchor);
          axpy(aa.dmu[p.anchor.slot], coef, d.grad.dmu1);
          axpy(aa.dsigma[p.anchor.slot], coef, d.grad.dsigma1);
          GaussGrads& kk = acc_of(key);
          axpy(kk.dmu[key.slot], coef, d.grad.dmu2);
          axpy(kk.dsigma[key.slot], coef, d.grad.dsigma2);
        };
        push(p.positive, pos, weight * t.d_positive);
        for (std::size_t k = 0; k < negs.size(); ++k)
          push(p.negatives[k], negs[k], weight * t.d_negatives[k]);
      }
      if (want_grad)
        for (std::size_t s = 0; s < live.size(); ++s) {
          const auto& px = regions[live[s]];
          regions::fit_region_gaussian_backward(map_a, px, ga[s], acc_a.dmu[s],
                                                acc_a.dsigma[s], result.grad_a.values);
          regions::fit_region_gaussian_backward(map_b, px, gb[s], acc_b.dmu[s],
                                                acc_b.dsigma[s], result.grad_b.values);
        }
      break;
    }
    case Strategy::vector: {
      std::vector<RegionVector> va, vb;
      for (std::uint32_t id : live) {
        va.push_back(regions::region_mean_vector(map_a, regions[id], id));
        vb.push_back(regions::region_mean_vector(map_b, regions[id], id));
      }
      const std::size_t c_dim = map_a.dim(0);
      std::vector<std::vector<double>> da(live.size(), std::vector<double>(c_dim, 0.0));
      std::vector<std::vector<double>> db = da;
      auto vec_of = [&](Ref r) -> const RegionVector& { return r.in_a ? va[r.slot] : vb[r.slot]; };
      auto acc_of = [&](Ref r) -> std::vector<double>& { return r.in_a ? da[r.slot] : db[r.slot]; };
      for (const Plan& p : plans) {
        const RegionVector& anchor = vec_of(p.anchor);
        const double dp = squared_euclidean(anchor.v, vec_of(p.positive).v);
        std::vector<double> dn;
        for (Ref r : p.negatives) dn.push_back(squared_euclidean(anchor.v, vec_of(r).v));
        const NceTerm t = nce_from_distances(dp, dn, cfg.tau);
        rep.terms.push_back({p.region_id, p.anchor.in_a, t.loss});
        if (!want_grad) continue;
        auto push = [&](Ref key, double coef) {
          const auto& kv = vec_of(key).v;
          auto& ga = acc_of(p.anchor);
          auto& gk = acc_of(key);
          for (std::size_t c = 0; c < c_dim; ++c) {
            const double g = coef * 2.0 * (anchor.v[c] - kv[c]);
            ga[c] += g;
            gk[c] -= g;
          }
        };
        push(p.positive, weight * t.d_positive);
        for (std::size_t k = 0; k < p.negatives.size(); ++k)
          push(p.negatives[k], weight * t.d_negatives[k]);
      }
      if (want_grad)
        for (std::size_t s = 0; s < live.size(); ++s) {
          regions::region_mean_vector_backward(map_a, regions[live[s]], da[s],
                                               result.grad_a.values);
          regions::region_mean_vector_backward(map_b, regions[live[s]], db[s],
                                               result.grad_b.values);
        }
      break;
    }
    case Strategy::pixel: {
      const std::size_t c_dim = map_a.dim(0);
      for (const Plan& p : plans) {
        const Tensor& anchor_map = p.anchor.in_a ? map_a : map_b;
        const Tensor& partner_map = p.anchor.in_a ? map_b : map_a;
        const auto& anchor_px = regions[live[p.anchor.slot]];
        RegionPixels anchor = regions::region_pixels(anchor_map, anchor_px, p.region_id);
        RegionPixels positive = regions::region_pixels(partner_map, anchor_px, p.region_id);
        std::vector<RegionPixels> negs;
        for (Ref r : p.negatives) {
          const std::uint32_t nid = live[r.slot];
          const std::uint64_t salt =
              (std::uint64_t{p.anchor.in_a} << 63) ^ (std::uint64_t{r.in_a} << 62) ^
              (std::uint64_t{p.region_id} << 31) ^ nid;
          negs.push_back(regions::region_pixels(
              r.in_a ? map_a : map_b,
              subsample(regions[nid], cfg.max_neg_pixels, derive_seed(cfg.seed, salt)), nid));
        }
        std::vector<const RegionPixels*> ptrs;
        for (const auto& n : negs) ptrs.push_back(&n);
        if (!want_grad) {
          const double loss = pixel_nce(anchor, positive, ptrs, cfg.tau, nullptr, nullptr, {});
          rep.terms.push_back({p.region_id, p.anchor.in_a, loss});
          continue;
        }
        std::vector<double> g_anchor(anchor.size() * c_dim, 0.0);
        std::vector<double> g_pos(positive.size() * c_dim, 0.0);
        std::vector<std::vector<double>> g_negs;
        for (const auto& n : negs) g_negs.emplace_back(n.size() * c_dim, 0.0);
        std::vector<std::vector<double>*> g_neg_ptrs;
        for (auto& g : g_negs) g_neg_ptrs.push_back(&g);
        const double loss =
            pixel_nce(anchor, positive, ptrs, cfg.tau, &g_anchor, &g_pos, g_neg_ptrs);
        rep.terms.push_back({p.region_id, p.anchor.in_a, loss});
        auto sink = [&](bool in_a) -> std::vector<double>& {
          return in_a ? result.grad_a.values : result.grad_b.values;
        };
        for (double& v : g_anchor) v *= weight;
        for (double& v : g_pos) v *= weight;
        regions::region_pixels_backward(anchor, g_anchor, sink(p.anchor.in_a));
        regions::region_pixels_backward(positive, g_pos, sink(!p.anchor.in_a));
        for (std::size_t k = 0; k < negs.size(); ++k) {
          for (double& v : g_negs[k]) v *= weight;
          regions::region_pixels_backward(negs[k], g_negs[k], sink(p.negatives[k].in_a));
        }
      }
      break;
    }
  }

  double total = 0.0;
  for (const RegionTerm& t : rep.terms) total += t.loss;
  rep.loss = total / static_cast<double>(rep.terms.size());
  if (!std::isfinite(rep.loss)) throw NumericError("contrast: non-finite loss");
  return result;
}

std::pair<ad::Var, ContrastReport> cross_task_region_contrast(
    ad::Var map_a, ad::Var map_b, const masks::RegionMask& mask,
    const ContrastConfig& cfg) {
  ad::Tape& tape = *map_a.tape;
  const bool want_grad = tape.requires_grad(map_a) || tape.requires_grad(map_b);
  ContrastResult r =
      cross_task_region_contrast(map_a.value(), map_b.value(), mask, cfg, want_grad);
  ContrastReport report = r.report;
  const std::size_t ia = map_a.id, ib = map_b.id;
  ad::Var out = tape.record(
      Tensor({1}, {report.loss}), {map_a, map_b},
      [ia, ib, ga = std::move(r.grad_a.values), gb = std::move(r.grad_b.values)](
          ad::Tape& t, std::span<const double> g) {
        if (auto da = t.grad_sink(ia); !da.empty())
          for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[0] * ga[i];
        if (auto db = t.grad_sink(ib); !db.empty())
          for (std::size_t i = 0; i < db.size(); ++i) db[i] += g[0] * gb[i];
      });
  return {out, std::move(report)};
}

std::vector<TaskPair> pair_schedule(TaskSet labeled, TaskSet unlabeled,
                                    std::size_t num_tasks, Setting setting) {
  if (num_tasks == 0 || num_tasks > 32)
    throw ConfigError("pair_schedule: task count must be in [1, 32]");
  const TaskSet all = num_tasks == 32 ? ~TaskSet{0} : ((TaskSet{1} << num_tasks) - 1);
  if ((labeled | unlabeled) != all || (labeled & unlabeled) != 0)
    throw ConfigError("pair_schedule: labeled and unlabeled sets must partition the tasks");
  std::vector<TaskPair> pairs;
  if (setting == Setting::full) {
    for (std::size_t s = 0; s < num_tasks; ++s)
      for (std::size_t t = 0; t < num_tasks; ++t)
        if (s != t) pairs.push_back({s, t});
    return pairs;
  }
  if (labeled == 0)
    throw ConfigError("pair_schedule: partial setting needs at least one labeled task");
  for (std::size_t s = 0; s < num_tasks; ++s)
    if (labeled >> s & 1u)
      for (std::size_t t = 0; t < num_tasks; ++t)
        if (unlabeled >> t & 1u) pairs.push_back({s, t});
  return pairs;
}

}  // namespace rdc::contrast
