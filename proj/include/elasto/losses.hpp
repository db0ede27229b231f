// Unsupervised loss components: patch-wise LNCC similarity, motion-compensated
// strain consistency, second-order smoothness, and their weighted total.
//
// The graph builders are the training path; the plain functions evaluate the
// same graph with constant leaves, so evaluation and training agree exactly.
#pragma once

#include <cmath>
#include <optional>
#include <utility>
#include <vector>

#include "elasto/autodiff.hpp"
#include "elasto/fieldops.hpp"

namespace elasto {

struct PatchSpec {
  int patch_size = 9;     // odd, >= 3
  int stride = 9;         // >= 1; default tiles without overlap
  double epsilon = 1e-5;  // variance-floor stabilizer for the sigma denominators
};

inline void validate_patch_spec(const PatchSpec& ps) {
  if (ps.patch_size < 3 || ps.patch_size % 2 == 0) throw_config("parameter error: patch_size must be odd and >= 3");
  if (ps.stride < 1) throw_config("parameter error: stride must be >= 1");
  if (!(ps.epsilon > 0.0) || ps.epsilon > 1e-2) throw_config("parameter error: epsilon must be in (0, 1e-2]");
}

struct LossWeights {
  double alpha = 1.0;  // similarity
  double beta = 0.2;   // consistency
  double gamma = 0.3;  // smoothness
};

inline void validate_loss_weights(const LossWeights& w) {
  if (w.alpha < 0 || w.beta < 0 || w.gamma < 0 || !(w.alpha + w.beta + w.gamma > 0))
    throw_config("parameter error: loss weights must be nonnegative and not all zero");
}

struct LossConfig {
  LossWeights weights;
  PatchSpec patch;
  // The consistency term as printed rewards dissimilarity when minimized;
  // the default flips it to 1 - LNCC. The literal form stays available for
  // fidelity experiments.
  bool literal_consistency_sign = false;
};

struct LossBreakdown {
  double l_sim = 0, l_con = 0, l_smooth = 0, l_total = 0;
  std::vector<double> per_t_sim, per_t_con, per_t_smooth;  // per_t_con[0] == 0 (no predecessor)
};

// ---------------------------------------------------------------------------
// LNCC kernel: mean over tiled patches of the normalized correlation of
// zero-meaned patches; each sigma is stabilized as sqrt(var + eps^2).

namespace lncc_detail {

template <typename T>
struct PatchGrid {
  std::int64_t h, w;
  int patch, stride;
  std::int64_t nr, nc;

  PatchGrid(const Tensor<T>& a, const PatchSpec& ps) {
    validate_patch_spec(ps);
    h = a.dim(0);
    w = a.dim(1);
    patch = ps.patch_size;
    stride = ps.stride;
    nr = h >= patch ? (h - patch) / stride + 1 : 0;
    nc = w >= patch ? (w - patch) / stride + 1 : 0;
    if (nr == 0 || nc == 0) throw_config("parameter error: no full patch fits the grid");
  }
  std::int64_t count() const { return nr * nc; }
};

template <typename T>
struct PatchStats {
  T mu_a, mu_b, cov, var_a, var_b, sa, sb;
};

template <typename T>
PatchStats<T> patch_stats(const T* a, const T* b, std::int64_t w, int patch, double eps) {
  const std::int64_t n = static_cast<std::int64_t>(patch) * patch;
  T sum_a = T(0), sum_b = T(0);
  for (int r = 0; r < patch; ++r)
    for (int c = 0; c < patch; ++c) {
      sum_a += a[r * w + c];
      sum_b += b[r * w + c];
    }
  PatchStats<T> s;
  s.mu_a = sum_a / static_cast<T>(n);
  s.mu_b = sum_b / static_cast<T>(n);
  T cov = T(0), va = T(0), vb = T(0);
  for (int r = 0; r < patch; ++r)
    for (int c = 0; c < patch; ++c) {
      const T da = a[r * w + c] - s.mu_a;
      const T db = b[r * w + c] - s.mu_b;
      cov += da * db;
      va += da * da;
      vb += db * db;
    }
  s.cov = cov / static_cast<T>(n);
  s.var_a = va / static_cast<T>(n);
  s.var_b = vb / static_cast<T>(n);
  const T e2 = static_cast<T>(eps * eps);
  s.sa = std::sqrt(s.var_a + e2);
  s.sb = std::sqrt(s.var_b + e2);
  return s;
}

template <typename T>
T forward(const Tensor<T>& a, const Tensor<T>& b, const PatchSpec& ps) {
  PatchGrid<T> grid(a, ps);
  T acc = T(0);
  for (std::int64_t pr = 0; pr < grid.nr; ++pr)
    for (std::int64_t pc = 0; pc < grid.nc; ++pc) {
      const std::int64_t off = (pr * grid.stride) * grid.w + pc * grid.stride;
      const auto s = patch_stats(a.data() + off, b.data() + off, grid.w, grid.patch, ps.epsilon);
      acc += s.cov / (s.sa * s.sb);
    }
  return acc / static_cast<T>(grid.count());
}

template <typename T>
void backward(const Tensor<T>& a, const Tensor<T>& b, const PatchSpec& ps, T g,
              Tensor<T>* ga, Tensor<T>* gb) {
  PatchGrid<T> grid(a, ps);
  const T gn = g / static_cast<T>(grid.count());
  const T e2 = static_cast<T>(ps.epsilon * ps.epsilon);
  const std::int64_t n = static_cast<std::int64_t>(grid.patch) * grid.patch;
  for (std::int64_t pr = 0; pr < grid.nr; ++pr)
    for (std::int64_t pc = 0; pc < grid.nc; ++pc) {
      const std::int64_t off = (pr * grid.stride) * grid.w + pc * grid.stride;
      const T* pa = a.data() + off;
      const T* pb = b.data() + off;
      const auto s = patch_stats(pa, pb, grid.w, grid.patch, ps.epsilon);
      const T inv = gn / (static_cast<T>(n) * s.sa * s.sb);
      const T ca = s.cov / (s.var_a + e2);
      const T cb = s.cov / (s.var_b + e2);
      for (int r = 0; r < grid.patch; ++r)
        for (int c = 0; c < grid.patch; ++c) {
          const std::int64_t i = off + r * grid.w + c;
          const T da = a[i] - s.mu_a;
          const T db = b[i] - s.mu_b;
          if (ga) (*ga)[i] += inv * (db - ca * da);
          if (gb) (*gb)[i] += inv * (da - cb * db);
        }
    }
}

}  // namespace lncc_detail

// Plain LNCC in [-1, 1] (up to epsilon-induced slack).
template <typename T>
T lncc(const Tensor<T>& a, const Tensor<T>& b, const PatchSpec& ps) {
  if (a.rank() != 2 || !a.same_shape(b)) throw_config("shape error: lncc shape mismatch");
  return lncc_detail::forward(a, b, ps);
}

namespace ad {

template <typename T>
Var<T> lncc_op(Var<T> a, Var<T> b, const PatchSpec& ps) {
  if (a.value().rank() != 2 || !a.value().same_shape(b.value()))
    throw_config("shape error: lncc shape mismatch");
  Tensor<T> out({1});
  out[0] = lncc_detail::forward(a.value(), b.value(), ps);
  Node<T>*pa = a.node(), *pb = b.node();
  return a.graph()->make(std::move(out), {pa, pb}, [pa, pb, ps](Node<T>& self) {
    auto* ga = sink(pa);
    auto* gb = sink(pb);
    if (ga || gb) lncc_detail::backward(pa->value, pb->value, ps, self.grad[0], ga, gb);
  });
}

// |dxx| + |dxy| + |dyy| + |dyx| averaged over the common valid interior of a
// [H,W] grid; second differences use [1,-2,1], mixed terms apply centered
// first differences in both orders.
template <typename T>
Var<T> second_order_roughness(Var<T> d) {
  const auto& v = d.value();
  if (v.rank() != 2) throw_config("shape error: roughness expects a 2-D grid");
  const std::int64_t h = v.dim(0), w = v.dim(1);
  if (h < 3 || w < 3) throw_config("shape error: grid too small for second differences");

  auto cx = [&](Var<T> x, std::int64_t dr, std::int64_t dc, std::int64_t nh, std::int64_t nw) {
    return crop_hw(x, dr, dc, nh, nw);
  };
  // dxx on [H, W-2], then rows cropped to the interior
  Var<T> dxx = add(add(cx(d, 0, 2, h, w - 2), cx(d, 0, 0, h, w - 2)), scale(cx(d, 0, 1, h, w - 2), -2.0));
  dxx = crop_hw(dxx, 1, 0, h - 2, w - 2);
  // dyy on [H-2, W], then cols cropped
  Var<T> dyy = add(add(cx(d, 2, 0, h - 2, w), cx(d, 0, 0, h - 2, w)), scale(cx(d, 1, 0, h - 2, w), -2.0));
  dyy = crop_hw(dyy, 0, 1, h - 2, w - 2);
  // centered first differences
  Var<T> ddx = scale(sub(cx(d, 0, 2, h, w - 2), cx(d, 0, 0, h, w - 2)), 0.5);          // [H, W-2]
  Var<T> ddy = scale(sub(cx(d, 2, 0, h - 2, w), cx(d, 0, 0, h - 2, w)), 0.5);          // [H-2, W]
  Var<T> dxy = scale(sub(cx(ddx, 2, 0, h - 2, w - 2), cx(ddx, 0, 0, h - 2, w - 2)), 0.5);
  Var<T> dyx = scale(sub(cx(ddy, 0, 2, h - 2, w - 2), cx(ddy, 0, 0, h - 2, w - 2)), 0.5);

  Var<T> total = add(add(abs_(dxx), abs_(dxy)), add(abs_(dyy), abs_(dyx)));
  return mean_all(total);
}

template <typename T>
struct SequenceLoss {
  Var<T> sim, con, smooth, total;
  std::vector<Var<T>> per_t_sim;     // size T
  std::vector<Var<T>> per_t_con;     // size T-1 (terms for t = 2..T)
  std::vector<Var<T>> per_t_smooth;  // size T
};

// pre / warped: [H,W] frames; strains: [H,W]; disps: (dy, dx) pairs.
template <typename T>
SequenceLoss<T> build_sequence_loss(Graph<T>& g, Var<T> pre,
                                    const std::vector<Var<T>>& warped,
                                    const std::vector<Var<T>>& strains,
                                    const std::vector<std::pair<Var<T>, Var<T>>>& disps,
                                    const LossConfig& cfg) {
  validate_loss_weights(cfg.weights);
  const std::size_t t_count = warped.size();
  if (t_count == 0 || strains.size() != t_count || disps.size() != t_count)
    throw_config("shape error: loss inputs disagree on T");

  SequenceLoss<T> out;

  // similarity: mean over t of 1 - LNCC(warped_t, pre)
  Var<T> sim_sum;
  for (std::size_t t = 0; t < t_count; ++t) {
    Var<T> term = add_const(neg(lncc_op(warped[t], pre, cfg.patch)), 1.0);
    out.per_t_sim.push_back(term);
    sim_sum = t == 0 ? term : add(sim_sum, term);
  }
  out.sim = scale(sim_sum, 1.0 / static_cast<double>(t_count));

  // consistency: strain maps motion-compensated by their own fields
  if (t_count >= 2) {
    std::vector<Var<T>> compensated;
    compensated.reserve(t_count);
    for (std::size_t t = 0; t < t_count; ++t)
      compensated.push_back(warp(strains[t], disps[t].first, disps[t].second));
    Var<T> con_sum;
    for (std::size_t t = 1; t < t_count; ++t) {
      Var<T> corr = lncc_op(compensated[t], compensated[t - 1], cfg.patch);
      Var<T> term = cfg.literal_consistency_sign ? corr : add_const(neg(corr), 1.0);
      out.per_t_con.push_back(term);
      con_sum = t == 1 ? term : add(con_sum, term);
    }
    out.con = scale(con_sum, 1.0 / static_cast<double>(t_count - 1));
  } else {
    out.con = g.leaf(Tensor<T>({1}), false);
  }

  // smoothness over both displacement components
  Var<T> smooth_sum;
  for (std::size_t t = 0; t < t_count; ++t) {
    Var<T> term = scale(add(second_order_roughness(disps[t].first), second_order_roughness(disps[t].second)), 0.5);
    out.per_t_smooth.push_back(term);
    smooth_sum = t == 0 ? term : add(smooth_sum, term);
  }
  out.smooth = scale(smooth_sum, 1.0 / static_cast<double>(t_count));

  out.total = add(add(scale(out.sim, cfg.weights.alpha), scale(out.con, cfg.weights.beta)),
                  scale(out.smooth, cfg.weights.gamma));
  return out;
}

template <typename T>
LossBreakdown breakdown_of(const SequenceLoss<T>& loss) {
  LossBreakdown b;
  b.l_sim = static_cast<double>(loss.sim.item());
  b.l_con = static_cast<double>(loss.con.item());
  b.l_smooth = static_cast<double>(loss.smooth.item());
  b.l_total = static_cast<double>(loss.total.item());
  for (const auto& v : loss.per_t_sim) b.per_t_sim.push_back(static_cast<double>(v.item()));
  b.per_t_con.push_back(0.0);  // t = 1 has no predecessor
  for (const auto& v : loss.per_t_con) b.per_t_con.push_back(static_cast<double>(v.item()));
  for (const auto& v : loss.per_t_smooth) b.per_t_smooth.push_back(static_cast<double>(v.item()));
  return b;
}

}  // namespace ad

// ---------------------------------------------------------------------------
// plain (non-graph) operations: evaluate the graph builders on constant leaves

template <typename T>
std::pair<T, std::vector<T>> similarity_loss(const Tensor<T>& pre, const std::vector<Tensor<T>>& warped_posts,
                                             const PatchSpec& ps) {
  for (const auto& wfr : warped_posts)
    if (!wfr.same_shape(pre)) throw_config("shape error: similarity_loss shape mismatch");
  std::vector<T> per_t;
  T acc = T(0);
  for (const auto& wfr : warped_posts) {
    per_t.push_back(T(1) - lncc(wfr, pre, ps));
    acc += per_t.back();
  }
  return {acc / static_cast<T>(warped_posts.size()), per_t};
}

template <typename T>
std::pair<T, std::vector<T>> consistency_loss(const std::vector<Tensor<T>>& strains,
                                              const std::vector<DisplacementField<T>>& disps,
                                              const PatchSpec& ps, bool literal_sign = false) {
  if (strains.size() != disps.size()) throw_config("shape error: consistency_loss inputs disagree on T");
  std::vector<T> per_t(strains.size(), T(0));
  if (strains.size() < 2) return {T(0), per_t};
  std::vector<Tensor<T>> compensated;
  compensated.reserve(strains.size());
  for (std::size_t t = 0; t < strains.size(); ++t) compensated.push_back(warp_bilinear(strains[t], disps[t]));
  T acc = T(0);
  for (std::size_t t = 1; t < strains.size(); ++t) {
    const T corr = lncc(compensated[t], compensated[t - 1], ps);
    per_t[t] = literal_sign ? corr : T(1) - corr;
    acc += per_t[t];
  }
  return {acc / static_cast<T>(strains.size() - 1), per_t};
}

template <typename T>
std::pair<T, std::vector<T>> smoothness_loss(const std::vector<DisplacementField<T>>& disps) {
  std::vector<T> per_t;
  T acc = T(0);
  for (const auto& d : disps) {
    ad::Graph<T> g;
    ad::Var<T> term = ad::scale(ad::add(ad::second_order_roughness(g.leaf(d.dy)),
                                        ad::second_order_roughness(g.leaf(d.dx))),
                                0.5);
    per_t.push_back(term.item());
    acc += per_t.back();
  }
  return {acc / static_cast<T>(disps.size()), per_t};
}

template <typename T>
T total_loss(T l_sim, T l_con, T l_smooth, const LossWeights& w) {
  validate_loss_weights(w);
  if (!std::isfinite(static_cast<double>(l_sim)) || !std::isfinite(static_cast<double>(l_con)) ||
      !std::isfinite(static_cast<double>(l_smooth)))
    throw_config("parameter error: non-finite loss component");
  return static_cast<T>(w.alpha) * l_sim + static_cast<T>(w.beta) * l_con + static_cast<T>(w.gamma) * l_smooth;
}

}  // namespace elasto
