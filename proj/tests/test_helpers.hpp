// Shared test utilities: deterministic random fills and central-difference
// gradient checking against the autodiff engine.
#pragma once

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "elasto/autodiff.hpp"
#include "elasto/tensor.hpp"

namespace testutil {

inline elasto::Tensor<double> random_tensor(std::vector<std::int64_t> shape, std::uint64_t seed,
                                            double scale = 1.0, double offset = 0.0) {
  elasto::Tensor<double> t(std::move(shape));
  elasto::Rng rng(seed);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = offset + scale * rng.normal();
  return t;
}

inline elasto::Tensor<double> smooth_field(std::int64_t h, std::int64_t w, double amp, double fy, double fx,
                                           double phase = 0.0) {
  elasto::Tensor<double> t({h, w});
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t c = 0; c < w; ++c)
      t.at(r, c) = amp * std::sin(fy * static_cast<double>(r) + phase) *
                   std::cos(fx * static_cast<double>(c) + 0.3 * phase);
  return t;
}

// Builds the loss twice per coordinate with perturbed leaves and compares the
// analytic gradient of `build` (a function of the single leaf) against central
// differences. `build` must create everything else it needs from its graph.
using ScalarBuild = std::function<elasto::ad::Var<double>(elasto::ad::Graph<double>&, elasto::ad::Var<double>)>;

struct GradCheckResult {
  double max_rel = 0.0;
  std::int64_t worst_index = -1;
};

inline GradCheckResult check_gradient(const elasto::Tensor<double>& x0, const ScalarBuild& build,
                                      double h = 1e-6, double tol = 1e-5) {
  elasto::Tensor<double> analytic;
  {
    elasto::ad::Graph<double> g;
    auto x = g.leaf(x0, true);
    auto loss = build(g, x);
    g.backward(loss);
    analytic = x.node()->grad;
  }
  auto eval = [&](const elasto::Tensor<double>& xv) {
    elasto::ad::Graph<double> g;
    auto x = g.leaf(xv, false);
    return build(g, x).item();
  };
  GradCheckResult res;
  elasto::Tensor<double> xp = x0;
  for (std::int64_t i = 0; i < x0.size(); ++i) {
    const double step = h * std::max(1.0, std::abs(x0[i]));
    xp[i] = x0[i] + step;
    const double fp = eval(xp);
    xp[i] = x0[i] - step;
    const double fm = eval(xp);
    xp[i] = x0[i];
    const double fd = (fp - fm) / (2.0 * step);
    const double a = analytic[i];
    const double rel = std::abs(a - fd) / std::max({1e-8, std::abs(a), std::abs(fd)});
    if (rel > res.max_rel) {
      res.max_rel = rel;
      res.worst_index = i;
    }
  }
  INFO("max relative gradient error " << res.max_rel << " at index " << res.worst_index);
  CHECK(res.max_rel < tol);
  return res;
}

}  // namespace testutil
