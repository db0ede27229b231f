#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "elasto/losses.hpp"
#include "test_helpers.hpp"

using namespace elasto;
using testutil::random_tensor;
using testutil::smooth_field;

namespace {

// Brute-force LNCC oracle: explicit per-patch two-pass loop, independent of
// the library kernel.
double lncc_oracle(const Tensor<double>& a, const Tensor<double>& b, const PatchSpec& ps) {
  const std::int64_t h = a.dim(0), w = a.dim(1);
  double total = 0;
  std::int64_t n_patches = 0;
  for (std::int64_t r0 = 0; r0 + ps.patch_size <= h; r0 += ps.stride)
    for (std::int64_t c0 = 0; c0 + ps.patch_size <= w; c0 += ps.stride) {
      const std::int64_t n = static_cast<std::int64_t>(ps.patch_size) * ps.patch_size;
      double ma = 0, mb = 0;
      for (int r = 0; r < ps.patch_size; ++r)
        for (int c = 0; c < ps.patch_size; ++c) {
          ma += a.at(r0 + r, c0 + c);
          mb += b.at(r0 + r, c0 + c);
        }
      ma /= n;
      mb /= n;
      double cov = 0, va = 0, vb = 0;
      for (int r = 0; r < ps.patch_size; ++r)
        for (int c = 0; c < ps.patch_size; ++c) {
          const double da = a.at(r0 + r, c0 + c) - ma;
          const double db = b.at(r0 + r, c0 + c) - mb;
          cov += da * db;
          va += da * da;
          vb += db * db;
        }
      cov /= n;
      va /= n;
      vb /= n;
      total += cov / (std::sqrt(va + ps.epsilon * ps.epsilon) * std::sqrt(vb + ps.epsilon * ps.epsilon));
      ++n_patches;
    }
  return total / static_cast<double>(n_patches);
}

// Independent smoothness oracle: direct stencil loops over the common valid
// interior, both mixed orders included, mean over pixels then components.
double roughness_oracle(const Tensor<double>& d) {
  const std::int64_t h = d.dim(0), w = d.dim(1);
  double acc = 0;
  std::int64_t n = 0;
  for (std::int64_t r = 1; r < h - 1; ++r)
    for (std::int64_t c = 1; c < w - 1; ++c) {
      const double dxx = d.at(r, c + 1) - 2 * d.at(r, c) + d.at(r, c - 1);
      const double dyy = d.at(r + 1, c) - 2 * d.at(r, c) + d.at(r - 1, c);
      const double dxy = 0.25 * ((d.at(r + 1, c + 1) - d.at(r + 1, c - 1)) - (d.at(r - 1, c + 1) - d.at(r - 1, c - 1)));
      const double dyx = 0.25 * ((d.at(r + 1, c + 1) - d.at(r - 1, c + 1)) - (d.at(r + 1, c - 1) - d.at(r - 1, c - 1)));
      acc += std::abs(dxx) + std::abs(dxy) + std::abs(dyy) + std::abs(dyx);
      ++n;
    }
  return acc / static_cast<double>(n);
}

double smoothness_oracle(const DisplacementField<double>& d) {
  return 0.5 * (roughness_oracle(d.dy) + roughness_oracle(d.dx));
}

}  // namespace

TEST_CASE("LNCC self- and anti-correlation", "[losses]") {
  PatchSpec ps;
  auto f = random_tensor({64, 64}, 11);
  REQUIRE(std::abs(lncc(f, f, ps) - 1.0) < 1e-6);
  Tensor<double> neg = f;
  neg *= -1.0;
  REQUIRE(std::abs(lncc(f, neg, ps) + 1.0) < 1e-6);
}

TEST_CASE("LNCC matches the brute-force per-patch oracle", "[losses]") {
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    auto a = random_tensor({64, 64}, seed, 2.0, 0.5);
    auto b = random_tensor({64, 64}, seed + 50, 1.5, -0.2);
    for (int stride : {9, 4}) {
      PatchSpec ps{9, stride, 1e-5};
      REQUIRE(std::abs(lncc(a, b, ps) - lncc_oracle(a, b, ps)) < 1e-10);
    }
  }
}

TEST_CASE("LNCC properties: affine invariance, bounds, determinism", "[losses]") {
  PatchSpec ps;
  Rng rng(77);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = random_tensor({45, 45}, 100 + trial);
    const double s = 0.2 + 3.0 * rng.uniform();
    const double c = rng.normal();
    Tensor<double> b = a;
    for (std::int64_t i = 0; i < b.size(); ++i) b[i] = s * a[i] + c;
    REQUIRE(std::abs(lncc(a, b, ps) - 1.0) < 1e-4);  // epsilon-induced slack only

    auto x = random_tensor({45, 45}, 200 + trial);
    const double v = lncc(a, x, ps);
    REQUIRE(v >= -1.0 - ps.epsilon);
    REQUIRE(v <= 1.0 + ps.epsilon);
    REQUIRE(lncc(a, x, ps) == v);  // bit-identical on identical inputs
  }
}

TEST_CASE("LNCC rejects shape mismatch and undersized grids", "[losses]") {
  PatchSpec ps;
  REQUIRE_THROWS_WITH(lncc(Tensor<double>({16, 16}), Tensor<double>({16, 8}), ps),
                      Catch::Matchers::ContainsSubstring("shape error"));
  REQUIRE_THROWS_WITH(lncc(Tensor<double>({4, 4}), Tensor<double>({4, 4}), ps),
                      Catch::Matchers::ContainsSubstring("parameter error"));
}

TEST_CASE("similarity loss bound cases and oracle composition", "[losses]") {
  PatchSpec ps;
  auto pre = random_tensor({36, 36}, 5);

  SECTION("perfect alignment gives zero") {
    auto [total, per_t] = similarity_loss(pre, {pre, pre, pre}, ps);
    REQUIRE(std::abs(total) < 1e-6);
    REQUIRE(per_t.size() == 3);
  }
  SECTION("one aligned, one negated averages to one") {
    Tensor<double> neg = pre;
    neg *= -1.0;
    auto [total, per_t] = similarity_loss(pre, {pre, neg}, ps);
    REQUIRE(std::abs(per_t[0]) < 1e-6);
    REQUIRE(std::abs(per_t[1] - 2.0) < 1e-6);
    REQUIRE(std::abs(total - 1.0) < 1e-6);
  }
  SECTION("random inputs compose 1 - lncc per t") {
    auto w1 = random_tensor({36, 36}, 6);
    auto w2 = random_tensor({36, 36}, 7);
    auto [total, per_t] = similarity_loss(pre, {w1, w2}, ps);
    REQUIRE(std::abs(per_t[0] - (1.0 - lncc_oracle(w1, pre, ps))) < 1e-10);
    REQUIRE(std::abs(per_t[1] - (1.0 - lncc_oracle(w2, pre, ps))) < 1e-10);
    REQUIRE(std::abs(total - 0.5 * (per_t[0] + per_t[1])) < 1e-12);
  }
}

TEST_CASE("consistency loss definition cases", "[losses]") {
  PatchSpec ps;
  const std::int64_t h = 32, w = 32;
  auto z = random_tensor({h, w}, 9);
  std::vector<DisplacementField<double>> zero_disps(2, zero_displacement<double>(h, w));

  SECTION("identical strain maps with zero motion cohere") {
    auto [total, per_t] = consistency_loss<double>({z, z}, zero_disps, ps);
    REQUIRE(std::abs(total) < 1e-6);
  }
  SECTION("single frame contributes nothing") {
    auto [total, per_t] = consistency_loss<double>({z}, {zero_displacement<double>(h, w)}, ps);
    REQUIRE(total == 0.0);
    REQUIRE(per_t.size() == 1);
  }
  SECTION("anti-correlated neighbor strains hit the upper bound") {
    Tensor<double> zneg = z;
    zneg *= -1.0;
    auto [total, per_t] = consistency_loss<double>({z, zneg}, zero_disps, ps);
    REQUIRE(std::abs(per_t[1] - 2.0) < 1e-6);
  }
  SECTION("literal sign mode returns raw LNCC") {
    auto [total, per_t] = consistency_loss<double>({z, z}, zero_disps, ps, /*literal=*/true);
    REQUIRE(std::abs(total - 1.0) < 1e-6);
  }
}

TEST_CASE("smoothness loss vanishes on affine fields and matches the stencil oracle", "[losses]") {
  const std::int64_t h = 40, w = 32;

  SECTION("affine and zero fields give exactly zero") {
    DisplacementField<double> affine = zero_displacement<double>(h, w);
    for (std::int64_t r = 0; r < h; ++r)
      for (std::int64_t c = 0; c < w; ++c) {
        affine.dy.at(r, c) = 0.3 * r - 0.2 * c + 1.0;
        affine.dx.at(r, c) = -0.1 * r + 0.05 * c;
      }
    auto [total, per_t] = smoothness_loss<double>({affine, zero_displacement<double>(h, w)});
    REQUIRE(per_t[0] == 0.0);
    REQUIRE(per_t[1] == 0.0);
    REQUIRE(total == 0.0);
  }
  SECTION("quadratic axial field has constant curvature") {
    const double a = 0.004;
    DisplacementField<double> d = zero_displacement<double>(h, w);
    for (std::int64_t r = 0; r < h; ++r)
      for (std::int64_t c = 0; c < w; ++c) d.dy.at(r, c) = 0.5 * a * static_cast<double>(r) * static_cast<double>(r);
    auto [total, per_t] = smoothness_loss<double>({d});
    // |d2/dy2| = a everywhere, dx component zero, halved by the component mean
    REQUIRE(std::abs(total - 0.5 * a) < 1e-12);
    REQUIRE(std::abs(total - smoothness_oracle(d)) < 1e-10);
  }
  SECTION("random fields match the independent oracle") {
    for (std::uint64_t seed = 3; seed <= 8; ++seed) {
      DisplacementField<double> d{random_tensor({h, w}, seed), random_tensor({h, w}, seed + 40)};
      auto [total, per_t] = smoothness_loss<double>({d});
      REQUIRE(std::abs(total - smoothness_oracle(d)) < 1e-10);
    }
  }
}

TEST_CASE("total loss is the weighted sum", "[losses]") {
  LossWeights w;  // alpha 1.0, beta 0.2, gamma 0.3
  REQUIRE(total_loss(0.5, 0.1, 0.2, w) == Catch::Approx(0.58).margin(1e-12));
  REQUIRE(total_loss(0.0, 0.0, 0.0, w) == 0.0);
  REQUIRE(total_loss(0.7, 123.0, -5.0, LossWeights{1.0, 0.0, 0.0}) == Catch::Approx(0.7));
  REQUIRE_THROWS_WITH(total_loss(0.1, 0.1, 0.1, LossWeights{0, 0, 0}),
                      Catch::Matchers::ContainsSubstring("parameter error"));
}

TEST_CASE("sequence loss bookkeeping: weighted total and per-t traces", "[losses]") {
  const std::int64_t h = 32, w = 32;
  LossConfig cfg;
  ad::Graph<double> g;
  auto pre = g.leaf(random_tensor({h, w}, 1));
  std::vector<ad::Var<double>> warped{g.leaf(random_tensor({h, w}, 2)), g.leaf(random_tensor({h, w}, 3))};
  std::vector<ad::Var<double>> strains{g.leaf(smooth_field(h, w, 0.02, 0.2, 0.3)),
                                       g.leaf(smooth_field(h, w, 0.02, 0.25, 0.2))};
  std::vector<std::pair<ad::Var<double>, ad::Var<double>>> disps{
      {g.leaf(smooth_field(h, w, 0.5, 0.1, 0.2)), g.leaf(smooth_field(h, w, 0.4, 0.2, 0.1))},
      {g.leaf(smooth_field(h, w, 0.6, 0.15, 0.1)), g.leaf(smooth_field(h, w, 0.3, 0.1, 0.15))}};
  auto loss = ad::build_sequence_loss(g, pre, warped, strains, disps, cfg);
  auto b = ad::breakdown_of(loss);

  REQUIRE(b.per_t_sim.size() == 2);
  REQUIRE(b.per_t_con.size() == 2);
  REQUIRE(b.per_t_con[0] == 0.0);
  REQUIRE(b.per_t_smooth.size() == 2);
  const double expect = cfg.weights.alpha * b.l_sim + cfg.weights.beta * b.l_con + cfg.weights.gamma * b.l_smooth;
  REQUIRE(std::abs(b.l_total - expect) <= 1e-6 * std::max(1.0, std::abs(expect)));
  REQUIRE(b.l_sim >= 0.0);
  REQUIRE(b.l_sim <= 2.0);
  REQUIRE(b.l_smooth >= 0.0);
}

TEST_CASE("loss gradients agree with finite differences on 8x8 inputs", "[losses]") {
  const std::int64_t h = 8, w = 8;
  PatchSpec ps{3, 3, 1e-5};
  LossConfig cfg;
  cfg.patch = ps;

  SECTION("lncc gradient in both arguments") {
    auto a0 = random_tensor({h, w}, 31);
    auto b0 = random_tensor({h, w}, 32);
    testutil::check_gradient(a0, [&](ad::Graph<double>& g, ad::Var<double> x) {
      return ad::lncc_op(x, g.leaf(b0), ps);
    }, 1e-6, 1e-5);
    testutil::check_gradient(b0, [&](ad::Graph<double>& g, ad::Var<double> x) {
      return ad::lncc_op(g.leaf(a0), x, ps);
    }, 1e-6, 1e-5);
  }
  SECTION("full loss gradient with respect to one displacement field") {
    // T = 2; the checked leaf is the axial displacement of t = 2
    auto pre0 = testutil::smooth_field(h, w, 1.0, 0.8, 0.7);
    auto post0 = testutil::smooth_field(h, w, 1.0, 0.8, 0.7, 0.25);
    auto dy1 = testutil::smooth_field(h, w, 0.4, 0.5, 0.4, 0.1);
    auto dx1 = testutil::smooth_field(h, w, 0.3, 0.4, 0.5, 0.2);
    auto dy2_0 = testutil::smooth_field(h, w, 0.5, 0.45, 0.35, 0.6);
    auto dx2_0 = testutil::smooth_field(h, w, 0.2, 0.35, 0.45, 0.8);

    testutil::check_gradient(dy2_0, [&](ad::Graph<double>& g, ad::Var<double> dy2) {
      auto pre = g.leaf(pre0);
      auto post = g.leaf(post0);
      std::vector<std::pair<ad::Var<double>, ad::Var<double>>> disps{
          {g.leaf(dy1), g.leaf(dx1)}, {dy2, g.leaf(dx2_0)}};
      std::vector<ad::Var<double>> warped, strains;
      for (auto& [dy, dx] : disps) {
        warped.push_back(ad::warp(post, dy, dx));
        strains.push_back(ad::lsqse(dy, 5));
      }
      return ad::build_sequence_loss(g, pre, warped, strains, disps, cfg).total;
    }, 1e-6, 1e-3);
  }
}
