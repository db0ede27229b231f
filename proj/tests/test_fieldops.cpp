#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "elasto/fieldops.hpp"
#include "test_helpers.hpp"

using namespace elasto;
using testutil::random_tensor;
using testutil::smooth_field;

namespace {

// independent per-window regression oracle: two-pass normal equations
double window_slope(const Tensor<double>& dy, std::int64_t r0, std::int64_t c, int k) {
  double mu_u = 0, mu_d = 0;
  for (int u = 0; u < k; ++u) {
    mu_u += u;
    mu_d += dy.at(r0 + u, c);
  }
  mu_u /= k;
  mu_d /= k;
  double num = 0, den = 0;
  for (int u = 0; u < k; ++u) {
    num += (u - mu_u) * (dy.at(r0 + u, c) - mu_d);
    den += (u - mu_u) * (u - mu_u);
  }
  return num / den;
}

}  // namespace

TEST_CASE("warp with zero displacement is bit-exact identity", "[fieldops]") {
  auto frame = random_tensor({24, 20}, 3);
  auto disp = zero_displacement<double>(24, 20);
  auto out = warp_bilinear(frame, disp);
  for (std::int64_t i = 0; i < frame.size(); ++i) REQUIRE(out[i] == frame[i]);

  Tensor<float> ff({24, 20});
  for (std::int64_t i = 0; i < ff.size(); ++i) ff[i] = static_cast<float>(frame[i]);
  auto outf = warp_bilinear(ff, zero_displacement<float>(24, 20));
  for (std::int64_t i = 0; i < ff.size(); ++i) REQUIRE(outf[i] == ff[i]);
}

TEST_CASE("integer axial shift on a ramp clamps at the border", "[fieldops]") {
  const std::int64_t h = 16, w = 8;
  Tensor<double> ramp({h, w});
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t c = 0; c < w; ++c) ramp.at(r, c) = static_cast<double>(r);
  auto disp = zero_displacement<double>(h, w);
  disp.dy.fill(1.0);
  auto out = warp_bilinear(ramp, disp);
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t c = 0; c < w; ++c)
      REQUIRE(out.at(r, c) == static_cast<double>(std::min(r + 1, h - 1)));

  disp.dy.fill(0.5);
  out = warp_bilinear(ramp, disp);
  for (std::int64_t r = 0; r < h - 1; ++r)
    for (std::int64_t c = 0; c < w; ++c) REQUIRE(out.at(r, c) == Catch::Approx(r + 0.5).margin(1e-12));
}

TEST_CASE("bilinear warp reproduces affine images exactly", "[fieldops]") {
  const std::int64_t h = 20, w = 16;
  const double alpha = 0.7, beta = -0.3, gamma = 2.0;
  Tensor<double> frame({h, w});
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t c = 0; c < w; ++c) frame.at(r, c) = alpha * r + beta * c + gamma;

  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    DisplacementField<double> disp{random_tensor({h, w}, seed, 0.8), random_tensor({h, w}, seed + 100, 0.8)};
    auto out = warp_bilinear(frame, disp);
    for (std::int64_t r = 2; r < h - 2; ++r)
      for (std::int64_t c = 2; c < w - 2; ++c) {
        const double y = r + disp.dy.at(r, c), x = c + disp.dx.at(r, c);
        if (y < 0 || y > h - 1 || x < 0 || x > w - 1) continue;
        REQUIRE(std::abs(out.at(r, c) - (alpha * y + beta * x + gamma)) < 1e-12);
      }
  }
}

TEST_CASE("warp shape mismatch is rejected", "[fieldops]") {
  Tensor<double> frame({16, 16});
  DisplacementField<double> disp = zero_displacement<double>(16, 8);
  REQUIRE_THROWS_WITH(warp_bilinear(frame, disp), Catch::Matchers::ContainsSubstring("shape error"));
}

TEST_CASE("upsampled warping degenerate and identity cases", "[fieldops]") {
  auto frame = random_tensor({20, 18}, 5);
  DisplacementField<double> disp{random_tensor({20, 18}, 6, 0.4), random_tensor({20, 18}, 7, 0.4)};

  SECTION("factor 1 equals warp_bilinear bit-exactly") {
    auto a = warp_upsampled(frame, disp, 1);
    auto b = warp_bilinear(frame, disp);
    for (std::int64_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == b[i]);
  }
  SECTION("factor 4 with zero displacement returns the input within 1e-5") {
    auto out = warp_upsampled(frame, zero_displacement<double>(20, 18), 4);
    for (std::int64_t i = 0; i < out.size(); ++i) REQUIRE(std::abs(out[i] - frame[i]) < 1e-5);
  }
  SECTION("factor < 1 is rejected") {
    REQUIRE_THROWS_WITH(warp_upsampled(frame, disp, 0), Catch::Matchers::ContainsSubstring("parameter error"));
  }
}

TEST_CASE("upsampled warping matches the analytic warp on smooth images", "[fieldops]") {
  // closed-form image and displacement; the analytic oracle evaluates the
  // image at the exactly displaced positions
  const std::int64_t h = 48, w = 40;
  auto image = [](double r, double c) { return std::sin(0.22 * r) * std::cos(0.19 * c); };
  Tensor<double> frame({h, w});
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t c = 0; c < w; ++c) frame.at(r, c) = image(r, c);
  DisplacementField<double> disp{smooth_field(h, w, 0.9, 0.11, 0.13, 0.4),
                                 smooth_field(h, w, 0.7, 0.09, 0.15, 1.1)};

  auto direct = warp_bilinear(frame, disp);
  auto upsampled = warp_upsampled(frame, disp, 4);
  double err_direct = 0, err_up = 0, pair_diff = 0;
  for (std::int64_t r = 4; r < h - 4; ++r)
    for (std::int64_t c = 4; c < w - 4; ++c) {
      const double truth = image(r + disp.dy.at(r, c), c + disp.dx.at(r, c));
      err_direct = std::max(err_direct, std::abs(direct.at(r, c) - truth));
      err_up = std::max(err_up, std::abs(upsampled.at(r, c) - truth));
      pair_diff = std::max(pair_diff, std::abs(upsampled.at(r, c) - direct.at(r, c)));
    }
  // value-preserving bilinear refinement reproduces the coarse interpolant:
  // both routes agree to rounding and carry the same O(h^2) interpolation error
  REQUIRE(pair_diff < 1e-9);
  REQUIRE(err_up <= err_direct + 1e-9);
  REQUIRE(err_direct < 0.02);
}

TEST_CASE("compose_residual is elementwise addition", "[fieldops]") {
  auto base = DisplacementField<double>{random_tensor({16, 16}, 1), random_tensor({16, 16}, 2)};
  auto res = DisplacementField<double>{random_tensor({16, 16}, 3), random_tensor({16, 16}, 4)};
  auto zero = zero_displacement<double>(16, 16);

  SECTION("additive identities") {
    auto a = compose_residual(base, zero);
    auto b = compose_residual(zero, res);
    for (std::int64_t i = 0; i < base.dy.size(); ++i) {
      REQUIRE(a.dy[i] == base.dy[i]);
      REQUIRE(b.dy[i] == res.dy[i]);
    }
  }
  SECTION("commutative; associative on integer-valued fields") {
    auto ab = compose_residual(base, res);
    auto ba = compose_residual(res, base);
    for (std::int64_t i = 0; i < ab.dy.size(); ++i) REQUIRE(ab.dy[i] == ba.dy[i]);

    auto ints = [](std::uint64_t seed) {
      DisplacementField<double> d = zero_displacement<double>(16, 16);
      Rng rng(seed);
      for (std::int64_t i = 0; i < d.dy.size(); ++i) {
        d.dy[i] = static_cast<double>(rng.uniform_int(7)) - 3.0;
        d.dx[i] = static_cast<double>(rng.uniform_int(7)) - 3.0;
      }
      return d;
    };
    auto p = ints(5), q = ints(6), r = ints(7);
    auto left = compose_residual(compose_residual(p, q), r);
    auto right = compose_residual(p, compose_residual(q, r));
    for (std::int64_t i = 0; i < left.dy.size(); ++i) REQUIRE(left.dy[i] == right.dy[i]);
  }
  SECTION("warp of composed field approximates sequential warps on smooth fields") {
    const std::int64_t h = 40, w = 40;
    auto frame = smooth_field(h, w, 1.0, 0.25, 0.21);
    DisplacementField<double> big{smooth_field(h, w, 0.8, 0.07, 0.05), smooth_field(h, w, 0.6, 0.06, 0.08)};
    DisplacementField<double> small{smooth_field(h, w, 0.05, 0.09, 0.04, 0.7),
                                    smooth_field(h, w, 0.05, 0.05, 0.09, 0.2)};
    auto sequential = warp_bilinear(warp_bilinear(frame, big), small);
    auto composed = warp_bilinear(frame, compose_residual(big, small));
    // difference bounded by O(|residual| * |grad base|) plus interpolation slack
    double max_diff = 0;
    for (std::int64_t r = 4; r < h - 4; ++r)
      for (std::int64_t c = 4; c < w - 4; ++c)
        max_diff = std::max(max_diff, std::abs(sequential.at(r, c) - composed.at(r, c)));
    REQUIRE(max_diff < 0.05);
  }
}

TEST_CASE("LSQSE is exact on linear and constant displacement", "[fieldops]") {
  const std::int64_t h = 64, w = 8;
  for (int k : {3, 7, 15, 31}) {
    Tensor<double> dy({h, w});
    const double a = 0.0123;
    for (std::int64_t r = 0; r < h; ++r)
      for (std::int64_t c = 0; c < w; ++c) dy.at(r, c) = a * static_cast<double>(r) + 0.5;
    auto z = lsqse_strain(dy, LsqseConfig{k});
    for (std::int64_t i = 0; i < z.size(); ++i)
      REQUIRE(std::abs(z[i] - a) < 1e-12 * std::abs(a) + 1e-16);
  }
  Tensor<double> flat({h, w}, 4.2);
  auto z = lsqse_strain(flat, LsqseConfig{15});
  for (std::int64_t i = 0; i < z.size(); ++i) REQUIRE(z[i] == 0.0);
}

TEST_CASE("LSQSE midpoint property on quadratic displacement", "[fieldops]") {
  const std::int64_t h = 64, w = 4;
  const double a = 0.002;
  Tensor<double> dy({h, w});
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t c = 0; c < w; ++c) dy.at(r, c) = 0.5 * a * static_cast<double>(r) * static_cast<double>(r);
  const int k = 9;
  auto z = lsqse_strain(dy, LsqseConfig{k});
  for (std::int64_t r = k / 2; r < h - k / 2; ++r)
    REQUIRE(z.at(r, 1) == Catch::Approx(a * static_cast<double>(r)).epsilon(1e-10));
}

TEST_CASE("LSQSE matches the normal-equation oracle on noisy data", "[fieldops]") {
  const std::int64_t h = 96, w = 12;
  const int k = 15;
  Tensor<double> dy({h, w});
  Rng rng(21);
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t c = 0; c < w; ++c) dy.at(r, c) = 0.01 * static_cast<double>(r) + 0.1 * rng.normal();
  auto z = lsqse_strain(dy, LsqseConfig{k});
  const std::int64_t half = k / 2;
  for (std::int64_t c = 0; c < w; ++c) {
    for (std::int64_t r = half; r < h - half; ++r) {
      const double oracle = window_slope(dy, r - half, c, k);
      REQUIRE(std::abs(z.at(r, c) - oracle) <= 1e-10 * std::max(1.0, std::abs(oracle)));
    }
    // replicate-window boundary policy
    for (std::int64_t r = 0; r < half; ++r) REQUIRE(z.at(r, c) == z.at(half, c));
    for (std::int64_t r = h - half; r < h; ++r) REQUIRE(z.at(r, c) == z.at(h - 1 - half, c));
  }
}

TEST_CASE("LSQSE rejects bad windows", "[fieldops]") {
  Tensor<double> dy({32, 4});
  REQUIRE_THROWS_WITH(lsqse_strain(dy, LsqseConfig{4}), Catch::Matchers::ContainsSubstring("parameter error"));
  REQUIRE_THROWS_WITH(lsqse_strain(dy, LsqseConfig{1}), Catch::Matchers::ContainsSubstring("parameter error"));
  REQUIRE_THROWS_WITH(lsqse_strain(dy, LsqseConfig{33}), Catch::Matchers::ContainsSubstring("parameter error"));
}

TEST_CASE("bilinear resize exactness properties", "[fieldops]") {
  auto img = random_tensor({17, 13}, 9);
  SECTION("same-size resize is bit-exact") {
    auto out = bilinear_resize(img, 17, 13);
    for (std::int64_t i = 0; i < img.size(); ++i) REQUIRE(out[i] == img[i]);
  }
  SECTION("refinement then pick-out restores the grid exactly") {
    for (int f : {2, 3, 4}) {
      auto up = bilinear_resize(img, f * (17 - 1) + 1, f * (13 - 1) + 1);
      auto down = bilinear_resize(up, 17, 13);
      for (std::int64_t i = 0; i < img.size(); ++i) REQUIRE(down[i] == Catch::Approx(img[i]).margin(1e-13));
    }
  }
  SECTION("constants are preserved") {
    Tensor<double> flat({9, 9}, 3.25);
    auto up = bilinear_resize(flat, 23, 31);
    for (std::int64_t i = 0; i < up.size(); ++i) REQUIRE(up[i] == 3.25);
  }
}
