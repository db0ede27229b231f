// Deterministic field math: bilinear warping, upsampled warping, residual
// composition, and the least-squares strain estimator. The forward/backward
// kernels here are the single source of truth; the autodiff ops wrap them so
// the evaluation path and the training path agree bit for bit.
#pragma once

#include <cmath>
#include <cstdint>

#include "elasto/rfdata.hpp"
#include "elasto/tensor.hpp"

namespace elasto {

struct LsqseConfig {
  int window = 15;  // odd, >= 3, samples along the axial axis
};

template <typename T>
struct StrainMapT {
  Tensor<T> z;  // [H, W], dimensionless axial strain
};

namespace fieldops {

// ---------------------------------------------------------------------------
// bilinear sampling with clamp-to-border

namespace detail {

template <typename T>
struct SampleTap {
  std::int64_t r0, c0;  // top-left corner of the cell
  T wr, wc;             // fractional weights toward r0+1 / c0+1
  bool r_interior;      // false when the row coordinate was clamped
  bool c_interior;
};

template <typename T>
inline SampleTap<T> make_tap(T y, T x, std::int64_t h, std::int64_t w) {
  SampleTap<T> s;
  s.r_interior = y > T(0) && y < T(h - 1);
  s.c_interior = x > T(0) && x < T(w - 1);
  T yc = std::min(std::max(y, T(0)), T(h - 1));
  T xc = std::min(std::max(x, T(0)), T(w - 1));
  s.r0 = std::min(static_cast<std::int64_t>(std::floor(yc)), h - 2 >= 0 ? h - 2 : 0);
  s.c0 = std::min(static_cast<std::int64_t>(std::floor(xc)), w - 2 >= 0 ? w - 2 : 0);
  s.wr = yc - static_cast<T>(s.r0);
  s.wc = xc - static_cast<T>(s.c0);
  return s;
}

template <typename T>
inline T sample(const T* img, std::int64_t w, const SampleTap<T>& s) {
  const T* p = img + s.r0 * w + s.c0;
  T top = p[0] + s.wc * (p[1] - p[0]);
  T bot = p[w] + s.wc * (p[w + 1] - p[w]);
  return top + s.wr * (bot - top);
}

}  // namespace detail

// out(r,c) = frame(r + dy(r,c), c + dx(r,c)), bilinear, clamp-to-border.
// Multi-channel planes share the same taps.
template <typename T>
void warp_forward(const T* frame, std::int64_t channels, std::int64_t h, std::int64_t w,
                  const T* dy, const T* dx, T* out) {
  for (std::int64_t r = 0; r < h; ++r) {
    for (std::int64_t c = 0; c < w; ++c) {
      const std::int64_t i = r * w + c;
      const auto tap = detail::make_tap<T>(static_cast<T>(r) + dy[i], static_cast<T>(c) + dx[i], h, w);
      for (std::int64_t ch = 0; ch < channels; ++ch)
        out[ch * h * w + i] = detail::sample(frame + ch * h * w, w, tap);
    }
  }
}

// Accumulates gradients; any of g_frame/g_dy/g_dx may be null. Clamped
// coordinates receive zero displacement gradient.
template <typename T>
void warp_backward(const T* frame, std::int64_t channels, std::int64_t h, std::int64_t w,
                   const T* dy, const T* dx, const T* g_out,
                   T* g_frame, T* g_dy, T* g_dx) {
  for (std::int64_t r = 0; r < h; ++r) {
    for (std::int64_t c = 0; c < w; ++c) {
      const std::int64_t i = r * w + c;
      const auto tap = detail::make_tap<T>(static_cast<T>(r) + dy[i], static_cast<T>(c) + dx[i], h, w);
      const std::int64_t base = tap.r0 * w + tap.c0;
      T gy_acc = T(0), gx_acc = T(0);
      for (std::int64_t ch = 0; ch < channels; ++ch) {
        const T g = g_out[ch * h * w + i];
        if (g == T(0)) continue;
        const T* p = frame + ch * h * w + base;
        if (g_frame) {
          T* gf = g_frame + ch * h * w + base;
          gf[0] += g * (T(1) - tap.wr) * (T(1) - tap.wc);
          gf[1] += g * (T(1) - tap.wr) * tap.wc;
          gf[w] += g * tap.wr * (T(1) - tap.wc);
          gf[w + 1] += g * tap.wr * tap.wc;
        }
        if (g_dy && tap.r_interior)
          gy_acc += g * ((p[w] + tap.wc * (p[w + 1] - p[w])) - (p[0] + tap.wc * (p[1] - p[0])));
        if (g_dx && tap.c_interior)
          gx_acc += g * ((p[1] + tap.wr * (p[w + 1] - p[1])) - (p[0] + tap.wr * (p[w] - p[0])));
      }
      if (g_dy) g_dy[i] += gy_acc;
      if (g_dx) g_dx[i] += gx_acc;
    }
  }
}

// ---------------------------------------------------------------------------
// bilinear resize, align-corners convention: in_pos = out_pos * (n-1)/(n'-1).
// Equal sizes reproduce the input exactly; integer-refinement sizes
// (n' = f*(n-1)+1) make downsample-after-upsample an exact grid pick-out.

template <typename T>
void resize_forward(const T* in, std::int64_t channels, std::int64_t h, std::int64_t w,
                    std::int64_t h2, std::int64_t w2, T* out) {
  const double ry = h2 > 1 ? static_cast<double>(h - 1) / static_cast<double>(h2 - 1) : 0.0;
  const double rx = w2 > 1 ? static_cast<double>(w - 1) / static_cast<double>(w2 - 1) : 0.0;
  for (std::int64_t r = 0; r < h2; ++r) {
    for (std::int64_t c = 0; c < w2; ++c) {
      const auto tap = detail::make_tap<T>(static_cast<T>(r * ry), static_cast<T>(c * rx), h, w);
      for (std::int64_t ch = 0; ch < channels; ++ch)
        out[(ch * h2 + r) * w2 + c] = detail::sample(in + ch * h * w, w, tap);
    }
  }
}

template <typename T>
void resize_backward(std::int64_t channels, std::int64_t h, std::int64_t w,
                     std::int64_t h2, std::int64_t w2, const T* g_out, T* g_in) {
  const double ry = h2 > 1 ? static_cast<double>(h - 1) / static_cast<double>(h2 - 1) : 0.0;
  const double rx = w2 > 1 ? static_cast<double>(w - 1) / static_cast<double>(w2 - 1) : 0.0;
  for (std::int64_t r = 0; r < h2; ++r) {
    for (std::int64_t c = 0; c < w2; ++c) {
      const auto tap = detail::make_tap<T>(static_cast<T>(r * ry), static_cast<T>(c * rx), h, w);
      const std::int64_t base = tap.r0 * w + tap.c0;
      for (std::int64_t ch = 0; ch < channels; ++ch) {
        const T g = g_out[(ch * h2 + r) * w2 + c];
        if (g == T(0)) continue;
        T* gi = g_in + ch * h * w + base;
        gi[0] += g * (T(1) - tap.wr) * (T(1) - tap.wc);
        gi[1] += g * (T(1) - tap.wr) * tap.wc;
        gi[w] += g * tap.wr * (T(1) - tap.wc);
        gi[w + 1] += g * tap.wr * tap.wc;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// LSQSE: per-column sliding-window least-squares slope. With a symmetric
// window the slope reduces to sum_u (u/S) * d(r+u, c), S = sum_u u^2.
// Boundary rows replicate the nearest full window.

inline void lsqse_validate(int k, std::int64_t h) {
  if (k < 3 || k % 2 == 0 || k > h) throw_config("parameter error: LSQSE window must be odd, >= 3, <= H");
}

template <typename T>
void lsqse_forward(const T* dy, std::int64_t h, std::int64_t w, int k, T* z) {
  const std::int64_t half = k / 2;
  double s = 0.0;
  for (std::int64_t u = -half; u <= half; ++u) s += static_cast<double>(u * u);
  const T inv_s = static_cast<T>(1.0 / s);
  for (std::int64_t c = 0; c < w; ++c) {
    for (std::int64_t r = half; r < h - half; ++r) {
      T acc = T(0);
      for (std::int64_t u = -half; u <= half; ++u) acc += static_cast<T>(u) * dy[(r + u) * w + c];
      z[r * w + c] = acc * inv_s;
    }
    for (std::int64_t r = 0; r < half; ++r) z[r * w + c] = z[half * w + c];
    for (std::int64_t r = h - half; r < h; ++r) z[r * w + c] = z[(h - 1 - half) * w + c];
  }
}

template <typename T>
void lsqse_backward(std::int64_t h, std::int64_t w, int k, const T* g_z, T* g_dy) {
  const std::int64_t half = k / 2;
  double s = 0.0;
  for (std::int64_t u = -half; u <= half; ++u) s += static_cast<double>(u * u);
  const T inv_s = static_cast<T>(1.0 / s);
  for (std::int64_t c = 0; c < w; ++c) {
    // replicated boundary rows route their gradient through the window they copy
    for (std::int64_t r = half; r < h - half; ++r) {
      T g = g_z[r * w + c];
      if (r == half)
        for (std::int64_t rb = 0; rb < half; ++rb) g += g_z[rb * w + c];
      if (r == h - 1 - half)
        for (std::int64_t rb = h - half; rb < h; ++rb) g += g_z[rb * w + c];
      if (g == T(0)) continue;
      const T gs = g * inv_s;
      for (std::int64_t u = -half; u <= half; ++u) g_dy[(r + u) * w + c] += static_cast<T>(u) * gs;
    }
  }
}

}  // namespace fieldops

// ---------------------------------------------------------------------------
// public tensor-level operations

template <typename T>
Tensor<T> warp_bilinear(const Tensor<T>& frame, const DisplacementField<T>& disp) {
  if (frame.rank() != 2 || !frame.same_shape(disp.dy) || !disp.dy.same_shape(disp.dx))
    throw_config("shape error: warp_bilinear shape mismatch");
  Tensor<T> out = Tensor<T>::zeros_like(frame);
  fieldops::warp_forward(frame.data(), 1, frame.dim(0), frame.dim(1), disp.dy.data(), disp.dx.data(), out.data());
  return out;
}

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& img, std::int64_t h2, std::int64_t w2) {
  if (img.rank() != 2) throw_config("shape error: bilinear_resize expects a 2-D grid");
  if (h2 < 1 || w2 < 1) throw_config("parameter error: resize target must be positive");
  Tensor<T> out({h2, w2});
  fieldops::resize_forward(img.data(), 1, img.dim(0), img.dim(1), h2, w2, out.data());
  return out;
}

// Warp at factor-times refined resolution: frame and displacement are
// bilinearly upsampled on the refinement grid (f*(n-1)+1 so the original
// samples survive exactly), displacement values are rescaled to the finer
// pixel units, then the warped result is sampled back at the original grid.
template <typename T>
Tensor<T> warp_upsampled(const Tensor<T>& frame, const DisplacementField<T>& disp, int factor) {
  if (factor < 1) throw_config("parameter error: upsample factor must be >= 1");
  if (frame.rank() != 2 || !frame.same_shape(disp.dy) || !disp.dy.same_shape(disp.dx))
    throw_config("shape error: warp_upsampled shape mismatch");
  if (factor == 1) return warp_bilinear(frame, disp);
  const std::int64_t h = frame.dim(0), w = frame.dim(1);
  const std::int64_t h2 = factor * (h - 1) + 1, w2 = factor * (w - 1) + 1;
  Tensor<T> uf({h2, w2}), udy({h2, w2}), udx({h2, w2});
  fieldops::resize_forward(frame.data(), 1, h, w, h2, w2, uf.data());
  fieldops::resize_forward(disp.dy.data(), 1, h, w, h2, w2, udy.data());
  fieldops::resize_forward(disp.dx.data(), 1, h, w, h2, w2, udx.data());
  udy *= static_cast<T>(factor);
  udx *= static_cast<T>(factor);
  Tensor<T> warped({h2, w2});
  fieldops::warp_forward(uf.data(), 1, h2, w2, udy.data(), udx.data(), warped.data());
  Tensor<T> out({h, w});
  fieldops::resize_forward(warped.data(), 1, h2, w2, h, w, out.data());
  return out;
}

// Eq.-style residual update: plain elementwise addition.
template <typename T>
DisplacementField<T> compose_residual(const DisplacementField<T>& base, const DisplacementField<T>& residual) {
  if (!base.dy.same_shape(residual.dy) || !base.dx.same_shape(residual.dx))
    throw_config("shape error: compose_residual shape mismatch");
  DisplacementField<T> out = base;
  out.dy += residual.dy;
  out.dx += residual.dx;
  return out;
}

template <typename T>
Tensor<T> lsqse_strain(const Tensor<T>& disp_axial, const LsqseConfig& cfg) {
  if (disp_axial.rank() != 2) throw_config("shape error: lsqse_strain expects a 2-D grid");
  fieldops::lsqse_validate(cfg.window, disp_axial.dim(0));
  Tensor<T> z = Tensor<T>::zeros_like(disp_axial);
  fieldops::lsqse_forward(disp_axial.data(), disp_axial.dim(0), disp_axial.dim(1), cfg.window, z.data());
  return z;
}

// RFFrame conveniences (metadata preserved)
template <typename T>
RFFrame<T> warp_bilinear(const RFFrame<T>& frame, const DisplacementField<T>& disp) {
  return RFFrame<T>{warp_bilinear(frame.samples, disp), frame.axial_spacing, frame.lateral_spacing};
}

template <typename T>
RFFrame<T> warp_upsampled(const RFFrame<T>& frame, const DisplacementField<T>& disp, int factor) {
  return RFFrame<T>{warp_upsampled(frame.samples, disp, factor), frame.axial_spacing, frame.lateral_spacing};
}

}  // namespace elasto
