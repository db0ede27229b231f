// Synthetic RF sequence generator with analytically known displacement and
// strain ground truth. A convolution-model stand-in for full acoustic
// simulation: point scatterers splatted through a separable Gaussian-windowed
// cosine PSF, displaced by a piecewise-analytic deformation field.
#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "elasto/common.hpp"
#include "elasto/fieldops.hpp"
#include "elasto/rfdata.hpp"

namespace elasto {

struct InclusionSpec {
  double center_row = 0.0;
  double center_col = 0.0;
  double radius = 0.0;        // pixels
  double strain_ratio = 0.5;  // in (0,1): stiff inclusion strains less
};

struct PulseSpec {
  double center_frequency = 0.10;  // cycles/sample, axial carrier
  double bandwidth_sigma = 3.0;    // samples, axial Gaussian envelope
  double lateral_sigma = 1.2;      // lines, lateral Gaussian envelope
};

struct PhantomSpec {
  std::int64_t h = 64;
  std::int64_t w = 64;
  double scatterer_density = 0.25;  // scatterers per pixel area
  std::optional<InclusionSpec> inclusion;
  double background_strain_per_step = 0.005;  // per post frame
  int t_frames = 3;
  PulseSpec pulse;
  std::uint64_t seed = 1;
  double blend_ramp = 3.0;  // px, smooth transition at the inclusion boundary
  std::string source_id = "phantom";
};

inline void validate_phantom_spec(const PhantomSpec& spec) {
  if (spec.h < 16 || spec.w < 16) throw_config("parameter error: phantom frame must be at least 16x16");
  if (spec.t_frames < 1) throw_config("parameter error: t_frames must be >= 1");
  if (!(spec.scatterer_density > 0.0)) throw_config("parameter error: scatterer density must be positive");
  if (std::abs(spec.background_strain_per_step) * spec.t_frames > 0.05)
    throw_config("parameter error: |strain per step| * T must stay within 5%");
  if (!(spec.pulse.center_frequency > 0.0) || spec.pulse.center_frequency * 2.0 >= 1.0)
    throw_config("parameter error: center frequency must satisfy 0 < 2*f0 < 1");
  if (!(spec.pulse.bandwidth_sigma > 0.0) || !(spec.pulse.lateral_sigma > 0.0))
    throw_config("parameter error: PSF sigmas must be positive");
  if (!(spec.blend_ramp > 0.0)) throw_config("parameter error: blend ramp must be positive");
  if (spec.inclusion) {
    const auto& inc = *spec.inclusion;
    if (!(inc.strain_ratio > 0.0 && inc.strain_ratio < 1.0))
      throw_config("parameter error: strain_ratio must lie in (0,1)");
    if (inc.center_row - inc.radius < 0 || inc.center_row + inc.radius > static_cast<double>(spec.h - 1) ||
        inc.center_col - inc.radius < 0 || inc.center_col + inc.radius > static_cast<double>(spec.w - 1))
      throw_config("parameter error: inclusion circle extends outside the frame");
  }
}

template <typename T>
struct Scatterer {
  T row, col, amplitude;
};

template <typename T>
struct ScattererField {
  std::vector<Scatterer<T>> points;
};

template <typename T>
struct GroundTruthBundle {
  std::vector<DisplacementField<T>> displacements;  // one per post frame
  std::vector<Tensor<T>> strains;                   // analytic axial strain
};

template <typename T>
ScattererField<T> generate_scatterers(const PhantomSpec& spec) {
  validate_phantom_spec(spec);
  const auto count = static_cast<std::int64_t>(
      std::llround(spec.scatterer_density * static_cast<double>(spec.h) * static_cast<double>(spec.w)));
  Rng rng(spec.seed);
  ScattererField<T> field;
  field.points.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    Scatterer<T> s;
    s.row = static_cast<T>(rng.uniform(0.0, static_cast<double>(spec.h)));
    s.col = static_cast<T>(rng.uniform(0.0, static_cast<double>(spec.w)));
    s.amplitude = static_cast<T>(rng.normal());
    field.points.push_back(s);
  }
  return field;
}

namespace phantom_detail {

// local strain magnitude at (row, col): background value outside the
// inclusion, strain_ratio * background inside, smoothstep-blended over a ramp
// of width blend_ramp centered on the circle boundary
inline double local_strain(const PhantomSpec& spec, double row, double col) {
  const double eps = spec.background_strain_per_step;
  if (!spec.inclusion) return eps;
  const auto& inc = *spec.inclusion;
  const double dr = row - inc.center_row;
  const double dc = col - inc.center_col;
  const double dist = std::sqrt(dr * dr + dc * dc);
  double x = (inc.radius + 0.5 * spec.blend_ramp - dist) / spec.blend_ramp;
  x = std::min(1.0, std::max(0.0, x));
  const double blend = x * x * (3.0 - 2.0 * x);  // 1 inside, 0 outside
  return eps * (1.0 - blend * (1.0 - inc.strain_ratio));
}

}  // namespace phantom_detail

// Analytic deformation at step t: axial displacement accumulates the local
// strain down each column, D_y(row, col) = t * integral_0^row eps_local(u, col) du,
// lateral displacement is zero, and the analytic strain is eps_local * t (the
// axial slope of D_y). The integral is evaluated by per-pixel Simpson
// quadrature, exact wherever eps_local is locally smooth.
template <typename T>
std::pair<DisplacementField<T>, Tensor<T>> analytic_displacement(const PhantomSpec& spec, int t) {
  validate_phantom_spec(spec);
  if (t < 1 || t > spec.t_frames) throw_config("step error: t out of range");
  DisplacementField<T> d = zero_displacement<T>(spec.h, spec.w);
  Tensor<T> strain({spec.h, spec.w});
  const double tf = static_cast<double>(t);
  for (std::int64_t c = 0; c < spec.w; ++c) {
    double acc = 0.0;
    d.dy.at(0, c) = T(0);
    for (std::int64_t r = 0; r < spec.h; ++r) {
      strain.at(r, c) = static_cast<T>(tf * phantom_detail::local_strain(spec, static_cast<double>(r),
                                                                         static_cast<double>(c)));
      if (r + 1 < spec.h) {
        const double a = phantom_detail::local_strain(spec, static_cast<double>(r), static_cast<double>(c));
        const double m = phantom_detail::local_strain(spec, static_cast<double>(r) + 0.5, static_cast<double>(c));
        const double b = phantom_detail::local_strain(spec, static_cast<double>(r) + 1.0, static_cast<double>(c));
        acc += (a + 4.0 * m + b) / 6.0;
        d.dy.at(r + 1, c) = static_cast<T>(tf * acc);
      }
    }
  }
  return {std::move(d), std::move(strain)};
}

// Splat each scatterer through the separable PSF; an optional displacement
// field (sampled bilinearly at the scatterer position) moves it first.
template <typename T>
RFFrame<T> render_rf(const ScattererField<T>& scatterers, const DisplacementField<T>* displacement,
                     const PhantomSpec& spec) {
  RFFrame<T> frame{Tensor<T>({spec.h, spec.w}), 1.0, 1.0};
  const double two_pi_f0 = 2.0 * 3.14159265358979323846 * spec.pulse.center_frequency;
  const double inv2sp = 1.0 / (2.0 * spec.pulse.bandwidth_sigma * spec.pulse.bandwidth_sigma);
  const double inv2sl = 1.0 / (2.0 * spec.pulse.lateral_sigma * spec.pulse.lateral_sigma);
  const double axial_reach = 4.0 * spec.pulse.bandwidth_sigma;
  const double lateral_reach = 4.0 * spec.pulse.lateral_sigma;

  for (const auto& s : scatterers.points) {
    double row = static_cast<double>(s.row);
    double col = static_cast<double>(s.col);
    if (displacement) {
      const auto tap = fieldops::detail::make_tap<T>(s.row, s.col, spec.h, spec.w);
      row += static_cast<double>(fieldops::detail::sample(displacement->dy.data(), spec.w, tap));
      col += static_cast<double>(fieldops::detail::sample(displacement->dx.data(), spec.w, tap));
    }
    const auto r_lo = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::ceil(row - axial_reach)));
    const auto r_hi = std::min<std::int64_t>(spec.h - 1, static_cast<std::int64_t>(std::floor(row + axial_reach)));
    const auto c_lo = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::ceil(col - lateral_reach)));
    const auto c_hi = std::min<std::int64_t>(spec.w - 1, static_cast<std::int64_t>(std::floor(col + lateral_reach)));
    for (std::int64_t r = r_lo; r <= r_hi; ++r) {
      const double dr = static_cast<double>(r) - row;
      const double axial = std::cos(two_pi_f0 * dr) * std::exp(-dr * dr * inv2sp);
      for (std::int64_t c = c_lo; c <= c_hi; ++c) {
        const double dc = static_cast<double>(c) - col;
        frame.samples.at(r, c) += static_cast<T>(static_cast<double>(s.amplitude) * axial *
                                                 std::exp(-dc * dc * inv2sl));
      }
    }
  }
  return frame;
}

template <typename T>
struct SimulatedSequence {
  RFSequence<T> sequence;
  GroundTruthBundle<T> ground_truth;
};

template <typename T>
SimulatedSequence<T> simulate_sequence(const PhantomSpec& spec) {
  validate_phantom_spec(spec);
  const auto scatterers = generate_scatterers<T>(spec);
  SimulatedSequence<T> out;
  out.sequence.source_id = spec.source_id;
  out.sequence.pre = render_rf(scatterers, nullptr, spec);
  for (int t = 1; t <= spec.t_frames; ++t) {
    auto [disp, strain] = analytic_displacement<T>(spec, t);
    out.sequence.posts.push_back(render_rf(scatterers, &disp, spec));
    out.sequence.ground_truth.push_back(disp);
    out.ground_truth.displacements.push_back(std::move(disp));
    out.ground_truth.strains.push_back(std::move(strain));
  }
  validate_sequence(out.sequence);
  return out;
}

// ---------------------------------------------------------------------------
// JSON spec (accepted by the simulate CLI)

inline PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
  PhantomSpec s;
  s.h = j.value("h", s.h);
  s.w = j.value("w", s.w);
  s.scatterer_density = j.value("scatterer_density", s.scatterer_density);
  s.background_strain_per_step = j.value("background_strain_per_step", s.background_strain_per_step);
  s.t_frames = j.value("t_frames", s.t_frames);
  s.seed = j.value("seed", s.seed);
  s.blend_ramp = j.value("blend_ramp", s.blend_ramp);
  s.source_id = j.value("source_id", s.source_id);
  if (j.contains("pulse")) {
    const auto& p = j["pulse"];
    s.pulse.center_frequency = p.value("center_frequency", s.pulse.center_frequency);
    s.pulse.bandwidth_sigma = p.value("bandwidth_sigma", s.pulse.bandwidth_sigma);
    s.pulse.lateral_sigma = p.value("lateral_sigma", s.pulse.lateral_sigma);
  }
  if (j.contains("inclusion") && !j["inclusion"].is_null()) {
    const auto& i = j["inclusion"];
    InclusionSpec inc;
    inc.center_row = i.at("center")[0].get<double>();
    inc.center_col = i.at("center")[1].get<double>();
    inc.radius = i.at("radius").get<double>();
    inc.strain_ratio = i.at("strain_ratio").get<double>();
    s.inclusion = inc;
  }
  validate_phantom_spec(s);
  return s;
}

inline nlohmann::json phantom_spec_to_json(const PhantomSpec& s) {
  nlohmann::json j{{"h", s.h},
                   {"w", s.w},
                   {"scatterer_density", s.scatterer_density},
                   {"background_strain_per_step", s.background_strain_per_step},
                   {"t_frames", s.t_frames},
                   {"seed", s.seed},
                   {"blend_ramp", s.blend_ramp},
                   {"source_id", s.source_id},
                   {"pulse",
                    {{"center_frequency", s.pulse.center_frequency},
                     {"bandwidth_sigma", s.pulse.bandwidth_sigma},
                     {"lateral_sigma", s.pulse.lateral_sigma}}}};
  if (s.inclusion)
    j["inclusion"] = {{"center", {s.inclusion->center_row, s.inclusion->center_col}},
                      {"radius", s.inclusion->radius},
                      {"strain_ratio", s.inclusion->strain_ratio}};
  return j;
}

}  // namespace elasto
