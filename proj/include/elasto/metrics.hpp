// Strain-image quality metrics: SNR_t, SNR_bg, SNR_e, CNR over elliptical
// ROIs, and the displacement NRMSE. All values are absolute (not dB); SD is
// population (divide by n).
#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "elasto/rfdata.hpp"
#include "elasto/tensor.hpp"

namespace elasto {

namespace metrics_detail {

struct MeanStd {
  double mean, sd;
  std::int64_t n;
};

template <typename T>
MeanStd roi_stats(const Tensor<T>& z, const ROISpec& roi) {
  validate_roi(roi, z.dim(0), z.dim(1));
  double sum = 0.0;
  std::int64_t n = 0;
  for (std::int64_t r = 0; r < z.dim(0); ++r)
    for (std::int64_t c = 0; c < z.dim(1); ++c)
      if (roi.contains(r, c)) {
        sum += static_cast<double>(z.at(r, c));
        ++n;
      }
  if (n < 16) throw_config("roi error: fewer than 16 pixels inside ellipse");
  const double mean = sum / static_cast<double>(n);
  double var = 0.0;
  for (std::int64_t r = 0; r < z.dim(0); ++r)
    for (std::int64_t c = 0; c < z.dim(1); ++c)
      if (roi.contains(r, c)) {
        const double d = static_cast<double>(z.at(r, c)) - mean;
        var += d * d;
      }
  return {mean, std::sqrt(var / static_cast<double>(n)), n};
}

inline MeanStd aggregate(const std::vector<double>& v) {
  double sum = 0.0;
  for (double x : v) sum += x;
  const double mean = v.empty() ? 0.0 : sum / static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return {mean, v.empty() ? 0.0 : std::sqrt(var / static_cast<double>(v.size())),
          static_cast<std::int64_t>(v.size())};
}

}  // namespace metrics_detail

template <typename T>
double snr_target(const Tensor<T>& z, const ROISpec& roi) {
  if (roi.kind != ROISpec::Kind::target) throw_config("roi error: snr_target expects a target ROI");
  const auto s = metrics_detail::roi_stats(z, roi);
  if (s.sd < 1e-12) throw_config("degenerate ROI: zero strain variance");
  return s.mean / s.sd;
}

template <typename T>
double snr_background(const Tensor<T>& z, const ROISpec& roi) {
  if (roi.kind != ROISpec::Kind::background) throw_config("roi error: snr_background expects a background ROI");
  const auto s = metrics_detail::roi_stats(z, roi);
  if (s.sd < 1e-12) throw_config("degenerate ROI: zero strain variance");
  return s.mean / s.sd;
}

template <typename T>
double snr_e(const Tensor<T>& z) {
  double sum = 0.0;
  for (std::int64_t i = 0; i < z.size(); ++i) sum += static_cast<double>(z[i]);
  const double mean = sum / static_cast<double>(z.size());
  double var = 0.0;
  for (std::int64_t i = 0; i < z.size(); ++i) {
    const double d = static_cast<double>(z[i]) - mean;
    var += d * d;
  }
  const double sd = std::sqrt(var / static_cast<double>(z.size()));
  if (sd < 1e-12) throw_config("degenerate map: zero strain variance");
  return mean / sd;
}

template <typename T>
double cnr(const Tensor<T>& z, const ROISpec& target, const ROISpec& background) {
  if (target.kind != ROISpec::Kind::target || background.kind != ROISpec::Kind::background)
    throw_config("roi error: cnr expects (target, background)");
  if (!rois_disjoint(target, background, z.dim(0), z.dim(1)))
    throw_config("roi error: target and background ellipses overlap");
  const auto st = metrics_detail::roi_stats(z, target);
  const auto sb = metrics_detail::roi_stats(z, background);
  const double denom = sb.sd * sb.sd + st.sd * st.sd;
  if (denom < 1e-24) throw_config("degenerate ROI: zero strain variance in both regions");
  const double diff = sb.mean - st.mean;
  return std::sqrt(2.0 * diff * diff / denom);
}

enum class NrmseNorm { literal, gt_rms };

struct NrmseResult {
  double percent = 0.0;
  double masked_fraction = 0.0;  // pixels excluded because |w_GT| <= mask_eps
};

// 100 * RMS of (w_GT - w_est)/w_GT over pixels with |w_GT| > mask_eps. The
// printed denominator is identically one; norm = gt_rms divides by RMS(w_GT)
// over the same support instead.
template <typename T>
NrmseResult nrmse(const Tensor<T>& w_gt, const Tensor<T>& w_est, double mask_eps = 1e-3,
                  NrmseNorm norm = NrmseNorm::literal) {
  if (!w_gt.same_shape(w_est)) throw_config("shape error: nrmse shape mismatch");
  double acc_rel = 0.0, acc_abs = 0.0, acc_gt = 0.0;
  std::int64_t n = 0;
  for (std::int64_t i = 0; i < w_gt.size(); ++i) {
    const double gt = static_cast<double>(w_gt[i]);
    if (std::abs(gt) <= mask_eps) continue;
    const double err = gt - static_cast<double>(w_est[i]);
    acc_rel += (err / gt) * (err / gt);
    acc_abs += err * err;
    acc_gt += gt * gt;
    ++n;
  }
  if (n == 0) throw_data("empty support: all ground-truth pixels below mask_eps");
  NrmseResult r;
  r.masked_fraction = 1.0 - static_cast<double>(n) / static_cast<double>(w_gt.size());
  if (norm == NrmseNorm::literal)
    r.percent = 100.0 * std::sqrt(acc_rel / static_cast<double>(n));
  else
    r.percent = 100.0 * std::sqrt(acc_abs / acc_gt);
  return r;
}

// ---------------------------------------------------------------------------
// per-pair evaluation report (Table-style: per-pair metric, then mean +- SD)

struct MetricAggregate {
  double mean = 0.0;
  double sd = 0.0;
  std::vector<double> per_pair;
  bool present = false;
};

struct MetricsReport {
  int n_pairs = 0;
  MetricAggregate snr_t, snr_bg, cnr, snr_e, nrmse_percent;
  double nrmse_masked_fraction = 0.0;
  std::optional<std::pair<ROISpec, ROISpec>> rois;
};

namespace metrics_detail {

inline void finalize(MetricAggregate& a) {
  if (a.per_pair.empty()) return;
  const auto s = aggregate(a.per_pair);
  a.mean = s.mean;
  a.sd = s.sd;
  a.present = true;
}

}  // namespace metrics_detail

// strains: one map per pair; gt/est axial displacements optional (empty or one
// per pair); rois optional (target, background).
template <typename T>
MetricsReport evaluate_pairwise(const std::vector<Tensor<T>>& strains,
                                const std::vector<std::pair<Tensor<T>, Tensor<T>>>& disp_gt_est,
                                const std::optional<std::pair<ROISpec, ROISpec>>& rois,
                                double mask_eps = 1e-3, NrmseNorm norm = NrmseNorm::literal) {
  if (strains.empty()) throw_config("parameter error: no pairs to evaluate");
  if (!disp_gt_est.empty() && disp_gt_est.size() != strains.size())
    throw_config("shape error: displacement pair count mismatch");
  MetricsReport rep;
  rep.n_pairs = static_cast<int>(strains.size());
  rep.rois = rois;
  double masked_acc = 0.0;
  for (std::size_t i = 0; i < strains.size(); ++i) {
    const auto& z = strains[i];
    rep.snr_e.per_pair.push_back(snr_e(z));
    if (rois) {
      rep.snr_t.per_pair.push_back(snr_target(z, rois->first));
      rep.snr_bg.per_pair.push_back(snr_background(z, rois->second));
      rep.cnr.per_pair.push_back(cnr(z, rois->first, rois->second));
    }
    if (!disp_gt_est.empty()) {
      const auto r = nrmse(disp_gt_est[i].first, disp_gt_est[i].second, mask_eps, norm);
      rep.nrmse_percent.per_pair.push_back(r.percent);
      masked_acc += r.masked_fraction;
    }
  }
  metrics_detail::finalize(rep.snr_t);
  metrics_detail::finalize(rep.snr_bg);
  metrics_detail::finalize(rep.cnr);
  metrics_detail::finalize(rep.snr_e);
  metrics_detail::finalize(rep.nrmse_percent);
  if (!disp_gt_est.empty()) rep.nrmse_masked_fraction = masked_acc / static_cast<double>(disp_gt_est.size());
  return rep;
}

inline nlohmann::json metrics_report_to_json(const MetricsReport& rep) {
  auto agg = [](const MetricAggregate& a) {
    return nlohmann::json{{"mean", a.mean}, {"sd", a.sd}, {"per_pair", a.per_pair}};
  };
  nlohmann::json j{{"n_pairs", rep.n_pairs}, {"snr_e", agg(rep.snr_e)}};
  if (rep.snr_t.present) {
    j["snr_t"] = agg(rep.snr_t);
    j["snr_bg"] = agg(rep.snr_bg);
    j["cnr"] = agg(rep.cnr);
  }
  if (rep.nrmse_percent.present) {
    j["nrmse_percent"] = agg(rep.nrmse_percent);
    j["nrmse_masked_fraction"] = rep.nrmse_masked_fraction;
  }
  if (rep.rois)
    j["rois"] = {{"target", roi_to_json(rep.rois->first)}, {"background", roi_to_json(rep.rois->second)}};
  return j;
}

// one aligned row in Table-I column order: SNR_t, SNR_bg, CNR, NRMSE, SNR_e
inline std::string metrics_report_row(const std::string& label, const MetricsReport& rep) {
  char buf[256];
  auto cell = [](const MetricAggregate& a) {
    char c[40];
    if (!a.present) {
      std::snprintf(c, sizeof c, "%15s", "-");
    } else {
      std::snprintf(c, sizeof c, "%7.2f +- %5.2f", a.mean, a.sd);
    }
    return std::string(c);
  };
  std::snprintf(buf, sizeof buf, "%-12s %s %s %s %s %s", label.c_str(), cell(rep.snr_t).c_str(),
                cell(rep.snr_bg).c_str(), cell(rep.cnr).c_str(), cell(rep.nrmse_percent).c_str(),
                cell(rep.snr_e).c_str());
  return buf;
}

inline std::string metrics_table_header() {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-12s %15s %15s %15s %15s %15s", "model", "SNR_t", "SNR_bg", "CNR",
                "NRMSE", "SNR_e");
  return buf;
}

}  // namespace elasto
