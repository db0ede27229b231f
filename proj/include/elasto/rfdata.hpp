// RF data model and file I/O: frames, sequences, ROIs, dataset manifests.
//
// On-disk sequence layout (bit-exact):
//   manifest.json                {"format_version":1,"H":..,"W":..,"T":..,
//                                 "axial_spacing":..,"lateral_spacing":..,
//                                 "has_ground_truth":..,"source_id":".."}
//   pre.f32, post_0001.f32 ...   raw little-endian float32, row-major [row][col]
//   gt_0001.f32 ...              optional, D_y then D_x concatenated (2*H*W floats)
#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "elasto/common.hpp"
#include "elasto/tensor.hpp"

namespace elasto {

template <typename T>
struct DisplacementField {
  Tensor<T> dy;  // axial, pixels, positive toward increasing row
  Tensor<T> dx;  // lateral, pixels

  std::int64_t rows() const { return dy.dim(0); }
  std::int64_t cols() const { return dy.dim(1); }
};

template <typename T>
DisplacementField<T> zero_displacement(std::int64_t h, std::int64_t w) {
  return DisplacementField<T>{Tensor<T>({h, w}), Tensor<T>({h, w})};
}

template <typename T>
struct RFFrame {
  Tensor<T> samples;            // [H, W]: axial samples x scan lines
  double axial_spacing = 1.0;   // meters per sample
  double lateral_spacing = 1.0; // meters per line

  std::int64_t rows() const { return samples.dim(0); }
  std::int64_t cols() const { return samples.dim(1); }
};

template <typename T>
void validate_frame(const RFFrame<T>& f) {
  if (f.samples.rank() != 2) throw_data("corrupt data: frame is not a 2-D grid");
  if (f.rows() < 16 || f.cols() < 16) throw_data("corrupt data: frame smaller than 16x16");
  if (!(f.axial_spacing > 0.0) || !(f.lateral_spacing > 0.0)) throw_data("corrupt data: non-positive spacing");
  if (!f.samples.all_finite()) throw_data("corrupt data: non-finite sample");
}

template <typename T>
struct RFSequence {
  RFFrame<T> pre;
  std::vector<RFFrame<T>> posts;                          // T frames
  std::vector<DisplacementField<T>> ground_truth;         // empty or size T
  std::string source_id;

  int t_count() const { return static_cast<int>(posts.size()); }
  bool has_ground_truth() const { return !ground_truth.empty(); }
};

template <typename T>
void validate_sequence(const RFSequence<T>& seq) {
  validate_frame(seq.pre);
  if (seq.posts.empty()) throw_data("inconsistent sequence: no post frames");
  for (const auto& f : seq.posts) {
    validate_frame(f);
    if (f.rows() != seq.pre.rows() || f.cols() != seq.pre.cols() ||
        f.axial_spacing != seq.pre.axial_spacing || f.lateral_spacing != seq.pre.lateral_spacing)
      throw_data("inconsistent sequence: frame shape or spacing mismatch");
  }
  if (!seq.ground_truth.empty()) {
    if (seq.ground_truth.size() != seq.posts.size())
      throw_data("inconsistent sequence: ground truth length mismatch");
    for (const auto& d : seq.ground_truth) {
      if (d.dy.rank() != 2 || d.dy.dim(0) != seq.pre.rows() || d.dy.dim(1) != seq.pre.cols() ||
          !d.dy.same_shape(d.dx))
        throw_data("inconsistent sequence: ground truth shape mismatch");
      if (!d.dy.all_finite() || !d.dx.all_finite()) throw_data("corrupt data: non-finite ground truth");
    }
  }
}

// Elliptical region of interest for the strain metrics.
struct ROISpec {
  enum class Kind { target, background };
  double center_row = 0.0;
  double center_col = 0.0;
  double semi_axis_rows = 0.0;
  double semi_axis_cols = 0.0;
  Kind kind = Kind::target;

  bool contains(std::int64_t r, std::int64_t c) const {
    double u = (static_cast<double>(r) - center_row) / semi_axis_rows;
    double v = (static_cast<double>(c) - center_col) / semi_axis_cols;
    return u * u + v * v <= 1.0;
  }
};

inline void validate_roi(const ROISpec& roi, std::int64_t h, std::int64_t w) {
  if (roi.semi_axis_rows < 2.0 || roi.semi_axis_cols < 2.0) throw_config("roi error: semi-axes must be >= 2 px");
  if (roi.center_row - roi.semi_axis_rows < 0.0 || roi.center_row + roi.semi_axis_rows > static_cast<double>(h - 1) ||
      roi.center_col - roi.semi_axis_cols < 0.0 || roi.center_col + roi.semi_axis_cols > static_cast<double>(w - 1))
    throw_config("roi error: ellipse extends outside the frame");
}

inline bool rois_disjoint(const ROISpec& a, const ROISpec& b, std::int64_t h, std::int64_t w) {
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t c = 0; c < w; ++c)
      if (a.contains(r, c) && b.contains(r, c)) return false;
  return true;
}

struct ManifestEntry {
  std::string path;   // sequence directory, relative to the dataset manifest
  std::string split;  // train | val | test
  std::optional<std::pair<ROISpec, ROISpec>> rois;  // (target, background)
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  int format_version = 1;
};

// ---------------------------------------------------------------------------
// sequence directory I/O

namespace detail {

inline std::string post_name(int t) {  // 1-based
  char buf[32];
  std::snprintf(buf, sizeof buf, "post_%04d.f32", t);
  return buf;
}

inline std::string gt_name(int t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "gt_%04d.f32", t);
  return buf;
}

template <typename T>
Tensor<T> tensor_from_f32(const std::vector<float>& v, std::int64_t h, std::int64_t w) {
  if (static_cast<std::int64_t>(v.size()) != h * w) throw_data("format error: blob size mismatch");
  Tensor<T> t({h, w});
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(v[static_cast<std::size_t>(i)]);
  return t;
}

template <typename T>
std::vector<float> f32_from_tensor(const Tensor<T>& t) {
  std::vector<float> v(static_cast<std::size_t>(t.size()));
  for (std::int64_t i = 0; i < t.size(); ++i) v[static_cast<std::size_t>(i)] = static_cast<float>(t[i]);
  return v;
}

}  // namespace detail

template <typename T>
void save_sequence(const RFSequence<T>& seq, const std::filesystem::path& dir) {
  validate_sequence(seq);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw_io("io error: cannot create " + dir.string());

  nlohmann::json j;
  j["format_version"] = 1;
  j["H"] = seq.pre.rows();
  j["W"] = seq.pre.cols();
  j["T"] = seq.t_count();
  j["axial_spacing"] = seq.pre.axial_spacing;
  j["lateral_spacing"] = seq.pre.lateral_spacing;
  j["has_ground_truth"] = seq.has_ground_truth();
  j["source_id"] = seq.source_id;
  {
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out) throw_io("io error: cannot write manifest in " + dir.string());
    out << j.dump(2) << "\n";
  }

  write_f32_blob(dir / "pre.f32", detail::f32_from_tensor(seq.pre.samples));
  for (int t = 1; t <= seq.t_count(); ++t)
    write_f32_blob(dir / detail::post_name(t), detail::f32_from_tensor(seq.posts[static_cast<std::size_t>(t - 1)].samples));
  if (seq.has_ground_truth()) {
    for (int t = 1; t <= seq.t_count(); ++t) {
      const auto& d = seq.ground_truth[static_cast<std::size_t>(t - 1)];
      std::vector<float> blob = detail::f32_from_tensor(d.dy);
      std::vector<float> dx = detail::f32_from_tensor(d.dx);
      blob.insert(blob.end(), dx.begin(), dx.end());
      write_f32_blob(dir / detail::gt_name(t), blob);
    }
  }
}

template <typename T>
RFSequence<T> load_sequence(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw_data("format error: missing manifest.json in " + dir.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception&) {
    throw_data("format error: unparsable manifest.json in " + dir.string());
  }
  for (const char* key : {"format_version", "H", "W", "T", "axial_spacing", "lateral_spacing", "has_ground_truth", "source_id"})
    if (!j.contains(key)) throw_data(std::string("format error: manifest missing key ") + key);
  if (j["format_version"].get<int>() != 1) throw_data("format error: unsupported format_version");

  const auto h = j["H"].get<std::int64_t>();
  const auto w = j["W"].get<std::int64_t>();
  const int t_count = j["T"].get<int>();
  if (t_count < 1) throw_data("format error: T < 1");

  RFSequence<T> seq;
  seq.source_id = j["source_id"].get<std::string>();
  const double ax = j["axial_spacing"].get<double>();
  const double lat = j["lateral_spacing"].get<double>();

  auto load_frame = [&](const std::filesystem::path& p) {
    if (!std::filesystem::exists(p)) throw_data("format error: missing blob " + p.string());
    RFFrame<T> f{detail::tensor_from_f32<T>(read_f32_blob(p), h, w), ax, lat};
    return f;
  };

  seq.pre = load_frame(dir / "pre.f32");
  for (int t = 1; t <= t_count; ++t) seq.posts.push_back(load_frame(dir / detail::post_name(t)));

  if (j["has_ground_truth"].get<bool>()) {
    for (int t = 1; t <= t_count; ++t) {
      const auto p = dir / detail::gt_name(t);
      if (!std::filesystem::exists(p)) throw_data("format error: missing blob " + p.string());
      auto blob = read_f32_blob(p);
      if (static_cast<std::int64_t>(blob.size()) != 2 * h * w) throw_data("format error: ground truth blob size mismatch");
      DisplacementField<T> d;
      d.dy = detail::tensor_from_f32<T>({blob.begin(), blob.begin() + h * w}, h, w);
      d.dx = detail::tensor_from_f32<T>({blob.begin() + h * w, blob.end()}, h, w);
      seq.ground_truth.push_back(std::move(d));
    }
  }
  validate_sequence(seq);
  return seq;
}

// ---------------------------------------------------------------------------
// normalization and pairing

enum class NormalizeMode { zscore, maxabs };

template <typename T>
RFFrame<T> normalize_rf(const RFFrame<T>& frame, NormalizeMode mode) {
  if (!frame.samples.all_finite()) throw_data("corrupt data: non-finite sample");
  RFFrame<T> out = frame;
  const std::int64_t n = frame.samples.size();
  if (mode == NormalizeMode::maxabs) {
    T m = tensor_max_abs(frame.samples);
    if (!(m > T(0))) throw_data("degenerate frame: all-zero under maxabs");
    for (std::int64_t i = 0; i < n; ++i) out.samples[i] = frame.samples[i] / m;
  } else {
    double mean = 0.0;
    for (std::int64_t i = 0; i < n; ++i) mean += static_cast<double>(frame.samples[i]);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      double d = static_cast<double>(frame.samples[i]) - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    if (!(var > 0.0)) throw_data("degenerate frame: zero variance under zscore");
    const double inv_sd = 1.0 / std::sqrt(var);
    for (std::int64_t i = 0; i < n; ++i)
      out.samples[i] = static_cast<T>((static_cast<double>(frame.samples[i]) - mean) * inv_sd);
  }
  return out;
}

// Pairs (I_pre, I_post^t), t = 1..T: the first pre-compression frame is the
// single shared reference.
template <typename T>
struct FramePair {
  const RFFrame<T>* pre;
  const RFFrame<T>* post;
  int t;  // 1-based
};

template <typename T>
std::vector<FramePair<T>> make_pairs(const RFSequence<T>& seq) {
  validate_sequence(seq);
  std::vector<FramePair<T>> pairs;
  pairs.reserve(seq.posts.size());
  for (int t = 1; t <= seq.t_count(); ++t)
    pairs.push_back(FramePair<T>{&seq.pre, &seq.posts[static_cast<std::size_t>(t - 1)], t});
  return pairs;
}

// ---------------------------------------------------------------------------
// ROI and dataset-manifest JSON

inline nlohmann::json roi_to_json(const ROISpec& r) {
  return nlohmann::json{{"center", {r.center_row, r.center_col}},
                        {"semi_axes", {r.semi_axis_rows, r.semi_axis_cols}}};
}

inline ROISpec roi_from_json(const nlohmann::json& j, ROISpec::Kind kind) {
  if (!j.contains("center") || !j.contains("semi_axes")) throw_data("format error: roi missing center/semi_axes");
  ROISpec r;
  r.center_row = j["center"][0].get<double>();
  r.center_col = j["center"][1].get<double>();
  r.semi_axis_rows = j["semi_axes"][0].get<double>();
  r.semi_axis_cols = j["semi_axes"][1].get<double>();
  r.kind = kind;
  return r;
}

// {"target": {...}, "background": {...}}
inline std::pair<ROISpec, ROISpec> roi_pair_from_json(const nlohmann::json& j) {
  if (!j.contains("target") || !j.contains("background")) throw_data("format error: rois missing target/background");
  return {roi_from_json(j["target"], ROISpec::Kind::target),
          roi_from_json(j["background"], ROISpec::Kind::background)};
}

inline DatasetManifest load_dataset_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw_data("format error: missing dataset manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception&) {
    throw_data("format error: unparsable dataset manifest " + path.string());
  }
  DatasetManifest m;
  const nlohmann::json* arr = &j;
  if (j.is_object()) {
    if (!j.contains("entries")) throw_data("format error: dataset manifest object without entries");
    if (j.contains("format_version")) m.format_version = j["format_version"].get<int>();
    arr = &j["entries"];
  }
  if (!arr->is_array()) throw_data("format error: dataset manifest is not an array");
  std::vector<std::string> seen;
  for (const auto& e : *arr) {
    ManifestEntry entry;
    entry.path = e.at("path").get<std::string>();
    entry.split = e.at("split").get<std::string>();
    if (entry.split != "train" && entry.split != "val" && entry.split != "test")
      throw_data("format error: bad split tag '" + entry.split + "'");
    if (std::find(seen.begin(), seen.end(), entry.path) != seen.end())
      throw_data("format error: duplicate path in dataset manifest");
    seen.push_back(entry.path);
    if (e.contains("rois")) entry.rois = roi_pair_from_json(e["rois"]);
    const auto dir = path.parent_path() / entry.path;
    if (!std::filesystem::exists(dir / "manifest.json"))
      throw_data("format error: referenced sequence missing: " + dir.string());
    m.entries.push_back(std::move(entry));
  }
  return m;
}

inline void save_dataset_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : m.entries) {
    nlohmann::json je{{"path", e.path}, {"split", e.split}};
    if (e.rois) je["rois"] = {{"target", roi_to_json(e.rois->first)}, {"background", roi_to_json(e.rois->second)}};
    arr.push_back(je);
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw_io("io error: cannot write " + path.string());
  out << arr.dump(2) << "\n";
}

}  // namespace elasto
