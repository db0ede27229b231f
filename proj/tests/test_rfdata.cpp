#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "elasto/rfdata.hpp"
#include "test_helpers.hpp"

using namespace elasto;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("elasto_rfdata_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

template <typename T>
RFSequence<T> make_sequence(std::int64_t h, std::int64_t w, int t_count, std::uint64_t seed,
                            bool with_gt = false) {
  RFSequence<T> seq;
  seq.source_id = "unit";
  Rng rng(seed);
  auto frame = [&] {
    RFFrame<T> f{Tensor<T>({h, w}), 2.5e-5, 3.0e-4};
    for (std::int64_t i = 0; i < f.samples.size(); ++i) f.samples[i] = static_cast<T>(rng.normal());
    return f;
  };
  seq.pre = frame();
  for (int t = 0; t < t_count; ++t) seq.posts.push_back(frame());
  if (with_gt)
    for (int t = 0; t < t_count; ++t) {
      DisplacementField<T> d = zero_displacement<T>(h, w);
      for (std::int64_t i = 0; i < d.dy.size(); ++i) {
        d.dy[i] = static_cast<T>(rng.normal() * 0.1);
        d.dx[i] = static_cast<T>(rng.normal() * 0.1);
      }
      seq.ground_truth.push_back(std::move(d));
    }
  return seq;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("sequence save/load round-trips bit-exactly", "[rfdata]") {
  auto dir = temp_dir("roundtrip");
  auto seq = make_sequence<float>(64, 48, 3, 7, true);
  save_sequence(seq, dir / "s");
  auto loaded = load_sequence<float>(dir / "s");

  REQUIRE(loaded.t_count() == 3);
  REQUIRE(loaded.pre.rows() == 64);
  REQUIRE(loaded.pre.cols() == 48);
  REQUIRE(loaded.source_id == "unit");
  for (std::int64_t i = 0; i < seq.pre.samples.size(); ++i)
    REQUIRE(loaded.pre.samples[i] == seq.pre.samples[i]);
  for (int t = 0; t < 3; ++t)
    for (std::int64_t i = 0; i < seq.posts[0].samples.size(); ++i) {
      REQUIRE(loaded.posts[t].samples[i] == seq.posts[t].samples[i]);
      REQUIRE(loaded.ground_truth[t].dy[i] == seq.ground_truth[t].dy[i]);
      REQUIRE(loaded.ground_truth[t].dx[i] == seq.ground_truth[t].dx[i]);
    }

  // writing the loaded sequence elsewhere produces identical blobs
  save_sequence(loaded, dir / "s2");
  for (const auto& name : {"pre.f32", "post_0001.f32", "post_0003.f32", "gt_0002.f32"})
    REQUIRE(slurp(dir / "s" / name) == slurp(dir / "s2" / name));
}

TEST_CASE("saving twice is idempotent and blob sizes are exact", "[rfdata]") {
  auto dir = temp_dir("idem");
  RFSequence<float> seq;
  seq.source_id = "zeros";
  seq.pre = RFFrame<float>{Tensor<float>({32, 32}), 1.0, 1.0};
  seq.posts.push_back(seq.pre);
  save_sequence(seq, dir / "z");
  auto first = slurp(dir / "z" / "pre.f32");
  save_sequence(seq, dir / "z");
  REQUIRE(slurp(dir / "z" / "pre.f32") == first);
  REQUIRE(fs::file_size(dir / "z" / "pre.f32") == 32 * 32 * 4);
  REQUIRE(fs::file_size(dir / "z" / "post_0001.f32") == 4096);
}

TEST_CASE("malformed directories are rejected", "[rfdata]") {
  auto dir = temp_dir("bad");
  auto seq = make_sequence<float>(32, 32, 5, 3);
  save_sequence(seq, dir / "s");

  SECTION("missing post blob") {
    fs::remove(dir / "s" / "post_0005.f32");
    REQUIRE_THROWS_WITH(load_sequence<float>(dir / "s"), Catch::Matchers::ContainsSubstring("format error"));
  }
  SECTION("missing manifest") {
    fs::remove(dir / "s" / "manifest.json");
    REQUIRE_THROWS_WITH(load_sequence<float>(dir / "s"), Catch::Matchers::ContainsSubstring("format error"));
  }
  SECTION("truncated blob") {
    std::ofstream out(dir / "s" / "post_0002.f32", std::ios::binary | std::ios::trunc);
    out << "zz";
    out.close();
    REQUIRE_THROWS_AS(load_sequence<float>(dir / "s"), Error);
  }
  SECTION("non-finite samples") {
    auto bad = seq;
    bad.posts[1].samples[10] = std::numeric_limits<float>::quiet_NaN();
    REQUIRE_THROWS_WITH(save_sequence(bad, dir / "nan"), Catch::Matchers::ContainsSubstring("corrupt data"));
  }
}

TEST_CASE("in-memory invariants are enforced", "[rfdata]") {
  auto seq = make_sequence<float>(32, 32, 2, 5);
  SECTION("frame shape mismatch") {
    seq.posts[1].samples = Tensor<float>({32, 16});
    REQUIRE_THROWS_WITH(validate_sequence(seq), Catch::Matchers::ContainsSubstring("inconsistent sequence"));
  }
  SECTION("ground truth length mismatch rejected before write") {
    seq.ground_truth.push_back(zero_displacement<float>(32, 32));
    auto dir = temp_dir("gtlen");
    REQUIRE_THROWS_WITH(save_sequence(seq, dir / "s"),
                        Catch::Matchers::ContainsSubstring("inconsistent sequence"));
  }
  SECTION("frames must be at least 16x16") {
    RFFrame<float> small{Tensor<float>({8, 8}), 1.0, 1.0};
    REQUIRE_THROWS_AS(validate_frame(small), Error);
  }
}

TEST_CASE("normalize_rf modes", "[rfdata]") {
  RFFrame<double> f{Tensor<double>({32, 32}), 1.0, 1.0};

  SECTION("maxabs maps constant amplitude to one") {
    f.samples.fill(5.0);
    auto out = normalize_rf(f, NormalizeMode::maxabs);
    for (std::int64_t i = 0; i < out.samples.size(); ++i) REQUIRE(out.samples[i] == 1.0);
  }
  SECTION("zscore removes an affine intensity") {
    Rng rng(9);
    for (std::int64_t i = 0; i < f.samples.size(); ++i) f.samples[i] = 3.0 + 2.0 * rng.normal();
    auto out = normalize_rf(f, NormalizeMode::zscore);
    double mean = 0, var = 0;
    for (std::int64_t i = 0; i < out.samples.size(); ++i) mean += out.samples[i];
    mean /= static_cast<double>(out.samples.size());
    for (std::int64_t i = 0; i < out.samples.size(); ++i) {
      const double d = out.samples[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(out.samples.size());
    REQUIRE(std::abs(mean) < 1e-6);
    REQUIRE(std::abs(std::sqrt(var) - 1.0) < 1e-6);
  }
  SECTION("constant frame under zscore is degenerate") {
    f.samples.fill(1.0);
    REQUIRE_THROWS_WITH(normalize_rf(f, NormalizeMode::zscore),
                        Catch::Matchers::ContainsSubstring("degenerate frame"));
  }
  SECTION("maxabs is idempotent") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      Rng rng(seed);
      for (std::int64_t i = 0; i < f.samples.size(); ++i) f.samples[i] = 10.0 * rng.normal();
      auto once = normalize_rf(f, NormalizeMode::maxabs);
      auto twice = normalize_rf(once, NormalizeMode::maxabs);
      for (std::int64_t i = 0; i < once.samples.size(); ++i)
        REQUIRE(std::abs(once.samples[i] - twice.samples[i]) < 1e-7);
    }
  }
}

TEST_CASE("make_pairs shares one reference frame", "[rfdata]") {
  for (int t_count : {1, 5, 9}) {
    auto seq = make_sequence<float>(32, 32, t_count, 17);
    auto pairs = make_pairs(seq);
    REQUIRE(static_cast<int>(pairs.size()) == t_count);
    for (int t = 0; t < t_count; ++t) {
      REQUIRE(pairs[t].pre == &seq.pre);  // reference-equal
      REQUIRE(pairs[t].post == &seq.posts[t]);
      REQUIRE(pairs[t].t == t + 1);
    }
  }
}

TEST_CASE("dataset manifest round-trip and validation", "[rfdata]") {
  auto dir = temp_dir("manifest");
  save_sequence(make_sequence<float>(32, 32, 2, 1), dir / "a");
  save_sequence(make_sequence<float>(32, 32, 2, 2), dir / "b");

  DatasetManifest m;
  m.entries.push_back({"a", "train", std::nullopt});
  ROISpec tgt{16, 16, 4, 4, ROISpec::Kind::target};
  ROISpec bg{8, 8, 3, 3, ROISpec::Kind::background};
  m.entries.push_back({"b", "test", std::make_pair(tgt, bg)});
  save_dataset_manifest(m, dir / "data.json");

  auto loaded = load_dataset_manifest(dir / "data.json");
  REQUIRE(loaded.entries.size() == 2);
  REQUIRE(loaded.entries[0].split == "train");
  REQUIRE(loaded.entries[1].rois.has_value());
  REQUIRE(loaded.entries[1].rois->first.center_row == 16);

  SECTION("duplicate paths rejected") {
    m.entries.push_back({"a", "val", std::nullopt});
    save_dataset_manifest(m, dir / "dup.json");
    REQUIRE_THROWS_WITH(load_dataset_manifest(dir / "dup.json"),
                        Catch::Matchers::ContainsSubstring("duplicate path"));
  }
  SECTION("missing referenced sequence rejected") {
    m.entries.push_back({"ghost", "train", std::nullopt});
    save_dataset_manifest(m, dir / "ghost.json");
    REQUIRE_THROWS_AS(load_dataset_manifest(dir / "ghost.json"), Error);
  }
}
