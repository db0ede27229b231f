// Shared error type, deterministic RNG, and raw little-endian blob I/O.
#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace elasto {

static_assert(std::endian::native == std::endian::little,
              "blob formats are little-endian; big-endian hosts are unsupported");

enum class ErrorKind {
  config,      // bad parameters, shape mismatches, incompatible checkpoints
  data,        // malformed or inconsistent input data
  io,          // filesystem failures
  divergence,  // non-finite training loss
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void throw_config(const std::string& msg) { throw Error(ErrorKind::config, msg); }
[[noreturn]] inline void throw_data(const std::string& msg) { throw Error(ErrorKind::data, msg); }
[[noreturn]] inline void throw_io(const std::string& msg) { throw Error(ErrorKind::io, msg); }

// FNV-1a, used to derive stable per-name RNG streams.
inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Deterministic RNG. mt19937_64 is fully specified by the standard; the
// uniform/normal mappings are pinned here because the std distributions are
// implementation-defined and would break bit-identical reproducibility.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {
    // splitmix64 warmup decorrelates nearby seeds
    for (int i = 0; i < 4; ++i) next_raw();
  }

  std::uint64_t next_raw() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_raw() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  std::uint64_t uniform_int(std::uint64_t n) {
    // modulo bias is irrelevant at our scales but rejection keeps it clean
    const std::uint64_t limit = ~std::uint64_t(0) - ~std::uint64_t(0) % n;
    std::uint64_t x = next_raw();
    while (x >= limit) x = next_raw();
    return x % n;
  }

  // standard normal via Box-Muller
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log1p(-u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// -------- raw float blobs (little-endian IEEE-754 binary32) --------

inline std::vector<float> read_f32_blob(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw_io("io error: cannot open " + path.string());
  in.seekg(0, std::ios::end);
  std::streamoff bytes = in.tellg();
  in.seekg(0, std::ios::beg);
  if (bytes < 0 || bytes % 4 != 0) throw_data("format error: blob size not a multiple of 4: " + path.string());
  std::vector<float> out(static_cast<std::size_t>(bytes) / 4);
  if (!out.empty()) in.read(reinterpret_cast<char*>(out.data()), bytes);
  if (!in) throw_io("io error: short read on " + path.string());
  return out;
}

inline void write_f32_blob(const std::filesystem::path& path, const float* data, std::size_t count) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw_io("io error: cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * 4));
  if (!out) throw_io("io error: short write on " + path.string());
}

inline void write_f32_blob(const std::filesystem::path& path, const std::vector<float>& v) {
  write_f32_blob(path, v.data(), v.size());
}

}  // namespace elasto
