#pragma once

// Shared plumbing: error types, contract checks, deterministic RNG streams
// and a few scalar helpers used across the library.

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace minitown {

// Thrown on malformed configuration (CLI exit code 2).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown on violated operation contracts (CLI exit code 3).
struct ContractViolation : std::logic_error {
  explicit ContractViolation(const std::string& msg) : std::logic_error(msg) {}
};

namespace detail {
template <typename E>
[[noreturn]] inline void raise(const char* cond, const std::string& msg) {
  std::ostringstream oss;
  oss << msg << " [" << cond << "]";
  throw E(oss.str());
}
}  // namespace detail

#define MT_REQUIRE(cond, msg)                                             \
  do {                                                                    \
    if (!(cond)) ::minitown::detail::raise<::minitown::ContractViolation>(#cond, (msg)); \
  } while (0)

#define MT_CONFIG_REQUIRE(cond, msg)                                      \
  do {                                                                    \
    if (!(cond)) ::minitown::detail::raise<::minitown::ConfigError>(#cond, (msg)); \
  } while (0)

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

// Deterministic RNG. Normal draws use explicit Box-Muller (no cached spare)
// so the stream is identical across standard libraries.
class Rng {
 public:
  Rng() : gen_(0) {}
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t u64() { return gen_(); }

  double uniform() {  // [0, 1)
    return (gen_() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Uniform integer in [0, n): rejection-free modulo is fine at our scales.
  int64_t index(int64_t n) {
    MT_REQUIRE(n > 0, "Rng::index needs n > 0");
    return static_cast<int64_t>(gen_() % static_cast<uint64_t>(n));
  }

  // Derive an independent, reproducible child stream.
  Rng split(uint64_t stream) { return Rng(splitmix64(gen_() ^ splitmix64(stream))); }
  static Rng derive(uint64_t seed, uint64_t stream) {
    return Rng(splitmix64(splitmix64(seed) ^ splitmix64(stream)));
  }
  static Rng derive(uint64_t seed, const std::string& stream) {
    return derive(seed, fnv1a64(stream));
  }

  std::string save_state() const {
    std::ostringstream oss;
    oss << gen_;
    return oss.str();
  }
  void load_state(const std::string& s) {
    std::istringstream iss(s);
    iss >> gen_;
    MT_REQUIRE(!iss.fail(), "bad RNG state string");
  }

 private:
  std::mt19937_64 gen_;
};

inline double symlog(double x) { return std::copysign(std::log1p(std::abs(x)), x); }
inline double symexp(double x) { return std::copysign(std::expm1(std::abs(x)), x); }

inline double wrap_to_pi(double a) { return std::remainder(a, 2.0 * M_PI); }

inline double clip(double x, double lo, double hi) { return std::min(std::max(x, lo), hi); }

constexpr double kPi = 3.14159265358979323846;

}  // namespace minitown
