#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace p2p {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeMismatch : Error { using Error::Error; };
struct EmptyCloud : Error { using Error::Error; };
struct EmptyRegion : Error { using Error::Error; };
struct AlreadyAugmented : Error { using Error::Error; };
struct NotScalar : Error { using Error::Error; };
struct MissingGrad : Error { using Error::Error; };
struct VariantInputMismatch : Error { using Error::Error; };
struct LengthMismatch : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct TruncatedFile : Error { using Error::Error; };
struct MalformedLine : Error { using Error::Error; };
struct MissingCalib : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };

constexpr double kPi = 3.14159265358979323846;

// Wraps an angle to (-pi, pi].
inline double wrap_angle(double a) {
  a = std::fmod(a, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  else if (a > kPi) a -= 2.0 * kPi;
  return a;
}

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d4a2fad17e255ULL;
  return z ^ (z >> 31);
}

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a64(s.data(), s.size(), h);
}

// Named deterministic seed stream: mixes a master seed with a purpose tag and indices.
inline uint64_t derive_seed(uint64_t master, const std::string& tag, uint64_t a = 0, uint64_t b = 0) {
  uint64_t h = fnv1a64(tag);
  h = fnv1a64(&master, sizeof master, h);
  h = fnv1a64(&a, sizeof a, h);
  h = fnv1a64(&b, sizeof b, h);
  uint64_t s = h;
  return splitmix64(s);
}

// Self-contained RNG so every draw is bit-stable across compilers and libstdc++ versions.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed) {}

  uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n); n must be > 0.
  uint64_t uniform_index(uint64_t n) { return next_u64() % n; }

  double gauss(double mu = 0.0, double sigma = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mu + sigma * spare_;
    }
    double u1 = 0.0;
    do { u1 = uniform(); } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * kPi * u2);
    has_spare_ = true;
    return mu + sigma * r * std::cos(2.0 * kPi * u2);
  }

 private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace p2p
