#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace sfdd {

// Counter-based PRNG: the SplitMix64 finalizer applied to (key, counter).
// A stream is keyed by (seed, label, lanes), so every worker / round / purpose
// gets an independent stream whose draws do not depend on execution order.
// Gaussian variates come from the Box-Muller transform on two uniform draws.
class RngStream {
 public:
  RngStream() = default;

  RngStream(std::uint64_t seed, std::string_view label, std::uint64_t lane0 = 0,
            std::uint64_t lane1 = 0) {
    key_ = mix64(seed ^ 0x9e3779b97f4a7c15ull);
    key_ = absorb(key_, label);
    key_ = mix64(key_ ^ lane0);
    key_ = mix64(key_ ^ lane1);
  }

  // Derives an independent child stream; the parent is not advanced.
  RngStream fork(std::string_view label, std::uint64_t lane0 = 0, std::uint64_t lane1 = 0) const {
    RngStream s;
    s.key_ = absorb(key_, label);
    s.key_ = mix64(s.key_ ^ lane0);
    s.key_ = mix64(s.key_ ^ lane1);
    return s;
  }

  std::uint64_t next_u64() { return mix64(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

  // Uniform in [0,1) with 53 random bits.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * static_cast<unsigned __int128>(n)) >> 64);
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform01();
    double u2 = uniform01();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

 private:
  static std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  static std::uint64_t absorb(std::uint64_t k, std::string_view label) {
    for (unsigned char ch : label) k = mix64(k ^ static_cast<std::uint64_t>(ch));
    return k;
  }

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace sfdd
