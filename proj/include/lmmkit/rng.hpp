#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace lmmkit {

// Counter-based random stream built on Philox4x32-10 (Salmon et al. 2011).
// A stream is identified by (seed, stream name); the draw index is the
// counter, so adding a new stream never perturbs draws from existing ones.
class Rng {
public:
  Rng(std::uint64_t seed, std::string_view stream) {
    key0_ = static_cast<std::uint32_t>(seed) ^ 0x243F6A88u;
    key1_ = static_cast<std::uint32_t>(seed >> 32) ^ fnv1a(stream);
  }

  // Independent stream derived from this one's identity plus a tag.
  Rng substream(std::string_view tag) const {
    Rng r(*this);
    r.key1_ = fnv1a(tag) ^ (key1_ * 0x9E3779B9u + 0x85EBCA6Bu);
    r.counter_ = 0;
    r.have_cached_ = false;
    return r;
  }

  // Uniform draw in the open interval (0, 1).
  double uniform() {
    const std::uint64_t bits = next64();
    return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; the second value of each pair is cached.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  // Integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
  }

private:
  std::uint32_t key0_ = 0;
  std::uint32_t key1_ = 0;
  std::uint64_t counter_ = 0;
  double cached_ = 0.0;
  bool have_cached_ = false;

  static std::uint32_t fnv1a(std::string_view s) {
    std::uint32_t h = 0x811C9DC5u;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x01000193u;
    }
    return h;
  }

  static void mulwide(std::uint32_t a, std::uint32_t b, std::uint32_t& hi,
                      std::uint32_t& lo) {
    const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
    hi = static_cast<std::uint32_t>(p >> 32);
    lo = static_cast<std::uint32_t>(p);
  }

  std::uint64_t next64() {
    std::uint32_t c0 = static_cast<std::uint32_t>(counter_);
    std::uint32_t c1 = static_cast<std::uint32_t>(counter_ >> 32);
    std::uint32_t c2 = 0, c3 = 0;
    std::uint32_t k0 = key0_, k1 = key1_;
    ++counter_;
    for (int round = 0; round < 10; ++round) {
      std::uint32_t hi0, lo0, hi1, lo1;
      mulwide(0xD2511F53u, c0, hi0, lo0);
      mulwide(0xCD9E8D57u, c2, hi1, lo1);
      const std::uint32_t n0 = hi1 ^ c1 ^ k0;
      const std::uint32_t n1 = lo1;
      const std::uint32_t n2 = hi0 ^ c3 ^ k1;
      const std::uint32_t n3 = lo0;
      c0 = n0;
      c1 = n1;
      c2 = n2;
      c3 = n3;
      k0 += 0x9E3779B9u;
      k1 += 0xBB67AE85u;
    }
    return (static_cast<std::uint64_t>(c0) << 32) | c1;
  }
};

}  // namespace lmmkit
