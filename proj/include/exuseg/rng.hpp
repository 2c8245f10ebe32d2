#pragma once

// Counter-based random numbers built on Philox4x32-10 (Salmon et al., SC'11).
//
// A stream is identified by (seed, stream id). Draw k of a stream is a pure
// function of (seed, stream, k): block k/4 of the Philox output with
// counter = {block lo, block hi, stream lo, stream hi} and key = {seed lo, seed hi}.
// Child streams are derived by hashing a text label into a new stream id, so
// a child never shares blocks with its parent or with siblings of other labels.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string_view>

#include "exuseg/error.hpp"
#include "exuseg/tensor.hpp"

namespace exuseg {

namespace detail {

inline std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> ctr,
                                                  std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t kMul0 = 0xD2511F53u;
  constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = std::uint64_t{kMul0} * ctr[0];
    const std::uint64_t p1 = std::uint64_t{kMul1} * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kWeyl0;
    key[1] += kWeyl1;
  }
  return ctr;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace detail

class Rng {
public:
  Rng() = default;
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0, std::uint64_t counter = 0)
      : seed_(seed), stream_(stream), counter_(counter) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }
  // Number of 32-bit words drawn so far.
  std::uint64_t counter() const noexcept { return counter_; }

  // Independent child stream; does not advance this stream.
  Rng split(std::string_view label) const {
    const std::uint64_t id = detail::splitmix64(stream_ ^ detail::splitmix64(detail::fnv1a64(label)));
    return Rng(seed_, id == stream_ ? id + 1 : id);
  }

  std::uint32_t next_u32() {
    const std::uint64_t block = counter_ >> 2;
    const unsigned lane = static_cast<unsigned>(counter_ & 3u);
    if (!cached_ || cached_block_ != block) {
      buffer_ = detail::philox4x32_10(
          {static_cast<std::uint32_t>(block), static_cast<std::uint32_t>(block >> 32),
           static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)},
          {static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)});
      cached_block_ = block;
      cached_ = true;
    }
    ++counter_;
    return buffer_[lane];
  }

  std::uint64_t next_u64() {
    const std::uint64_t lo = next_u32();
    const std::uint64_t hi = next_u32();
    return (hi << 32) | lo;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) {
    if (!(lo < hi)) throw Error("uniform: require lo < hi");
    const double v = lo + (hi - lo) * uniform01();
    return v < hi ? v : std::nextafter(hi, lo);
  }

  // Uniform integer in [0, n) by rejection, unbiased.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw Error("below: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Box-Muller, cosine branch only; consumes four words per draw.
  double normal(double mean, double stddev) {
    if (!(stddev >= 0)) throw Error("normal: stddev must be >= 0");
    const double u1 = 1.0 - uniform01();  // (0, 1]
    const double u2 = uniform01();
    const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    return mean + stddev * z;
  }

  bool bernoulli(double p) { return uniform01() < p; }

  friend bool operator==(const Rng& a, const Rng& b) {
    return a.seed_ == b.seed_ && a.stream_ == b.stream_ && a.counter_ == b.counter_;
  }

private:
  std::uint64_t seed_ = 0;
  std::uint64_t stream_ = 0;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> buffer_{};
  std::uint64_t cached_block_ = 0;
  bool cached_ = false;
};

inline Tensor rng_uniform(Rng& r, Shape shape, double lo, double hi) {
  if (!(lo < hi)) throw Error("rng_uniform: invalid range, require lo < hi");
  Tensor t(std::move(shape));
  for (real& v : t.data()) v = static_cast<real>(r.uniform(lo, hi));
  return t;
}

inline Tensor rng_normal(Rng& r, Shape shape, double mean, double stddev) {
  if (!(stddev >= 0) || !std::isfinite(stddev)) throw Error("rng_normal: invalid stddev");
  Tensor t(std::move(shape));
  for (real& v : t.data()) v = static_cast<real>(r.normal(mean, stddev));
  return t;
}

}  // namespace exuseg
