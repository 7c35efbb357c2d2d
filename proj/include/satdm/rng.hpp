#pragma once

#include <cmath>
#include <cstdint>
#include <span>

namespace satdm {

/// Counter-based pseudorandom generator built on the splitmix64 finalizer.
/// A stream is (key, counter); draws hash the pair, so any draw is a pure
/// function of (key, counter) and substreams can be forked by label without
/// sharing state. Serializing a stream is serializing two integers.
class Rng {
 public:
  Rng() : key_(0), counter_(0) {}
  explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0xA02B'DBF7'BB3C'0A7ULL)), counter_(0) {}

  /// Independent substream derived from this stream's key and a label.
  /// Forking does not advance this stream's counter.
  Rng fork(std::uint64_t label) const {
    Rng child;
    child.key_ = mix(key_ ^ mix(label + 0x9E37'79B9'7F4A'7C15ULL));
    child.counter_ = 0;
    return child;
  }

  std::uint64_t next_u64() { return mix(key_ + 0x9E37'79B9'7F4A'7C15ULL * ++counter_); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// One standard normal draw. Consumes exactly two u64 draws (Box-Muller,
  /// second variate discarded) so the counter advances deterministically.
  double normal() {
    double u1 = u64_to_open_unit(next_u64());
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  /// Fills a span with standard normals, two per Box-Muller pair.
  template <typename S>
  void fill_normal(std::span<S> out) {
    std::size_t i = 0;
    while (i + 1 < out.size()) {
      double u1 = u64_to_open_unit(next_u64());
      double u2 = uniform();
      double r = std::sqrt(-2.0 * std::log(u1));
      out[i++] = static_cast<S>(r * std::cos(2.0 * kPi * u2));
      out[i++] = static_cast<S>(r * std::sin(2.0 * kPi * u2));
    }
    if (i < out.size()) out[i] = static_cast<S>(normal());
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }
  void restore(std::uint64_t key, std::uint64_t counter) {
    key_ = key;
    counter_ = counter;
  }

  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58'476D'1CE4'E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D0'49BB'1331'11EBULL;
    z ^= z >> 31;
    return z;
  }

 private:
  static constexpr double kPi = 3.14159265358979323846;

  // (0, 1]: never feeds log() a zero.
  static double u64_to_open_unit(std::uint64_t v) {
    return (static_cast<double>(v >> 11) + 1.0) * 0x1.0p-53;
  }

  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace satdm
