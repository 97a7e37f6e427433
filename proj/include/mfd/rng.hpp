#pragma once

#include <cstdint>
#include <limits>

namespace mfd {

/// SplitMix64 bit generator. Satisfies UniformRandomBitGenerator so it can
/// drive the <random> distributions. Cheap to construct, which lets every
/// (replication, subject, draw) triple own an independent stream.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  explicit constexpr SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept {
    return std::numeric_limits<result_type>::max();
  }

  constexpr result_type operator()() noexcept {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform on the open interval (0, 1).
  constexpr double uniform_open() noexcept {
    return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53;
  }

 private:
  std::uint64_t state_;
};

namespace detail {
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
}  // namespace detail

/// Seed for the stream identified by (master, replication, subject, tag).
/// Depends only on its arguments, never on scheduling order.
constexpr std::uint64_t stream_seed(std::uint64_t master, std::uint64_t replication,
                                    std::uint64_t subject, std::uint64_t tag) noexcept {
  std::uint64_t h = detail::mix64(master ^ 0x6a09e667f3bcc908ULL);
  h = detail::mix64(h ^ (replication + 0x3c6ef372fe94f82bULL));
  h = detail::mix64(h ^ (subject + 0xa54ff53a5f1d36f1ULL));
  h = detail::mix64(h ^ (tag + 0x510e527fade682d1ULL));
  return h;
}

inline SplitMix64 make_stream(std::uint64_t master, std::uint64_t replication,
                              std::uint64_t subject, std::uint64_t tag) noexcept {
  return SplitMix64(stream_seed(master, replication, subject, tag));
}

}  // namespace mfd
