#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <string_view>

namespace bayeslearn {

/**
 * Philox4x32-10 counter-based generator (Salmon et al., SC'11).
 *
 * The output block for counter c under key k is a pure function of (k, c),
 * so independent streams are obtained by choosing distinct keys.  The
 * engine satisfies UniformRandomBitGenerator and can be used with the
 * standard <random> distributions.
 */
class Philox4x32 {
 public:
  using result_type = std::uint32_t;
  using key_type = std::array<std::uint32_t, 2>;
  using counter_type = std::array<std::uint32_t, 4>;

  explicit Philox4x32(std::uint64_t key = 0)
      : key_{static_cast<std::uint32_t>(key),
             static_cast<std::uint32_t>(key >> 32)} {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() {
    return std::numeric_limits<result_type>::max();
  }

  result_type operator()() {
    if (index_ == 4) {
      block_ = bijection(counter_, key_);
      increment();
      index_ = 0;
    }
    return block_[index_++];
  }

  void discard(unsigned long long n) {
    for (; n > 0; --n) (*this)();
  }

  /// The raw keyed bijection: ten Philox rounds over one counter block.
  static counter_type bijection(counter_type ctr, key_type key) {
    for (int round = 0; round < 10; ++round) {
      if (round > 0) {
        key[0] += kWeyl0;
        key[1] += kWeyl1;
      }
      const std::uint64_t p0 = std::uint64_t{kMul0} * ctr[0];
      const std::uint64_t p1 = std::uint64_t{kMul1} * ctr[2];
      ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0],
             static_cast<std::uint32_t>(p1),
             static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1],
             static_cast<std::uint32_t>(p0)};
    }
    return ctr;
  }

  friend bool operator==(const Philox4x32&, const Philox4x32&) = default;

 private:
  static constexpr std::uint32_t kMul0 = 0xD2511F53u;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

  void increment() {
    for (auto& word : counter_)
      if (++word != 0) break;
  }

  key_type key_;
  counter_type counter_{};
  counter_type block_{};
  int index_ = 4;
};

using Rng = Philox4x32;

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace detail

/// Key for the stream identified by (seed, purpose tag, index).
constexpr std::uint64_t stream_key(std::uint64_t seed, std::string_view tag,
                                   std::uint64_t index = 0) {
  std::uint64_t h = detail::splitmix64(seed);
  h = detail::splitmix64(h ^ detail::fnv1a(tag));
  return detail::splitmix64(h ^ index);
}

inline Rng make_stream(std::uint64_t seed, std::string_view tag,
                       std::uint64_t index = 0) {
  return Rng(stream_key(seed, tag, index));
}

}  // namespace bayeslearn
