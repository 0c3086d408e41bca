#pragma once

#include <array>
#include <cstdint>
#include <span>

namespace roadenkf {

/// Counter-based random stream (Philox4x32-10). A (key, counter) pair fully
/// determines every subsequent draw, independent of platform or threading.
/// Each call consumes whole 128-bit blocks and advances the counter by one
/// per block.
class RngStream {
 public:
  struct Counter {
    std::uint64_t lo = 0;
    std::uint64_t hi = 0;
    friend bool operator==(const Counter&, const Counter&) = default;
  };

  RngStream() : RngStream(0) {}
  explicit RngStream(std::uint64_t key) : key_(key), counter_{0, 0} {}
  RngStream(std::uint64_t key, Counter counter) : key_(key), counter_(counter) {}

  std::uint64_t key() const noexcept { return key_; }
  Counter counter() const noexcept { return counter_; }

  /// Child stream with a derived key; the child starts at counter zero.
  RngStream split(std::uint64_t index) const;

  std::array<std::uint32_t, 4> next_block();
  std::uint64_t next_u64();

  /// Uniform on the open interval (0, 1).
  double uniform();
  /// Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n);

  /// Standard normal draws, two per block (Box-Muller).
  void fill_normal(std::span<double> out);
  double normal();

 private:
  void advance() noexcept;

  std::uint64_t key_;
  Counter counter_;
};

/// Philox4x32-10 bijection, exposed for tests.
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr, std::array<std::uint32_t, 2> key);

std::uint64_t splitmix64(std::uint64_t x) noexcept;

}  // namespace roadenkf
