#pragma once

// Deterministic counter-based RNG. Every random decision in the project
// (init, shuffling, dropout masks, unseen-word vectors) derives from one
// run seed through domain-separated child streams, so identical seeds give
// bit-identical runs on any platform. std::mt19937 + distributions are not
// used because distribution output is not pinned across standard libraries.

#include <cstdint>
#include <cmath>
#include <vector>

namespace slufuse {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed + kGamma) {}

  std::uint64_t next_u64() {
    // splitmix64 (Steele, Lea, Flood 2014)
    std::uint64_t z = (state_ += kGamma);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // [0, 1), 53-bit mantissa
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) {
    return lo + (hi - lo) * next_double();
  }

  // Unbiased enough for shuffling: multiply-high range reduction.
  std::uint64_t next_below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Domain-separated child stream; mixing is order-sensitive in (a, b, c).
  Rng split(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
    Rng child(state_ ^ mix(a ^ 0x9e3779b97f4a7c15ULL));
    child.state_ = mix(child.state_ + mix(b + 0x165667b19e3779f9ULL));
    child.state_ = mix(child.state_ + mix(c + 0x27d4eb2f165667c5ULL));
    return child;
  }

 private:
  static constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 33)) * 0xff51afd7ed558ccdULL;
    z = (z ^ (z >> 33)) * 0xc4ceb9fe1a85ec53ULL;
    return z ^ (z >> 33);
  }

  std::uint64_t state_;
};

}  // namespace slufuse
