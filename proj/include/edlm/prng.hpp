#pragma once

#include <cmath>
#include <cstdint>

namespace edlm {

// splitmix64 stream with Box-Muller gaussians. The generator is pinned to
// this exact algorithm (not std::mt19937 + distributions) so that seeded
// runs produce identical streams regardless of standard-library version.
class Prng {
  public:
    explicit Prng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1), 53-bit resolution
    double uniform01() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // uniform in (0, 1]
    double uniform01_open_low() { return double((next_u64() >> 11) + 1) * 0x1.0p-53; }

    // uniform integer in [0, n); modulo bias is negligible for n << 2^64
    uint64_t below(uint64_t n) { return next_u64() % n; }

    int64_t range(int64_t lo, int64_t hi_inclusive) {
        return lo + int64_t(below(uint64_t(hi_inclusive - lo + 1)));
    }

    // standard normal via Box-Muller, one spare cached
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double two_pi = 6.283185307179586476925286766559;
        double u1 = uniform01_open_low();
        double u2 = uniform01();
        double radius = std::sqrt(-2.0 * std::log(u1));
        double theta = two_pi * u2;
        spare_ = radius * std::sin(theta);
        has_spare_ = true;
        return radius * std::cos(theta);
    }

  private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace edlm
