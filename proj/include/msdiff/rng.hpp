#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace msdiff {

// Seeded RNG with an explicit gaussian implementation so streams are
// reproducible independent of the standard library's distribution internals.
class Rng {
  public:
    explicit Rng(uint64_t seed = 0) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // uniform in [0, 1)
    double uniform() {
        return (eng_() >> 11) * (1.0 / 9007199254740992.0);  // 53-bit mantissa
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [lo, hi] inclusive
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return lo + (int64_t)(uniform() * (double)(hi - lo + 1));
    }

    // Box-Muller; one cached value per pair.
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // Derive an independent stream; distinct keys give distinct streams.
    Rng fork(uint64_t key) {
        uint64_t s = eng_();
        return Rng(s ^ (key * 0x9E3779B97F4A7C15ull));
    }

  private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace msdiff
