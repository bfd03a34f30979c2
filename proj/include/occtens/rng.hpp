#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace occtens {

// Deterministic RNG. std::mt19937_64 is bit-exact across platforms; the
// distributions below are hand-rolled because the std:: distribution objects
// are implementation-defined and would break cross-platform reproducibility.
class Rng {
  public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive integer range.
    int64_t randint(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(gen_() % span);
    }

    // Box-Muller; consumes two uniforms per pair, caches the second.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = 0.0;
        while (u1 == 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Independent child stream; avoids correlated draws between subsystems.
    Rng fork(uint64_t salt) {
        uint64_t s = gen_() ^ (salt * 0x9E3779B97F4A7C15ull + 0xD1B54A32D192ED03ull);
        return Rng(s);
    }

  private:
    std::mt19937_64 gen_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

}  // namespace occtens
