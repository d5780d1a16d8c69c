#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace esnfb {

/// splitmix64 step; used for seed derivation so that per-member seeds are
/// independent of execution order.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Derives a stream seed from (base, index, salt). Pure function, so the
/// same member always gets the same seed regardless of thread scheduling.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index,
                                 std::uint64_t salt = 0) {
    std::uint64_t s = base;
    splitmix64(s);
    s ^= 0x9E3779B97F4A7C15ULL * (index + 1);
    splitmix64(s);
    s ^= 0xD1B54A32D192ED03ULL * (salt + 1);
    return splitmix64(s);
}

/// Deterministic random source.  std::mt19937_64 has a standardized
/// sequence; the distribution transforms are written out explicitly because
/// the std distribution objects are implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    /// Uniform on [0, 1), 53-bit resolution.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Uniform integer in [0, n). Threshold rejection keeps it unbiased.
    std::uint64_t uniform_int(std::uint64_t n) {
        const std::uint64_t threshold = (0ULL - n) % n;
        for (;;) {
            std::uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    /// Standard normal via Box-Muller; the spare value is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // u1 in (0, 1] so the log is finite.
        double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
        double u2 = uniform01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double t = 2.0 * M_PI * u2;
        spare_ = r * std::sin(t);
        has_spare_ = true;
        return r * std::cos(t);
    }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace esnfb
