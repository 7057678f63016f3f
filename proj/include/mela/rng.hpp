#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace mela {

// Deterministic random stream. Normal variates are produced by hand-rolled
// Box-Muller so sequences do not depend on the standard library's
// distribution internals.
class Rng {
  public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    double uniform() {  // [0, 1)
        return (eng_() >> 11) * 0x1.0p-53;
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double th = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(th);
        has_spare_ = true;
        return r * std::cos(th);
    }

    // Integer in [0, n).
    uint64_t below(uint64_t n) {
        // Rejection sampling keeps the draw unbiased.
        const uint64_t lim = UINT64_MAX - UINT64_MAX % n;
        uint64_t x = eng_();
        while (x >= lim) x = eng_();
        return x % n;
    }

  private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Stable stream derivation so independent components (init, data order, ...)
// never share draws.
inline uint64_t derive_seed(uint64_t master, const std::string& purpose) {
    uint64_t h = 1469598103934665603ull ^ master;
    for (char c : purpose) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    h ^= master * 0x9e3779b97f4a7c15ull;
    return h ? h : 0x2545f4914f6cdd1dull;
}

}  // namespace mela
