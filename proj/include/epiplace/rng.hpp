#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace epiplace {

/// Deterministic random source. Wraps the (standard-specified) mt19937_64
/// stream but implements the distributions itself so that generated values
/// are identical across platforms and library versions.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform double in [a, b).
    double uniform(double a, double b) { return a + (b - a) * uniform(); }

    /// Uniform integer in [0, n). n must be > 0.
    uint64_t uniform_int(uint64_t n) {
        return static_cast<uint64_t>(uniform() * static_cast<double>(n));
    }

    /// Standard normal via Box-Muller (cached spare).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log1p(-u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// In-place Fisher-Yates shuffle (std::shuffle's algorithm is
    /// implementation-defined; this one is pinned).
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace epiplace
