#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace mia {

// Deterministic random source. mt19937_64 is fully specified by the C++
// standard, and all variate transforms below are hand-rolled, so a given seed
// yields the same stream on every platform. std::*_distribution is
// deliberately avoided (implementation-defined sequences).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform on [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // Uniform on (0, 1) — safe as a log() argument.
    double uniform_pos() {
        double u;
        do { u = uniform(); } while (u <= 0.0);
        return u;
    }

    // Uniform integer in [0, n). Rejection on the top range keeps it unbiased.
    std::uint64_t uniform_index(std::uint64_t n);

    // Standard normal via Marsaglia's polar method (one spare cached).
    double normal();

    // Gamma(shape, 1) via Marsaglia–Tsang; shape < 1 handled by the usual
    // Gamma(shape+1) * U^(1/shape) boost.
    double gamma(double shape);

    // Beta(a, b) as X/(X+Y) with X~Gamma(a), Y~Gamma(b).
    double beta(double a, double b);

    // In-place Fisher–Yates.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Derives the seed for a named pipeline stage from the master seed, so every
// stage gets an independent stream and adding a stage never shifts another
// stage's draws. FNV-1a over the name, then two splitmix64 finalizer rounds.
std::uint64_t derive_seed(std::uint64_t master, std::string_view stage);

}  // namespace mia
