#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace sct {

inline std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Stable seed derivation so every stochastic consumer owns an independent
// stream keyed by (root, label, index). Reordering or adding consumers never
// perturbs the draws of another.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view label, std::uint64_t index = 0) {
    std::uint64_t h = mix64(root + 0x9e3779b97f4a7c15ULL);
    for (unsigned char c : label) {
        h = mix64(h ^ (c * 0xff51afd7ed558ccdULL));
    }
    return mix64(h ^ (index * 0xc4ceb9fe1a85ec53ULL));
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    Rng(std::uint64_t root, std::string_view label, std::uint64_t index = 0)
        : eng_(derive_seed(root, label, index)) {}

    std::uint64_t bits() {
        return eng_();
    }

    // Uniform on [0, 1) with 53 random mantissa bits.
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Uniform integer in [0, n).
    int uniform_int(int n) {
        return static_cast<int>(std::uniform_int_distribution<long>(0, n - 1)(eng_));
    }

    double normal() {
        return normal_(eng_);
    }

    double normal(double mean, double sd) {
        return mean + sd * normal();
    }

    int poisson(double mean) {
        return std::poisson_distribution<int>(mean)(eng_);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        std::shuffle(v.begin(), v.end(), eng_);
    }

private:
    std::mt19937_64 eng_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

} // namespace sct
