#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sct/autodiff.hpp"
#include "sct/common.hpp"
#include "sct/expression.hpp"
#include "sct/rng.hpp"

namespace sct {

// Learned scalar-to-embedding map: v is pushed through a bin-weighting chain
//   v1 = v * w1;  v2 = LeakyReLU(v1);  v3 = w2 * v2 + alpha * v2;
//   v4 = softmax(v3);  e = T * v4
// so every value becomes a smooth mixture of `bins` bin embeddings instead of
// a hard bucket.
class AutoDiscretizer {
public:
    int dim;
    int bins;
    double leak = 0.01;

    ad::Parameter w1;    // [1, bins]
    ad::Parameter w2;    // [bins, bins]
    ad::Parameter alpha; // [1, 1]
    ad::Parameter table; // [dim, bins], column b is bin b's embedding

    AutoDiscretizer(int dim_, int bins_, std::uint64_t seed, const std::string& prefix = "value_embed")
        : dim(dim_), bins(bins_), w1(prefix + ".w1", ad::Mat(1, bins_)),
          w2(prefix + ".w2", ad::Mat(bins_, bins_)), alpha(prefix + ".alpha", ad::Mat::Ones(1, 1)),
          table(prefix + ".table", ad::Mat(dim_, bins_)) {
        if (bins_ < 2 || dim_ < 1) {
            throw ValidationError("AutoDiscretizer needs bins >= 2 and dim >= 1");
        }
        Rng rng(seed, prefix);
        for (long j = 0; j < w1.value.size(); ++j) {
            w1.value.data()[j] = 0.5 * rng.normal();
        }
        const double w2_scale = 1.0 / std::sqrt(static_cast<double>(bins_));
        for (long j = 0; j < w2.value.size(); ++j) {
            w2.value.data()[j] = w2_scale * rng.normal();
        }
        for (long j = 0; j < table.value.size(); ++j) {
            table.value.data()[j] = 0.02 * rng.normal();
        }
    }

    struct Out {
        ad::Var embedding; // [k, dim]
        ad::Var weights;   // [k, bins]
    };

    // Batched forward for a column of values. Values are data, not
    // parameters, so they enter as constants.
    Out forward(ad::Tape& t, const Eigen::VectorXd& values) {
        for (long i = 0; i < values.size(); ++i) {
            if (!std::isfinite(values(i))) {
                throw NumericError("discretize: value " + std::to_string(i) + " is not finite");
            }
        }
        ad::Var v = t.constant(values);
        ad::Var v1 = ad::matmul(v, t.param(w1)); // [k, bins]
        ad::Var v2 = ad::leaky_relu(v1, leak);
        ad::Var v3 = ad::add(ad::matmul(v2, t.param(w2), false, true),
                             ad::mul_scalar_param(v2, t.param(alpha)));
        ad::Var v4 = ad::softmax_rows(v3);
        ad::Var e = ad::matmul(v4, t.param(table), false, true); // [k, dim]
        return {e, v4};
    }

    std::vector<ad::Parameter*> parameters() {
        return {&w1, &w2, &alpha, &table};
    }
};

struct DiscretizeResult {
    Eigen::VectorXd embedding;
    Eigen::VectorXd weights;
};

// Single-value convenience wrapper (diagnostics, tests).
inline DiscretizeResult discretize(double v, AutoDiscretizer& disc) {
    ad::Tape t;
    Eigen::VectorXd one(1);
    one(0) = v;
    auto out = disc.forward(t, one);
    return {out.embedding.value().row(0).transpose(), out.weights.value().row(0).transpose()};
}

// ---- hard binning baselines ----

enum class BinScheme {
    round_zero, // nearest integer; zero stays bin 0
    floor_zero, // floor; the alternative reading of "x.99 maps to x"
    up_no_zero, // ceil with a dedicated zero bin
    equal_freq, // equal-frequency percentile buckets over fitted values
};

// Sorted copy of the dataset values, fitted once for equal-frequency binning.
struct ValueStats {
    std::vector<double> sorted;
    int bins = 0;

    bool fitted() const {
        return bins > 0 && !sorted.empty();
    }

    static ValueStats fit(const std::vector<double>& values, int bins) {
        if (bins < 1 || values.empty()) {
            throw ValidationError("ValueStats::fit needs values and bins >= 1");
        }
        ValueStats s;
        s.sorted = values;
        std::sort(s.sorted.begin(), s.sorted.end());
        s.bins = bins;
        return s;
    }

    static ValueStats fit(const SparseExpressionMatrix& m, int bins) {
        std::vector<double> values;
        values.reserve(m.entries.size());
        for (const Entry& e : m.entries) {
            values.push_back(e.value);
        }
        return fit(values, bins);
    }
};

inline int baseline_bin(double v, BinScheme scheme, const ValueStats* stats = nullptr) {
    if (!std::isfinite(v) || v < 0.0) {
        throw ValidationError("baseline_bin: value must be finite and non-negative");
    }
    switch (scheme) {
    case BinScheme::round_zero:
        return static_cast<int>(std::lround(v));
    case BinScheme::floor_zero:
        return static_cast<int>(std::floor(v));
    case BinScheme::up_no_zero:
        return v == 0.0 ? 0 : static_cast<int>(std::ceil(v));
    case BinScheme::equal_freq: {
        if (!stats || !stats->fitted()) {
            throw ValidationError("equal_freq binning requires fitted ValueStats");
        }
        const auto rank = std::lower_bound(stats->sorted.begin(), stats->sorted.end(), v) -
                          stats->sorted.begin();
        const long bin = rank * stats->bins / static_cast<long>(stats->sorted.size());
        return static_cast<int>(std::min<long>(bin, stats->bins - 1));
    }
    }
    throw ValidationError("baseline_bin: unknown scheme");
}

} // namespace sct
