#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "sct/common.hpp"
#include "sct/expression.hpp"
#include "sct/rng.hpp"

namespace sct {

// Synthetic cells are drawn from per-type archetype profiles that live in a
// rank-`rank` gene-space subspace. Which genes a cell expresses and how high
// both follow the type profile, so type identity is recoverable from either
// the sparsity pattern or the values; `noise_sd` dials the difficulty.
struct SyntheticSpec {
    int n_cells = 0;
    int n_genes = 0;
    int n_cell_types = 1;
    double sparsity = 0.9; // fraction of zero entries per cell
    int rank = 2;
    double noise_sd = 0.25;     // lognormal jitter on per-cell rates
    double count_scale = 8.0;   // mean extra counts per expressed gene
    std::uint64_t seed = 1;
};

struct SyntheticData {
    SparseExpressionMatrix matrix; // raw integer counts
    std::vector<std::string> labels;
};

inline SyntheticData synthesize_dataset(const SyntheticSpec& spec) {
    if (spec.n_cells <= 0 || spec.n_genes <= 0 || spec.n_cell_types < 1 || spec.rank < 1) {
        throw ValidationError("synthesize_dataset: dimensions must be positive");
    }
    if (!(spec.sparsity > 0.0 && spec.sparsity < 1.0)) {
        throw ValidationError("synthesize_dataset: sparsity must lie in (0, 1)");
    }
    const int q = static_cast<int>(std::lround((1.0 - spec.sparsity) * spec.n_genes));
    if (q < 1) {
        throw ValidationError("synthesize_dataset: sparsity " + std::to_string(spec.sparsity) +
                              " leaves no non-zero genes per cell");
    }

    // Non-negative basis spanning the archetype subspace. Lognormal entries
    // keep per-gene rates heavy-tailed, so the expressed-gene pattern itself
    // carries recoverable signal instead of being a near-uniform draw.
    Rng basis_rng(spec.seed, "synthetic/basis");
    std::vector<double> basis(static_cast<std::size_t>(spec.rank) * spec.n_genes);
    for (double& b : basis) {
        b = std::exp(1.5 * basis_rng.normal());
    }

    // Archetype mixing weights, evenly spread across the simplex edge between
    // consecutive basis directions so types stay distinct by construction.
    Rng type_rng(spec.seed, "synthetic/types");
    std::vector<double> profiles(static_cast<std::size_t>(spec.n_cell_types) * spec.n_genes, 0.0);
    for (int t = 0; t < spec.n_cell_types; ++t) {
        std::vector<double> w(spec.rank, 0.0);
        if (spec.rank == 1) {
            w[0] = 1.0;
        } else {
            const double pos = spec.n_cell_types == 1
                                   ? 0.5
                                   : static_cast<double>(t) / (spec.n_cell_types - 1) * (spec.rank - 1);
            const int lo = std::min(static_cast<int>(pos), spec.rank - 2);
            const double frac = pos - lo;
            w[lo] = 1.0 - frac;
            w[lo + 1] = frac;
        }
        for (int j = 0; j < spec.n_genes; ++j) {
            double p = 0.0;
            for (int r = 0; r < spec.rank; ++r) {
                p += w[r] * basis[static_cast<std::size_t>(r) * spec.n_genes + j];
            }
            profiles[static_cast<std::size_t>(t) * spec.n_genes + j] = p * std::exp(0.1 * type_rng.normal());
        }
    }

    SyntheticData out;
    out.matrix.n_cells = spec.n_cells;
    out.matrix.n_genes = spec.n_genes;
    out.matrix.stage = Stage::raw_counts;
    out.labels.resize(spec.n_cells);

    std::vector<double> rate(spec.n_genes);
    std::vector<int> order(spec.n_genes);
    for (int i = 0; i < spec.n_cells; ++i) {
        const int t = i % spec.n_cell_types;
        out.labels[i] = "T" + std::to_string(t);
        Rng rng(spec.seed, "synthetic/cell", static_cast<std::uint64_t>(i));

        const double* profile = &profiles[static_cast<std::size_t>(t) * spec.n_genes];
        for (int j = 0; j < spec.n_genes; ++j) {
            rate[j] = profile[j] * std::exp(spec.noise_sd * rng.normal());
        }

        // Weighted sampling of q genes without replacement: the q smallest
        // -log(u)/rate keys win with probability proportional to rate.
        std::iota(order.begin(), order.end(), 0);
        std::vector<double> key(spec.n_genes);
        for (int j = 0; j < spec.n_genes; ++j) {
            key[j] = -std::log(1.0 - rng.uniform()) / rate[j];
        }
        std::nth_element(order.begin(), order.begin() + q, order.end(),
                         [&](int a, int b) { return key[a] < key[b]; });
        std::sort(order.begin(), order.begin() + q);

        double mean_rate = 0.0;
        for (int s = 0; s < q; ++s) {
            mean_rate += rate[order[s]];
        }
        mean_rate /= q;
        for (int s = 0; s < q; ++s) {
            const int j = order[s];
            const int count = 1 + rng.poisson(spec.count_scale * rate[j] / mean_rate);
            out.matrix.entries.push_back({i, j, static_cast<double>(count)});
        }
    }
    out.matrix.finalize();
    return out;
}

} // namespace sct
