#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sct/common.hpp"
#include "sct/expression.hpp"
#include "sct/rng.hpp"

namespace sct {

// Borrowed view of one cell row of a matrix.
struct CellView {
    int cell_index;
    int n_genes;
    std::span<const Entry> entries;
};

inline CellView view(const SparseExpressionMatrix& m, int c) {
    return {c, m.n_genes, m.cell(c)};
}

enum class Replacement { mask_token, random_value, keep };

struct MaskConfig {
    // Zero positions are masked at a tenth of the non-zero rate by default,
    // which balances the two classes in absolute count on ~90%-sparse data.
    double nonzero_mask_ratio = 0.3;
    double zero_mask_ratio = 0.03;
    // (mask, random, keep) over masked positions, the usual masked-LM triple.
    std::array<double, 3> replace_probs = {0.8, 0.1, 0.1};
    std::uint64_t seed = 0;

    void validate() const {
        for (double r : {nonzero_mask_ratio, zero_mask_ratio}) {
            if (!(r >= 0.0 && r <= 1.0)) {
                throw ValidationError("mask ratio " + std::to_string(r) + " outside [0, 1]");
            }
        }
        double sum = 0.0;
        for (double p : replace_probs) {
            if (p < 0.0) {
                throw ValidationError("replace probability must be non-negative");
            }
            sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-9) {
            throw ValidationError("replace_probs must sum to 1, got " + std::to_string(sum));
        }
    }
};

struct ReplacementSlot {
    int gene;
    Replacement kind;
    double random_value; // meaningful only when kind == random_value
};

struct MaskPlan {
    std::vector<int> masked_nonzero;          // ascending gene indices
    std::vector<int> masked_zero;             // ascending gene indices
    std::vector<ReplacementSlot> replacements; // all masked positions, ascending
};

namespace detail {

// First-k partial Fisher-Yates; returns a sorted k-subset.
inline std::vector<int> sample_without_replacement(std::vector<int>& pool, int k, Rng& rng) {
    const int n = static_cast<int>(pool.size());
    for (int i = 0; i < k; ++i) {
        std::swap(pool[i], pool[i + rng.uniform_int(n - i)]);
    }
    std::vector<int> out(pool.begin(), pool.begin() + k);
    std::sort(out.begin(), out.end());
    return out;
}

} // namespace detail

// Draws the balanced mask for one cell. All randomness comes from a stream
// keyed by (cfg.seed, cell_index), so plans are independent of iteration
// order and thread schedule.
inline MaskPlan build_mask_plan(const CellView& cell, const MaskConfig& cfg) {
    cfg.validate();
    const int n_nonzero = static_cast<int>(cell.entries.size());
    const int n_zero = cell.n_genes - n_nonzero;
    if (n_nonzero < 1) {
        throw ValidationError("cell " + std::to_string(cell.cell_index) + " has no expressed genes");
    }
    const int k_nonzero = static_cast<int>(std::lround(cfg.nonzero_mask_ratio * n_nonzero));
    const int k_zero = static_cast<int>(std::lround(cfg.zero_mask_ratio * n_zero));
    if (k_nonzero == 0 && k_zero == 0) {
        throw ValidationError("degenerate mask plan for cell " + std::to_string(cell.cell_index) +
                              ": both mask counts round to zero");
    }

    Rng rng(cfg.seed, "mask/cell", static_cast<std::uint64_t>(cell.cell_index));

    std::vector<int> nonzero_pool(n_nonzero);
    for (int i = 0; i < n_nonzero; ++i) {
        nonzero_pool[i] = cell.entries[i].gene;
    }
    std::vector<int> zero_pool;
    zero_pool.reserve(n_zero);
    {
        int next = 0;
        for (const Entry& e : cell.entries) {
            for (; next < e.gene; ++next) zero_pool.push_back(next);
            next = e.gene + 1;
        }
        for (; next < cell.n_genes; ++next) zero_pool.push_back(next);
    }

    MaskPlan plan;
    plan.masked_nonzero = detail::sample_without_replacement(nonzero_pool, k_nonzero, rng);
    plan.masked_zero = detail::sample_without_replacement(zero_pool, k_zero, rng);

    std::vector<int> all = plan.masked_nonzero;
    all.insert(all.end(), plan.masked_zero.begin(), plan.masked_zero.end());
    std::sort(all.begin(), all.end());
    plan.replacements.reserve(all.size());
    for (int gene : all) {
        const double u = rng.uniform();
        ReplacementSlot slot{gene, Replacement::mask_token, 0.0};
        if (u >= cfg.replace_probs[0]) {
            if (u < cfg.replace_probs[0] + cfg.replace_probs[1]) {
                slot.kind = Replacement::random_value;
                slot.random_value = cell.entries[rng.uniform_int(n_nonzero)].value;
            } else {
                slot.kind = Replacement::keep;
            }
        }
        plan.replacements.push_back(slot);
    }
    return plan;
}

// One masked position after apply_mask: what the decoder sees at that slot
// (`input_value`) and what the loss compares against (`truth`).
struct MaskedValue {
    int gene;
    Replacement kind;
    double input_value;
    double truth;
    bool was_zero;
};

// A cell split into the three disjoint position classes. Every gene index
// lands in exactly one of survivors / masked / unmasked_zeros.
struct MaskedCell {
    int cell_index = 0;
    int n_genes = 0;
    std::vector<std::pair<int, double>> survivors; // (gene, value), ascending
    std::vector<MaskedValue> masked;               // ascending by gene
    std::vector<int> unmasked_zeros;               // ascending
};

inline MaskedCell apply_mask(const CellView& cell, const MaskPlan& plan) {
    MaskedCell out;
    out.cell_index = cell.cell_index;
    out.n_genes = cell.n_genes;

    std::vector<const ReplacementSlot*> by_gene(cell.n_genes, nullptr);
    for (const ReplacementSlot& slot : plan.replacements) {
        if (slot.gene < 0 || slot.gene >= cell.n_genes) {
            throw ValidationError("mask plan position " + std::to_string(slot.gene) +
                                  " outside cell of length " + std::to_string(cell.n_genes));
        }
        by_gene[slot.gene] = &slot;
    }

    std::size_t e = 0;
    for (int gene = 0; gene < cell.n_genes; ++gene) {
        const bool expressed = e < cell.entries.size() && cell.entries[e].gene == gene;
        const double value = expressed ? cell.entries[e].value : 0.0;
        if (expressed) ++e;
        if (const ReplacementSlot* slot = by_gene[gene]) {
            MaskedValue mv{gene, slot->kind, 0.0, value, !expressed};
            switch (slot->kind) {
            case Replacement::mask_token: break;
            case Replacement::random_value: mv.input_value = slot->random_value; break;
            case Replacement::keep: mv.input_value = value; break;
            }
            out.masked.push_back(mv);
        } else if (expressed) {
            out.survivors.emplace_back(gene, value);
        } else {
            out.unmasked_zeros.push_back(gene);
        }
    }
    if (out.masked.size() != plan.replacements.size()) {
        throw ValidationError("mask plan does not match cell " + std::to_string(cell.cell_index));
    }
    return out;
}

} // namespace sct
