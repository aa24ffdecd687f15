#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "sct/common.hpp"
#include "sct/masking.hpp"
#include "sct/rng.hpp"

namespace sct {

// Survivor tokens of a batch packed to the batch max length m, plus
// everything needed to rebuild full-length sequences afterwards.
struct PackedBatch {
    int batch = 0;
    int m = 0; // max survivor count over the batch
    int n_genes = 0;

    Eigen::MatrixXd values;       // [batch, m], 0.0 where padded
    Eigen::MatrixXi gene_indices; // [batch, m], -1 where padded
    Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> pad_mask; // [batch, m]

    // scatter_map[c][slot] = original gene index of that survivor slot.
    std::vector<std::vector<int>> scatter_map;

    // Masked and still-zero positions per cell, for the decoder extension.
    struct Residual {
        std::vector<MaskedValue> masked;
        std::vector<int> zeros;
    };
    std::vector<Residual> residuals;
};

inline PackedBatch filter_and_pack(std::span<const MaskedCell> cells) {
    if (cells.empty()) {
        throw ValidationError("filter_and_pack: empty batch");
    }
    PackedBatch b;
    b.batch = static_cast<int>(cells.size());
    b.n_genes = cells[0].n_genes;
    for (const MaskedCell& c : cells) {
        if (c.n_genes != b.n_genes) {
            throw ValidationError("filter_and_pack: mixed n_genes in batch");
        }
        if (c.survivors.empty()) {
            throw ValidationError("cell " + std::to_string(c.cell_index) +
                                  " has no survivors; encoder input would be empty");
        }
        b.m = std::max(b.m, static_cast<int>(c.survivors.size()));
    }

    b.values = Eigen::MatrixXd::Zero(b.batch, b.m);
    b.gene_indices = Eigen::MatrixXi::Constant(b.batch, b.m, -1);
    b.pad_mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(b.batch, b.m, true);
    b.scatter_map.resize(b.batch);
    b.residuals.resize(b.batch);

    for (int c = 0; c < b.batch; ++c) {
        const MaskedCell& cell = cells[c];
        b.scatter_map[c].reserve(cell.survivors.size());
        for (std::size_t s = 0; s < cell.survivors.size(); ++s) {
            b.values(c, s) = cell.survivors[s].second;
            b.gene_indices(c, s) = cell.survivors[s].first;
            b.pad_mask(c, s) = false;
            b.scatter_map[c].push_back(cell.survivors[s].first);
        }
        b.residuals[c].masked = cell.masked;
        b.residuals[c].zeros = cell.unmasked_zeros;
    }
    return b;
}

enum class SlotKind { survivor, masked, zero };

// One gene position of the rebuilt full-length sequence. `source` points at
// the flat encoder-output row (survivor) or the residual masked list (masked).
struct SlotRef {
    SlotKind kind;
    int source;
};

using FullAssignment = std::vector<std::vector<SlotRef>>; // [cell][gene]

// Reassigns encoder outputs to their original gene positions and flags the
// rest. `encoder_out` is row-flattened [batch*m, d].
inline FullAssignment unpack_scatter(const PackedBatch& b, const Eigen::MatrixXd& encoder_out) {
    if (encoder_out.rows() != static_cast<long>(b.batch) * b.m) {
        throw ValidationError("unpack_scatter: encoder output has " + std::to_string(encoder_out.rows()) +
                              " rows, batch needs " + std::to_string(static_cast<long>(b.batch) * b.m));
    }
    FullAssignment out(b.batch);
    for (int c = 0; c < b.batch; ++c) {
        out[c].assign(b.n_genes, SlotRef{SlotKind::zero, -1});
        for (std::size_t s = 0; s < b.scatter_map[c].size(); ++s) {
            out[c][b.scatter_map[c][s]] = SlotRef{SlotKind::survivor, c * b.m + static_cast<int>(s)};
        }
        for (std::size_t i = 0; i < b.residuals[c].masked.size(); ++i) {
            out[c][b.residuals[c].masked[i].gene] = SlotRef{SlotKind::masked, static_cast<int>(i)};
        }
    }
    return out;
}

// Greedy length bucketing: cells sorted by expressed-gene count are chunked
// into batches, and only the chunk order is shuffled. Keeps PAD waste low
// while the epoch order still varies with the seed.
inline std::vector<std::vector<int>> make_batches(const std::vector<int>& nnz_per_cell, int batch_size,
                                                  Rng& rng) {
    if (batch_size < 1) {
        throw ValidationError("batch_size must be positive");
    }
    std::vector<int> order(nnz_per_cell.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int c) { return nnz_per_cell[a] < nnz_per_cell[c]; });
    std::vector<std::vector<int>> batches;
    for (std::size_t i = 0; i < order.size(); i += batch_size) {
        const std::size_t end = std::min(order.size(), i + batch_size);
        batches.emplace_back(order.begin() + i, order.begin() + end);
    }
    rng.shuffle(batches);
    return batches;
}

} // namespace sct
