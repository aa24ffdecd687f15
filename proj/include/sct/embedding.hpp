#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "sct/autodiff.hpp"
#include "sct/common.hpp"
#include "sct/discretize.hpp"
#include "sct/packing.hpp"
#include "sct/rng.hpp"

namespace sct {

// Gene identity embeddings plus the three special rows appended after the
// gene ids: MASK (masked position), PAD (padding slot), ZERO (unexpressed).
class GeneEmbeddingTable {
public:
    int n_genes;
    int dim;
    ad::Parameter table; // [n_genes + 3, dim]

    GeneEmbeddingTable(int n_genes_, int dim_, std::uint64_t seed,
                       const std::string& name = "gene_embed.table")
        : n_genes(n_genes_), dim(dim_), table(name, ad::Mat(n_genes_ + 3, dim_)) {
        Rng rng(seed, name);
        for (long j = 0; j < table.value.size(); ++j) {
            table.value.data()[j] = 0.02 * rng.normal();
        }
    }

    int mask_row() const {
        return n_genes;
    }
    int pad_row() const {
        return n_genes + 1;
    }
    int zero_row() const {
        return n_genes + 2;
    }
};

enum class ValueEmbeddingMode {
    auto_discretize, // learned soft binning
    round_bin,       // hard nearest-integer bin into the same table columns
};

// Value embeddings for a column of scalars. In round_bin mode the value is
// snapped to its nearest-integer bin and the matching column of the
// discretizer table is used directly, which keeps the parameter set of the
// two modes identical.
inline ad::Var value_embedding(ad::Tape& t, AutoDiscretizer& disc, const Eigen::VectorXd& values,
                               ValueEmbeddingMode mode) {
    if (mode == ValueEmbeddingMode::auto_discretize) {
        return disc.forward(t, values).embedding;
    }
    ad::Mat onehot = ad::Mat::Zero(values.size(), disc.bins);
    for (long i = 0; i < values.size(); ++i) {
        const int bin = baseline_bin(values(i), BinScheme::round_zero);
        onehot(i, std::min(bin, disc.bins - 1)) = 1.0;
    }
    return ad::matmul(t.constant(std::move(onehot)), t.param(disc.table), false, true);
}

// Token embeddings for a packed batch: value embedding plus gene embedding
// per slot, PAD slots zeroed. Output is row-flattened [batch*m, dim].
inline ad::Var embed_tokens(ad::Tape& t, const PackedBatch& batch, AutoDiscretizer& disc,
                            GeneEmbeddingTable& genes,
                            ValueEmbeddingMode mode = ValueEmbeddingMode::auto_discretize) {
    if (disc.dim != genes.dim) {
        throw ValidationError("embed_tokens: value and gene embedding dims disagree");
    }
    const long total = static_cast<long>(batch.batch) * batch.m;
    Eigen::VectorXd values(total);
    std::vector<int> gene_rows(total);
    Eigen::VectorXd keep(total);
    for (int c = 0; c < batch.batch; ++c) {
        for (int s = 0; s < batch.m; ++s) {
            const long i = static_cast<long>(c) * batch.m + s;
            const bool pad = batch.pad_mask(c, s);
            values(i) = pad ? 0.0 : batch.values(c, s);
            const int g = batch.gene_indices(c, s);
            if (!pad && (g < 0 || g >= genes.n_genes)) {
                throw ValidationError("embed_tokens: unknown gene index " + std::to_string(g));
            }
            gene_rows[i] = pad ? genes.pad_row() : g;
            keep(i) = pad ? 0.0 : 1.0;
        }
    }
    ad::Var e = value_embedding(t, disc, values, mode);
    ad::Var g = ad::gather_rows(t.param(genes.table), std::move(gene_rows));
    return ad::mul_colvec(ad::add(e, g), t.constant(keep));
}

} // namespace sct
