#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "sct/autodiff.hpp"
#include "sct/common.hpp"
#include "sct/discretize.hpp"
#include "sct/embedding.hpp"
#include "sct/masking.hpp"
#include "sct/packing.hpp"
#include "sct/rng.hpp"

namespace sct {

struct StackConfig {
    int depth = 2;
    int heads = 2;
    int dim = 64;
};

enum class AttentionBackend {
    exact,                  // softmax attention, O(T^2)
    linear_random_features, // positive-random-feature kernel approximation
};

enum class Objective { regression, classification };

// encoder_only runs a single full-length stack over all gene positions; the
// asymmetric variant packs survivors through the encoder first and lets a
// lighter decoder rebuild the full sequence.
enum class Architecture { asymmetric, encoder_only };

struct ModelConfig {
    int n_genes = 0;
    int bins = 100;
    StackConfig encoder{4, 2, 128};
    StackConfig decoder{2, 2, 128};
    Architecture arch = Architecture::asymmetric;
    AttentionBackend backend = AttentionBackend::exact;
    int n_random_features = 256;
    int ffn_multiplier = 4;
    ValueEmbeddingMode value_mode = ValueEmbeddingMode::auto_discretize;
    Objective objective = Objective::regression;
    int n_value_classes = 101;
    std::uint64_t seed = 1;
    // Random feature draws live on their own stream so redrawing them never
    // touches the weight init. 0 means "derive from seed".
    std::uint64_t feature_seed = 0;

    // Token embeddings are built at the dim of the first stack they feed.
    int embed_dim() const {
        return arch == Architecture::asymmetric ? encoder.dim : decoder.dim;
    }

    void validate() const {
        if (n_genes < 1) {
            throw ConfigError("n_genes must be positive");
        }
        if (bins < 2) {
            throw ConfigError("bins must be at least 2");
        }
        auto check_stack = [](const StackConfig& s, const char* name) {
            if (s.depth < 0 || s.heads < 1 || s.dim < 1) {
                throw ConfigError(std::string(name) + " stack needs depth >= 0, heads >= 1, dim >= 1");
            }
            if (s.dim % s.heads != 0) {
                throw ConfigError(std::string(name) + " dim " + std::to_string(s.dim) +
                                  " not divisible by " + std::to_string(s.heads) + " heads");
            }
        };
        check_stack(encoder, "encoder");
        check_stack(decoder, "decoder");
        if (ffn_multiplier < 1) {
            throw ConfigError("ffn_multiplier must be positive");
        }
        if (backend == AttentionBackend::linear_random_features && n_random_features < 1) {
            throw ConfigError("linear attention needs n_random_features >= 1");
        }
        if (objective == Objective::classification && n_value_classes < 2) {
            throw ConfigError("classification needs at least 2 value classes");
        }
    }

    // Published model sizes plus a cut-down shape for fast tests.
    static ModelConfig preset(const std::string& name) {
        ModelConfig c;
        if (name == "3M") {
            c.encoder = {4, 2, 128};
            c.decoder = {2, 2, 128};
        } else if (name == "10M") {
            c.encoder = {4, 8, 256};
            c.decoder = {2, 4, 256};
        } else if (name == "100M") {
            c.encoder = {12, 12, 768};
            c.decoder = {6, 8, 512};
        } else if (name == "tiny-test") {
            c.encoder = {2, 2, 32};
            c.decoder = {1, 2, 32};
            c.bins = 10;
            c.n_random_features = 16;
        } else {
            throw ConfigError("unknown preset '" + name + "' (expected 3M, 10M, 100M or tiny-test)");
        }
        return c;
    }
};

namespace detail {

inline ad::Mat randn(long rows, long cols, double scale, Rng& rng) {
    ad::Mat m(rows, cols);
    for (long j = 0; j < m.size(); ++j) {
        m.data()[j] = scale * rng.normal();
    }
    return m;
}

} // namespace detail

// Weight matrices start at N(0, 0.02), matching the embedding tables. Small
// attention logits at init also keep the random-feature kernel estimate
// tight: its variance grows with exp(|q|^2), so unit-scale queries would
// drown the linear backend in Monte Carlo noise.
constexpr double kInitStd = 0.02;

// One pre-LN residual block: x += Attn(LN(x)); x += FFN(LN(x)).
struct TransformerLayer {
    ad::Parameter ln1_gamma, ln1_beta;
    ad::Parameter wq, bq, wk, bk, wv, bv, wo, bo;
    ad::Parameter ln2_gamma, ln2_beta;
    ad::Parameter w_in, b_in, w_out, b_out;

    // Weights are stored [out, in] and applied as x * W^T.
    TransformerLayer(const std::string& p, int dim, int ffn_dim, Rng& rng)
        : ln1_gamma(p + ".ln1.gamma", ad::Mat::Ones(1, dim)),
          ln1_beta(p + ".ln1.beta", ad::Mat::Zero(1, dim)),
          wq(p + ".wq", detail::randn(dim, dim, kInitStd, rng)),
          bq(p + ".bq", ad::Mat::Zero(1, dim)),
          wk(p + ".wk", detail::randn(dim, dim, kInitStd, rng)),
          bk(p + ".bk", ad::Mat::Zero(1, dim)),
          wv(p + ".wv", detail::randn(dim, dim, kInitStd, rng)),
          bv(p + ".bv", ad::Mat::Zero(1, dim)),
          wo(p + ".wo", detail::randn(dim, dim, kInitStd, rng)),
          bo(p + ".bo", ad::Mat::Zero(1, dim)),
          ln2_gamma(p + ".ln2.gamma", ad::Mat::Ones(1, dim)),
          ln2_beta(p + ".ln2.beta", ad::Mat::Zero(1, dim)),
          w_in(p + ".ffn.w_in", detail::randn(ffn_dim, dim, kInitStd, rng)),
          b_in(p + ".ffn.b_in", ad::Mat::Zero(1, ffn_dim)),
          w_out(p + ".ffn.w_out", detail::randn(dim, ffn_dim, kInitStd, rng)),
          b_out(p + ".ffn.b_out", ad::Mat::Zero(1, dim)) {}

    void collect(std::vector<ad::Parameter*>& out) {
        for (ad::Parameter* p : {&ln1_gamma, &ln1_beta, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo,
                                 &ln2_gamma, &ln2_beta, &w_in, &b_in, &w_out, &b_out}) {
            out.push_back(p);
        }
    }
};

class Model {
public:
    ModelConfig cfg;
    AutoDiscretizer disc;
    GeneEmbeddingTable genes; // shared by encoder input and decoder assembly
    std::vector<TransformerLayer> encoder;
    std::vector<TransformerLayer> decoder;
    ad::Parameter w_proj; // [d_dec, embed_dim], bridges assembly to decoder dim
    ad::Parameter b_proj; // [1, d_dec]
    ad::Parameter head_w; // [d_dec, 1], shared regression head
    ad::Parameter cls_w;  // [n_value_classes, d_dec], classification ablation
    ad::Parameter cls_b;  // [1, n_value_classes]
    // decoder_features[layer][head] is a fixed [head_size, r] draw.
    std::vector<std::vector<ad::Mat>> decoder_features;

    explicit Model(ModelConfig config)
        : cfg(normalized(std::move(config))),
          disc(cfg.embed_dim(), cfg.bins, cfg.seed),
          genes(cfg.n_genes, cfg.embed_dim(), cfg.seed),
          w_proj("proj.w", init_mat(cfg.decoder.dim, cfg.embed_dim(), cfg.seed, "init/proj")),
          b_proj("proj.b", ad::Mat::Zero(1, cfg.decoder.dim)),
          head_w("head.w", init_mat(cfg.decoder.dim, 1, cfg.seed, "init/head")),
          cls_w("classifier.w", init_mat(cfg.n_value_classes, cfg.decoder.dim, cfg.seed, "init/classifier")),
          cls_b("classifier.b", ad::Mat::Zero(1, cfg.n_value_classes)) {
        if (cfg.arch == Architecture::asymmetric) {
            Rng rng(cfg.seed, "init/encoder");
            encoder.reserve(cfg.encoder.depth);
            for (int i = 0; i < cfg.encoder.depth; ++i) {
                encoder.emplace_back("encoder." + std::to_string(i), cfg.encoder.dim,
                                     cfg.encoder.dim * cfg.ffn_multiplier, rng);
            }
        }
        {
            Rng rng(cfg.seed, "init/decoder");
            decoder.reserve(cfg.decoder.depth);
            for (int i = 0; i < cfg.decoder.depth; ++i) {
                decoder.emplace_back("decoder." + std::to_string(i), cfg.decoder.dim,
                                     cfg.decoder.dim * cfg.ffn_multiplier, rng);
            }
        }
        redraw_features();
    }

    // Fresh positive-random-feature blocks from cfg.feature_seed; the weights
    // stay put, so the same model can be probed under several draws.
    void redraw_features() {
        const int hs = cfg.decoder.dim / cfg.decoder.heads;
        decoder_features.assign(cfg.decoder.depth, {});
        for (int l = 0; l < cfg.decoder.depth; ++l) {
            Rng rng(cfg.feature_seed, "features/decoder", static_cast<std::uint64_t>(l));
            decoder_features[l].reserve(cfg.decoder.heads);
            for (int h = 0; h < cfg.decoder.heads; ++h) {
                decoder_features[l].push_back(detail::randn(hs, cfg.n_random_features, 1.0, rng));
            }
        }
    }

    std::vector<ad::Parameter*> parameters() {
        std::vector<ad::Parameter*> out;
        for (ad::Parameter* p : disc.parameters()) {
            out.push_back(p);
        }
        out.push_back(&genes.table);
        for (TransformerLayer& l : encoder) {
            l.collect(out);
        }
        for (TransformerLayer& l : decoder) {
            l.collect(out);
        }
        out.push_back(&w_proj);
        out.push_back(&b_proj);
        out.push_back(&head_w);
        out.push_back(&cls_w);
        out.push_back(&cls_b);
        return out;
    }

    long parameter_count() {
        long n = 0;
        for (ad::Parameter* p : parameters()) {
            n += p->value.size();
        }
        return n;
    }

private:
    static ModelConfig normalized(ModelConfig c) {
        c.validate();
        if (c.feature_seed == 0) {
            c.feature_seed = derive_seed(c.seed, "features");
        }
        return c;
    }

    static ad::Mat init_mat(long rows, long cols, std::uint64_t seed, const std::string& label) {
        Rng rng(seed, label);
        return detail::randn(rows, cols, kInitStd, rng);
    }
};

namespace detail {

// phi(x) = exp(F^T x - |x|^2 / 2) / sqrt(r), elementwise positive, so the
// attention normalizer can never change sign.
inline ad::Var feature_map(ad::Tape& t, const ad::Var& x, const ad::Mat& features) {
    ad::Var proj = ad::matmul(x, t.constant(features)); // [T, r]
    ad::Var half = ad::rowwise_halfsqnorm(x);           // [T, 1]
    const double inv_sqrt_r = 1.0 / std::sqrt(double(features.cols()));
    return ad::mul_scalar(ad::exp(ad::sub_colvec(proj, half)), inv_sqrt_r);
}

// Unbiased softmax-kernel estimate: queries and keys are pre-scaled by
// hs^(-1/4) so phi(q)phi(k) targets exp(q.k / sqrt(hs)).
inline ad::Var linear_attention(ad::Tape& t, const ad::Var& q, const ad::Var& k, const ad::Var& v,
                                int batch, int heads, const std::vector<ad::Mat>& features) {
    const long T = q.rows() / batch;
    const long hs = q.cols() / heads;
    const double c = std::pow(double(hs), -0.25);
    ad::Var ones = t.constant(ad::Mat::Ones(T, 1));
    std::vector<ad::Var> cells;
    cells.reserve(batch);
    for (int b = 0; b < batch; ++b) {
        std::vector<ad::Var> heads_out;
        heads_out.reserve(heads);
        for (int h = 0; h < heads; ++h) {
            ad::Var qh = ad::mul_scalar(ad::slice_block(q, b * T, h * hs, T, hs), c);
            ad::Var kh = ad::mul_scalar(ad::slice_block(k, b * T, h * hs, T, hs), c);
            ad::Var vh = ad::slice_block(v, b * T, h * hs, T, hs);
            ad::Var qp = feature_map(t, qh, features[h]); // [T, r]
            ad::Var kp = feature_map(t, kh, features[h]); // [T, r]
            ad::Var num = ad::matmul(qp, ad::matmul(kp, vh, true, false)); // [T, hs]
            ad::Var den = ad::matmul(qp, ad::matmul(kp, ones, true, false)); // [T, 1]
            heads_out.push_back(ad::div_colvec(num, den));
        }
        cells.push_back(ad::hstack(heads_out));
    }
    return ad::vstack(cells);
}

inline ad::Var transformer_stack(ad::Tape& t, std::vector<TransformerLayer>& layers, ad::Var x,
                                 int batch, int heads, const std::vector<char>& pad,
                                 AttentionBackend backend,
                                 const std::vector<std::vector<ad::Mat>>* features,
                                 const char* stack_name) {
    if (backend == AttentionBackend::linear_random_features) {
        for (char p : pad) {
            if (p) {
                throw ValidationError("linear attention does not support padded slots");
            }
        }
    }
    for (std::size_t li = 0; li < layers.size(); ++li) {
        try {
            TransformerLayer& L = layers[li];
            ad::Var h = ad::layer_norm_rows(x, t.param(L.ln1_gamma), t.param(L.ln1_beta));
            ad::Var q = ad::add_rowvec(ad::matmul(h, t.param(L.wq), false, true), t.param(L.bq));
            ad::Var k = ad::add_rowvec(ad::matmul(h, t.param(L.wk), false, true), t.param(L.bk));
            ad::Var v = ad::add_rowvec(ad::matmul(h, t.param(L.wv), false, true), t.param(L.bv));
            ad::Var mixed = backend == AttentionBackend::exact
                                ? ad::attention_mix(q, k, v, batch, heads, pad)
                                : linear_attention(t, q, k, v, batch, heads, (*features)[li]);
            x = ad::add(x, ad::add_rowvec(ad::matmul(mixed, t.param(L.wo), false, true), t.param(L.bo)));
            ad::Var f = ad::layer_norm_rows(x, t.param(L.ln2_gamma), t.param(L.ln2_beta));
            f = ad::gelu(ad::add_rowvec(ad::matmul(f, t.param(L.w_in), false, true), t.param(L.b_in)));
            f = ad::add_rowvec(ad::matmul(f, t.param(L.w_out), false, true), t.param(L.b_out));
            x = ad::add(x, f);
        } catch (const NumericError& e) {
            throw NumericError(std::string(stack_name) + " layer " + std::to_string(li) + ": " + e.what());
        }
    }
    return x;
}

} // namespace detail

inline std::vector<char> flat_pad(const PackedBatch& b) {
    std::vector<char> pad(static_cast<std::size_t>(b.batch) * b.m, 0);
    for (int c = 0; c < b.batch; ++c) {
        for (int s = 0; s < b.m; ++s) {
            if (b.pad_mask(c, s)) {
                pad[static_cast<std::size_t>(c) * b.m + s] = 1;
            }
        }
    }
    return pad;
}

// Full-attention stack over packed survivor tokens [batch*m, d_enc]. PAD
// slots neither attend nor get attended to, and their rows leave as zeros
// (layer norm would otherwise bleed its bias into them).
inline ad::Var encoder_forward(ad::Tape& t, Model& m, const ad::Var& tokens, int batch,
                               const std::vector<char>& pad) {
    if (tokens.rows() % batch != 0 || static_cast<long>(pad.size()) != tokens.rows()) {
        throw ValidationError("encoder_forward: tokens/pad shape mismatch");
    }
    ad::Var x = detail::transformer_stack(t, m.encoder, tokens, batch, m.cfg.encoder.heads, pad,
                                          AttentionBackend::exact, nullptr, "encoder");
    Eigen::VectorXd keep(tokens.rows());
    for (long i = 0; i < keep.size(); ++i) {
        keep(i) = pad[i] ? 0.0 : 1.0;
    }
    return ad::mul_colvec(x, t.constant(keep));
}

namespace detail {

// Rebuilds the full-length sequence for a batch: survivor positions carry
// encoder outputs (or their value embeddings when there is no encoder),
// masked positions their replacement embedding, untouched zeros the ZERO
// embedding. Gene embeddings are added at every position.
inline ad::Var assemble_full_input(ad::Tape& t, Model& m, const PackedBatch& packed,
                                   const ad::Var* encoder_out) {
    const int n = packed.n_genes;
    const long total = static_cast<long>(packed.batch) * n;
    if (encoder_out) {
        unpack_scatter(packed, encoder_out->value()); // shape check
    }

    std::vector<int> surv_src, surv_dst;
    Eigen::VectorXd surv_values(encoder_out ? 0 : total); // only sized when embedding by value
    std::vector<int> mask_dst;
    std::vector<int> value_dst;
    std::vector<double> value_inputs;
    std::vector<int> zero_dst;
    std::vector<int> coverage(total, 0);
    long n_surv = 0;
    for (int c = 0; c < packed.batch; ++c) {
        for (std::size_t s = 0; s < packed.scatter_map[c].size(); ++s) {
            const int dst = c * n + packed.scatter_map[c][s];
            surv_src.push_back(c * packed.m + static_cast<int>(s));
            surv_dst.push_back(dst);
            if (!encoder_out) {
                surv_values(n_surv) = packed.values(c, s);
            }
            ++n_surv;
            ++coverage[dst];
        }
        for (const MaskedValue& mv : packed.residuals[c].masked) {
            const int dst = c * n + mv.gene;
            ++coverage[dst];
            switch (mv.kind) {
            case Replacement::mask_token:
                mask_dst.push_back(dst);
                break;
            case Replacement::random_value:
                value_dst.push_back(dst);
                value_inputs.push_back(mv.input_value);
                break;
            case Replacement::keep:
                if (mv.was_zero) {
                    zero_dst.push_back(dst);
                } else {
                    value_dst.push_back(dst);
                    value_inputs.push_back(mv.input_value);
                }
                break;
            }
        }
        for (int g : packed.residuals[c].zeros) {
            zero_dst.push_back(c * n + g);
            ++coverage[c * n + g];
        }
    }
    for (long i = 0; i < total; ++i) {
        if (coverage[i] != 1) {
            throw ValidationError("assembly covers position " + std::to_string(i) + " " +
                                  std::to_string(coverage[i]) + " times");
        }
    }

    ad::Var acc;
    if (encoder_out) {
        acc = ad::scatter_rows(ad::gather_rows(*encoder_out, std::move(surv_src)),
                               std::move(surv_dst), total);
    } else {
        surv_values.conservativeResize(n_surv);
        acc = ad::scatter_rows(value_embedding(t, m.disc, surv_values, m.cfg.value_mode),
                               std::move(surv_dst), total);
    }
    if (!mask_dst.empty()) {
        std::vector<int> rows(mask_dst.size(), m.genes.mask_row());
        acc = ad::add(acc, ad::scatter_rows(ad::gather_rows(t.param(m.genes.table), std::move(rows)),
                                            std::move(mask_dst), total));
    }
    if (!value_dst.empty()) {
        Eigen::VectorXd vals = Eigen::Map<Eigen::VectorXd>(value_inputs.data(), value_inputs.size());
        acc = ad::add(acc, ad::scatter_rows(value_embedding(t, m.disc, vals, m.cfg.value_mode),
                                            std::move(value_dst), total));
    }
    if (!zero_dst.empty()) {
        std::vector<int> rows(zero_dst.size(), m.genes.zero_row());
        acc = ad::add(acc, ad::scatter_rows(ad::gather_rows(t.param(m.genes.table), std::move(rows)),
                                            std::move(zero_dst), total));
    }
    std::vector<int> gene_rows(total);
    for (int c = 0; c < packed.batch; ++c) {
        for (int g = 0; g < n; ++g) {
            gene_rows[static_cast<std::size_t>(c) * n + g] = g;
        }
    }
    acc = ad::add(acc, ad::gather_rows(t.param(m.genes.table), std::move(gene_rows)));
    if (encoder_out) {
        return ad::add_rowvec(ad::matmul(acc, t.param(m.w_proj), false, true), t.param(m.b_proj));
    }
    return acc;
}

} // namespace detail

inline ad::Var assemble_decoder_input(ad::Tape& t, Model& m, const ad::Var& encoder_out,
                                      const PackedBatch& packed) {
    return detail::assemble_full_input(t, m, packed, &encoder_out);
}

// Bidirectional stack over the rebuilt full-length sequence [batch*n, d_dec].
inline ad::Var decoder_forward(ad::Tape& t, Model& m, const ad::Var& full, int batch,
                               std::optional<AttentionBackend> backend = std::nullopt) {
    if (full.rows() % batch != 0) {
        throw ValidationError("decoder_forward: rows not divisible by batch");
    }
    std::vector<char> pad(full.rows(), 0);
    return detail::transformer_stack(t, m.decoder, full, batch, m.cfg.decoder.heads, pad,
                                     backend.value_or(m.cfg.backend), &m.decoder_features, "decoder");
}

// Shared linear head: one scalar per position.
inline ad::Var predict_values(ad::Tape& t, Model& m, const ad::Var& decoder_out) {
    return ad::matmul(decoder_out, t.param(m.head_w));
}

inline ad::Var predict_logits(ad::Tape& t, Model& m, const ad::Var& decoder_out) {
    return ad::add_rowvec(ad::matmul(decoder_out, t.param(m.cls_w), false, true), t.param(m.cls_b));
}

// Coordinatewise max over each cell's pooled rows.
inline ad::Var cell_embedding(const ad::Var& x, std::vector<std::vector<int>> pools) {
    return ad::maxpool_groups(x, std::move(pools));
}

// Pools over packed encoder slots, PAD excluded.
inline std::vector<std::vector<int>> encoder_pools(const PackedBatch& b) {
    std::vector<std::vector<int>> pools(b.batch);
    for (int c = 0; c < b.batch; ++c) {
        for (int s = 0; s < b.m; ++s) {
            if (!b.pad_mask(c, s)) {
                pools[c].push_back(c * b.m + s);
            }
        }
    }
    return pools;
}

// Pools over full-length decoder positions.
inline std::vector<std::vector<int>> full_pools(int batch, int n_genes) {
    std::vector<std::vector<int>> pools(batch);
    for (int c = 0; c < batch; ++c) {
        pools[c].resize(n_genes);
        for (int g = 0; g < n_genes; ++g) {
            pools[c][g] = c * n_genes + g;
        }
    }
    return pools;
}

struct Forward {
    ad::Var encoder_out; // unset for encoder_only
    ad::Var decoder_out; // [batch * n_genes, d_dec]
    ad::Var output;      // [batch * n_genes, 1] values, or [.., n_value_classes] logits
};

inline Forward forward_batch(ad::Tape& t, Model& m, const PackedBatch& packed) {
    Forward f;
    if (m.cfg.arch == Architecture::asymmetric) {
        ad::Var tokens = embed_tokens(t, packed, m.disc, m.genes, m.cfg.value_mode);
        f.encoder_out = encoder_forward(t, m, tokens, packed.batch, flat_pad(packed));
        ad::Var full = assemble_decoder_input(t, m, f.encoder_out, packed);
        f.decoder_out = decoder_forward(t, m, full, packed.batch);
    } else {
        ad::Var full = detail::assemble_full_input(t, m, packed, nullptr);
        f.decoder_out = decoder_forward(t, m, full, packed.batch);
    }
    f.output = m.cfg.objective == Objective::regression ? predict_values(t, m, f.decoder_out)
                                                        : predict_logits(t, m, f.decoder_out);
    return f;
}

// ---- checkpoint io ----

namespace detail {

inline const char* to_string(Architecture a) {
    return a == Architecture::asymmetric ? "asymmetric" : "encoder_only";
}
inline const char* to_string(AttentionBackend b) {
    return b == AttentionBackend::exact ? "exact" : "linear_random_features";
}
inline const char* to_string(Objective o) {
    return o == Objective::regression ? "regression" : "classification";
}
inline const char* to_string(ValueEmbeddingMode m) {
    return m == ValueEmbeddingMode::auto_discretize ? "auto_discretize" : "round_bin";
}

template <typename E>
inline E enum_from(const std::string& s, std::initializer_list<std::pair<const char*, E>> table,
                   const char* what) {
    for (const auto& [name, value] : table) {
        if (s == name) {
            return value;
        }
    }
    throw ConfigError("unknown " + std::string(what) + " '" + s + "'");
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return {
        {"n_genes", c.n_genes},
        {"bins", c.bins},
        {"encoder", {{"depth", c.encoder.depth}, {"heads", c.encoder.heads}, {"dim", c.encoder.dim}}},
        {"decoder", {{"depth", c.decoder.depth}, {"heads", c.decoder.heads}, {"dim", c.decoder.dim}}},
        {"arch", to_string(c.arch)},
        {"attention_backend", to_string(c.backend)},
        {"n_random_features", c.n_random_features},
        {"ffn_multiplier", c.ffn_multiplier},
        {"value_mode", to_string(c.value_mode)},
        {"objective", to_string(c.objective)},
        {"n_value_classes", c.n_value_classes},
        {"seed", c.seed},
        {"feature_seed", c.feature_seed},
    };
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.n_genes = j.at("n_genes").get<int>();
        c.bins = j.at("bins").get<int>();
        auto stack = [&](const char* key) {
            const auto& s = j.at(key);
            return StackConfig{s.at("depth").get<int>(), s.at("heads").get<int>(), s.at("dim").get<int>()};
        };
        c.encoder = stack("encoder");
        c.decoder = stack("decoder");
        c.arch = enum_from<Architecture>(j.at("arch").get<std::string>(),
                                         {{"asymmetric", Architecture::asymmetric},
                                          {"encoder_only", Architecture::encoder_only}},
                                         "architecture");
        c.backend = enum_from<AttentionBackend>(
            j.at("attention_backend").get<std::string>(),
            {{"exact", AttentionBackend::exact},
             {"linear_random_features", AttentionBackend::linear_random_features}},
            "attention backend");
        c.n_random_features = j.at("n_random_features").get<int>();
        c.ffn_multiplier = j.at("ffn_multiplier").get<int>();
        c.value_mode = enum_from<ValueEmbeddingMode>(
            j.at("value_mode").get<std::string>(),
            {{"auto_discretize", ValueEmbeddingMode::auto_discretize},
             {"round_bin", ValueEmbeddingMode::round_bin}},
            "value embedding mode");
        c.objective = enum_from<Objective>(j.at("objective").get<std::string>(),
                                           {{"regression", Objective::regression},
                                            {"classification", Objective::classification}},
                                           "objective");
        c.n_value_classes = j.at("n_value_classes").get<int>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.feature_seed = j.at("feature_seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("bad checkpoint config: ") + e.what());
    }
    return c;
}

constexpr char kCheckpointMagic[8] = {'S', 'C', 'T', 'C', 'H', 'K', '0', '1'};

inline void write_u64(std::ostream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline std::uint64_t read_u64(std::istream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) {
        throw ParseError("checkpoint truncated");
    }
    return v;
}

} // namespace detail

inline void save_checkpoint(const std::string& path, Model& model) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + path);
    }
    out.write(detail::kCheckpointMagic, sizeof detail::kCheckpointMagic);
    const std::string config = detail::config_to_json(model.cfg).dump();
    detail::write_u64(out, config.size());
    out.write(config.data(), static_cast<std::streamsize>(config.size()));
    std::vector<ad::Parameter*> params = model.parameters();
    detail::write_u64(out, params.size());
    for (const ad::Parameter* p : params) {
        detail::write_u64(out, p->name.size());
        out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
        detail::write_u64(out, static_cast<std::uint64_t>(p->value.rows()));
        detail::write_u64(out, static_cast<std::uint64_t>(p->value.cols()));
        out.write(reinterpret_cast<const char*>(p->value.data()),
                  static_cast<std::streamsize>(p->value.size() * sizeof(double)));
    }
    if (!out) {
        throw IoError("write failed for " + path);
    }
}

inline Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read " + path);
    }
    char magic[sizeof detail::kCheckpointMagic];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, detail::kCheckpointMagic, sizeof magic) != 0) {
        throw ParseError(path + " is not a checkpoint file");
    }
    const std::uint64_t config_len = detail::read_u64(in);
    std::string config(config_len, '\0');
    in.read(config.data(), static_cast<std::streamsize>(config_len));
    if (!in) {
        throw ParseError("checkpoint truncated");
    }
    nlohmann::json j = nlohmann::json::parse(config, nullptr, false);
    if (j.is_discarded()) {
        throw ParseError("checkpoint config is not valid json");
    }
    Model model(detail::config_from_json(j));

    std::map<std::string, ad::Mat> tensors;
    const std::uint64_t n_tensors = detail::read_u64(in);
    for (std::uint64_t i = 0; i < n_tensors; ++i) {
        const std::uint64_t name_len = detail::read_u64(in);
        std::string name(name_len, '\0');
        in.read(name.data(), static_cast<std::streamsize>(name_len));
        const std::uint64_t rows = detail::read_u64(in);
        const std::uint64_t cols = detail::read_u64(in);
        ad::Mat value(rows, cols);
        in.read(reinterpret_cast<char*>(value.data()),
                static_cast<std::streamsize>(value.size() * sizeof(double)));
        if (!in) {
            throw ParseError("checkpoint truncated");
        }
        if (tensors.count(name)) {
            throw ValidationError("checkpoint repeats tensor '" + name + "'");
        }
        tensors.emplace(std::move(name), std::move(value));
    }

    for (ad::Parameter* p : model.parameters()) {
        auto it = tensors.find(p->name);
        if (it == tensors.end()) {
            throw ValidationError("checkpoint missing tensor '" + p->name + "'");
        }
        if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols()) {
            throw ValidationError("checkpoint tensor '" + p->name + "' has wrong shape");
        }
        p->value = std::move(it->second);
        tensors.erase(it);
    }
    if (!tensors.empty()) {
        throw ValidationError("checkpoint has unexpected tensor '" + tensors.begin()->first + "'");
    }
    return model;
}

} // namespace sct
