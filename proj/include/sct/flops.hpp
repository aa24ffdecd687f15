#pragma once

#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sct/common.hpp"
#include "sct/model.hpp"

namespace sct {

// Architecture families the cost model prices. The `decoder` stack always
// runs at full sequence length; the encoder-only variants have no separate
// encoder, matching how Architecture::encoder_only is wired. The asymmetric
// family is the published design: an exact-attention encoder over the packed
// survivors plus a random-feature decoder over the full gene axis.
enum class FlopsVariant { encoder_only_exact, encoder_only_linear, asymmetric };

struct ArchitectureSpec {
    std::string name = "unnamed";
    FlopsVariant variant = FlopsVariant::asymmetric;
    long seq_len_full = 19264;   // gene axis
    long seq_len_encoder = 1400; // packed survivors, asymmetric only
    StackConfig encoder = {4, 8, 256};
    StackConfig decoder = {2, 4, 256};
    int bins = 100;
    int n_random_features = 256;
    int ffn_multiplier = 4;
    int n_value_classes = 101; // classifier head rows, parameter count only
    std::optional<long> params_declared;

    int embed_dim() const {
        return variant == FlopsVariant::asymmetric ? encoder.dim : decoder.dim;
    }

    void validate() const {
        if (seq_len_full < 1) {
            throw ConfigError(name + ": seq_len_full must be positive");
        }
        auto check_stack = [&](const StackConfig& s, const char* which) {
            if (s.depth < 0 || s.heads < 1 || s.dim < 1 || s.dim % s.heads != 0) {
                throw ConfigError(name + ": " + which +
                                  " stack needs depth >= 0 and dim divisible by heads");
            }
        };
        check_stack(decoder, "decoder");
        if (variant == FlopsVariant::asymmetric) {
            check_stack(encoder, "encoder");
            if (seq_len_encoder < 1 || seq_len_encoder > seq_len_full) {
                throw ConfigError(name + ": seq_len_encoder must lie in [1, seq_len_full]");
            }
        }
        if (variant != FlopsVariant::encoder_only_exact && n_random_features < 1) {
            throw ConfigError(name + ": random-feature attention needs n_random_features >= 1");
        }
        if (bins < 2 || ffn_multiplier < 1 || n_value_classes < 2) {
            throw ConfigError(name + ": bins >= 2, ffn_multiplier >= 1, n_value_classes >= 2");
        }
    }
};

// Cost-model view of a runnable config. Parameter shapes carry over exactly;
// the asymmetric variant prices its decoder attention as random-feature
// regardless of cfg.backend, so only pass exact-decoder configs when the
// parameter count is all you need.
inline ArchitectureSpec spec_from(const ModelConfig& cfg, std::string name,
                                  long seq_len_encoder = 1400) {
    cfg.validate();
    ArchitectureSpec s;
    s.name = std::move(name);
    if (cfg.arch == Architecture::asymmetric) {
        s.variant = FlopsVariant::asymmetric;
    } else {
        s.variant = cfg.backend == AttentionBackend::exact ? FlopsVariant::encoder_only_exact
                                                           : FlopsVariant::encoder_only_linear;
    }
    s.seq_len_full = cfg.n_genes;
    s.seq_len_encoder = std::min<long>(seq_len_encoder, cfg.n_genes);
    s.encoder = cfg.encoder;
    s.decoder = cfg.decoder;
    s.bins = cfg.bins;
    s.n_random_features = cfg.n_random_features;
    s.ffn_multiplier = cfg.ffn_multiplier;
    s.n_value_classes = cfg.n_value_classes;
    return s;
}

// Forward-pass FLOPs split by term, matmuls only (2*m*n*k per product;
// softmax, layer norm and embedding lookups are free). Mirrors the ops the
// model actually runs.
struct FlopsBreakdown {
    double encoder_projections = 0.0;
    double encoder_attention = 0.0;
    double encoder_ffn = 0.0;
    double decoder_projections = 0.0;
    double decoder_attention = 0.0;
    double decoder_ffn = 0.0;
    double embedding = 0.0;  // auto-discretizer per embedded token
    double projection = 0.0; // encoder-to-decoder width change
    double head = 0.0;

    double forward() const {
        return encoder_projections + encoder_attention + encoder_ffn + decoder_projections +
               decoder_attention + decoder_ffn + embedding + projection + head;
    }
};

namespace detail {

// q/k/v/o projections: four [L,d]x[d,d] products per layer.
inline double attn_projection_flops(double L, double d) {
    return 8.0 * L * d * d;
}

// Scores [L,d_h]x[d_h,L] and weighted values [L,L]x[L,d_h], summed over heads.
inline double exact_attention_flops(double L, double d) {
    return 4.0 * L * L * d;
}

// Random-feature factorization: feature maps for q and k, k'v and q(k'v),
// plus the two normalizer products per head.
inline double linear_attention_flops(double L, double d, double heads, double r) {
    return 8.0 * L * r * d + 4.0 * L * r * heads;
}

// Two matmuls through the f*d hidden layer.
inline double ffn_flops(double L, double d, double f) {
    return 4.0 * L * f * d * d;
}

// Auto-discretizer per token: w1 [T,1]x[1,b], w2 [T,b]x[b,b], table [T,b]x[b,d].
inline double discretizer_flops(double tokens, double b, double d) {
    return tokens * (2.0 * b + 2.0 * b * b + 2.0 * b * d);
}

} // namespace detail

inline FlopsBreakdown flops_breakdown(const ArchitectureSpec& s) {
    s.validate();
    FlopsBreakdown out;
    const double L = static_cast<double>(s.seq_len_full);
    const double f = s.ffn_multiplier;
    const double r = s.n_random_features;

    if (s.variant == FlopsVariant::asymmetric) {
        const double Le = static_cast<double>(s.seq_len_encoder);
        const double de = s.encoder.dim;
        out.encoder_projections = s.encoder.depth * detail::attn_projection_flops(Le, de);
        out.encoder_attention = s.encoder.depth * detail::exact_attention_flops(Le, de);
        out.encoder_ffn = s.encoder.depth * detail::ffn_flops(Le, de, f);
        out.embedding = detail::discretizer_flops(Le, s.bins, de);
        out.projection = 2.0 * L * de * s.decoder.dim;
    } else {
        out.embedding = detail::discretizer_flops(L, s.bins, s.decoder.dim);
    }

    const double dd = s.decoder.dim;
    out.decoder_projections = s.decoder.depth * detail::attn_projection_flops(L, dd);
    out.decoder_attention =
        s.decoder.depth * (s.variant == FlopsVariant::encoder_only_exact
                               ? detail::exact_attention_flops(L, dd)
                               : detail::linear_attention_flops(L, dd, s.decoder.heads, r));
    out.decoder_ffn = s.decoder.depth * detail::ffn_flops(L, dd, f);
    out.head = 2.0 * L * dd;
    return out;
}

// Per-sample forward + backward, with the backward pass costed at twice the
// forward pass.
inline double estimate_flops(const ArchitectureSpec& s) {
    return 3.0 * flops_breakdown(s).forward();
}

inline double total_train_flops(double per_sample, double n_samples, double n_epochs) {
    return per_sample * n_samples * n_epochs;
}

inline long count_parameters(const ArchitectureSpec& s) {
    s.validate();
    const long de = s.embed_dim();
    const long dd = s.decoder.dim;
    const long f = s.ffn_multiplier;
    auto layer = [f](long d) { return 4 * d * d + 2 * f * d * d + 9 * d + f * d; };
    long n = 0;
    n += s.bins + static_cast<long>(s.bins) * s.bins + 1 + de * s.bins; // discretizer
    n += (s.seq_len_full + 3) * de;                                     // gene table + specials
    if (s.variant == FlopsVariant::asymmetric) {
        n += s.encoder.depth * layer(s.encoder.dim);
    }
    n += s.decoder.depth * layer(dd);
    n += dd * de + dd;                         // width projection
    n += dd;                                   // value head
    n += static_cast<long>(s.n_value_classes) * dd + s.n_value_classes; // class head
    return n;
}

struct CostReport {
    double per_sample_forward_backward = 0.0;
    double total_train = 0.0;
    double resource_pct = 0.0; // fraction of the reference total
    long parameter_count = 0;
};

struct EfficiencyReport {
    struct Row {
        std::string name;
        CostReport cost;
    };
    std::vector<Row> rows;
    std::string reference;
    double n_samples = 0.0;
    double n_epochs = 0.0;
};

inline EfficiencyReport efficiency_report(std::span<const ArchitectureSpec> specs,
                                          const std::string& reference, double n_samples = 5e6,
                                          double n_epochs = 5.0) {
    if (specs.empty()) {
        throw ValidationError("efficiency_report: no architectures given");
    }
    double reference_total = 0.0;
    bool found = false;
    for (const ArchitectureSpec& s : specs) {
        if (s.name == reference) {
            reference_total = total_train_flops(estimate_flops(s), n_samples, n_epochs);
            found = true;
        }
    }
    if (!found) {
        throw ValidationError("efficiency_report: reference '" + reference +
                              "' is not among the given architectures");
    }
    EfficiencyReport rep;
    rep.reference = reference;
    rep.n_samples = n_samples;
    rep.n_epochs = n_epochs;
    for (const ArchitectureSpec& s : specs) {
        CostReport c;
        c.per_sample_forward_backward = estimate_flops(s);
        c.total_train = total_train_flops(c.per_sample_forward_backward, n_samples, n_epochs);
        c.resource_pct = c.total_train / reference_total;
        c.parameter_count = count_parameters(s);
        rep.rows.push_back({s.name, c});
    }
    return rep;
}

inline std::string to_csv(const EfficiencyReport& rep) {
    std::string out = "name,parameters,per_sample_flops,total_train_flops,resource_pct\n";
    char line[256];
    for (const EfficiencyReport::Row& r : rep.rows) {
        std::snprintf(line, sizeof line, "%s,%ld,%.6e,%.6e,%.6f\n", r.name.c_str(),
                      r.cost.parameter_count, r.cost.per_sample_forward_backward,
                      r.cost.total_train, r.cost.resource_pct);
        out += line;
    }
    return out;
}

inline std::string to_text(const EfficiencyReport& rep) {
    std::string out;
    out += "# matmul FLOPs only, 2*m*n*k per product; backward costed as 2x forward\n";
    char line[256];
    std::snprintf(line, sizeof line, "# totals assume %.3g samples x %.3g epochs; resource vs '%s'\n",
                  rep.n_samples, rep.n_epochs, rep.reference.c_str());
    out += line;
    std::snprintf(line, sizeof line, "%-16s %12s %14s %14s %10s\n", "name", "params",
                  "flops/sample", "total", "resource");
    out += line;
    for (const EfficiencyReport::Row& r : rep.rows) {
        std::snprintf(line, sizeof line, "%-16s %12ld %14.4e %14.4e %9.2f%%\n", r.name.c_str(),
                      r.cost.parameter_count, r.cost.per_sample_forward_backward,
                      r.cost.total_train, 100.0 * r.cost.resource_pct);
        out += line;
    }
    return out;
}

// The bundled three-way comparison at the published sparsity profile: a
// full-attention transformer and a same-shape random-feature model over all
// 19,264 genes, against the asymmetric medium preset. Baseline width/depth
// sits at the classic 12-layer encoder shape.
inline std::vector<ArchitectureSpec> baseline_comparison_specs() {
    std::vector<ArchitectureSpec> specs(3);
    specs[0].name = "transformer";
    specs[0].variant = FlopsVariant::encoder_only_exact;
    specs[0].decoder = {12, 8, 256};

    specs[1].name = "performer";
    specs[1].variant = FlopsVariant::encoder_only_linear;
    specs[1].decoder = {12, 8, 256};
    specs[1].n_random_features = 256;

    ModelConfig medium = ModelConfig::preset("10M");
    medium.n_genes = 19264;
    specs[2] = spec_from(medium, "asymmetric", 1400);
    return specs;
}

} // namespace sct
