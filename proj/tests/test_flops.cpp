#include <catch2/catch_amalgamated.hpp>

#include <string>
#include <vector>

#include "sct/flops.hpp"

using namespace sct;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinRel;

namespace {

ArchitectureSpec exact_full(long L, StackConfig stack) {
    ArchitectureSpec s;
    s.name = "exact";
    s.variant = FlopsVariant::encoder_only_exact;
    s.seq_len_full = L;
    s.decoder = stack;
    return s;
}

} // namespace

TEST_CASE("architecture spec validation", "[flops]") {
    ArchitectureSpec ok;
    CHECK_NOTHROW(ok.validate());

    ArchitectureSpec bad = ok;
    bad.seq_len_full = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = ok;
    bad.decoder = {2, 3, 256}; // 256 % 3 != 0
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = ok;
    bad.seq_len_encoder = bad.seq_len_full + 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = ok;
    bad.n_random_features = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError); // asymmetric decoder is random-feature
    bad.variant = FlopsVariant::encoder_only_exact;
    CHECK_NOTHROW(bad.validate()); // exact attention never touches r

    bad = ok;
    bad.encoder.depth = -1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("parameter count matches the live model", "[flops]") {
    std::vector<ModelConfig> configs;
    for (Architecture arch : {Architecture::asymmetric, Architecture::encoder_only}) {
        for (int bins : {2, 7}) {
            for (int classes : {2, 9}) {
                ModelConfig c;
                c.n_genes = 23;
                c.bins = bins;
                c.encoder = {2, 2, 12};
                c.decoder = {1, 2, 8};
                c.arch = arch;
                c.n_value_classes = classes;
                c.ffn_multiplier = 3;
                configs.push_back(c);
            }
        }
    }
    ModelConfig odd;
    odd.n_genes = 40;
    odd.bins = 4;
    odd.encoder = {3, 4, 16};
    odd.decoder = {3, 2, 16};
    configs.push_back(odd);

    for (const ModelConfig& cfg : configs) {
        Model m(cfg);
        CAPTURE(cfg.n_genes, cfg.bins, static_cast<int>(cfg.arch));
        CHECK(count_parameters(spec_from(cfg, "probe", 5)) == m.parameter_count());
    }
}

TEST_CASE("medium preset sits near ten million parameters", "[flops]") {
    std::vector<ArchitectureSpec> specs = baseline_comparison_specs();
    const long n = count_parameters(specs[2]);
    CHECK(n >= 8'000'000);
    CHECK(n <= 12'000'000);
}

TEST_CASE("doubling width roughly quadruples stack parameters", "[flops]") {
    // Deep and narrow-tabled so the layer terms dominate the count.
    ArchitectureSpec s;
    s.variant = FlopsVariant::encoder_only_exact;
    s.seq_len_full = 100;
    s.decoder = {64, 8, 256};
    ArchitectureSpec wide = s;
    wide.decoder.dim = 512;
    const double ratio =
        static_cast<double>(count_parameters(wide)) / static_cast<double>(count_parameters(s));
    CHECK(ratio > 3.5);
    CHECK(ratio < 4.1);
}

TEST_CASE("training totals multiply out exactly", "[flops]") {
    CHECK_THAT(total_train_flops(9.86e12, 5e6, 5), WithinRel(2.465e20, 1e-12));
    CHECK_THAT(total_train_flops(1.06e12, 5e6, 5), WithinRel(2.65e19, 1e-12));
    CHECK_THAT(total_train_flops(3.35e11, 5e6, 5), WithinRel(8.375e18, 1e-12));
}

TEST_CASE("zero depth prices only embeddings and heads", "[flops]") {
    ArchitectureSpec s;
    s.variant = FlopsVariant::encoder_only_exact;
    s.seq_len_full = 500;
    s.decoder = {0, 4, 64};
    FlopsBreakdown b = flops_breakdown(s);
    CHECK(b.decoder_projections == 0.0);
    CHECK(b.decoder_attention == 0.0);
    CHECK(b.decoder_ffn == 0.0);
    CHECK(b.encoder_attention == 0.0);
    CHECK(b.projection == 0.0);
    CHECK(b.embedding > 0.0);
    CHECK(b.head > 0.0);
    CHECK_THAT(estimate_flops(s), WithinRel(3.0 * (b.embedding + b.head), 1e-12));

    ArchitectureSpec a;
    a.seq_len_full = 500;
    a.seq_len_encoder = 50;
    a.encoder = {0, 2, 32};
    a.decoder = {0, 2, 16};
    FlopsBreakdown ab = flops_breakdown(a);
    CHECK(ab.encoder_ffn == 0.0);
    CHECK(ab.projection > 0.0); // the width change survives an empty stack
}

TEST_CASE("halving the encoder length quarters its attention term", "[flops]") {
    ArchitectureSpec s;
    s.seq_len_full = 19264;
    s.seq_len_encoder = 1400;
    FlopsBreakdown full = flops_breakdown(s);
    ArchitectureSpec h = s;
    h.seq_len_encoder = 700;
    FlopsBreakdown half = flops_breakdown(h);
    CHECK(full.encoder_attention == 4.0 * half.encoder_attention);
    CHECK(full.encoder_projections == 2.0 * half.encoder_projections);
    CHECK(estimate_flops(h) < estimate_flops(s));
}

TEST_CASE("exact attention scales quadratically, random features linearly", "[flops]") {
    StackConfig stack = {4, 8, 256};

    double prev_ratio = 0.0;
    for (long L : {4096L, 16384L, 65536L}) {
        const double ratio = estimate_flops(exact_full(2 * L, stack)) /
                             estimate_flops(exact_full(L, stack));
        CHECK(ratio > prev_ratio); // creeping toward the quadratic limit of 4
        prev_ratio = ratio;
    }
    CHECK(prev_ratio > 3.9);
    CHECK(prev_ratio < 4.0);

    ArchitectureSpec lin = exact_full(65536, stack);
    lin.variant = FlopsVariant::encoder_only_linear;
    ArchitectureSpec lin2 = lin;
    lin2.seq_len_full *= 2;
    // Every term is linear in sequence length, so the ratio is exactly 2.
    CHECK_THAT(estimate_flops(lin2) / estimate_flops(lin), WithinRel(2.0, 1e-12));
}

TEST_CASE("packing beats the full-length exact stack", "[flops]") {
    for (long L : {4000L, 19264L}) {
        for (int depth_e : {4, 12}) {
            for (int dim_e : {256, 512}) {
                ArchitectureSpec a;
                a.seq_len_full = L;
                a.seq_len_encoder = L / 10;
                a.encoder = {depth_e, 8, dim_e};
                a.decoder = {depth_e / 2, 4, dim_e / 2};
                a.n_random_features = 256;
                ArchitectureSpec full = exact_full(L, a.encoder);
                CAPTURE(L, depth_e, dim_e);
                CHECK(estimate_flops(a) < estimate_flops(full));
            }
        }
    }
}

TEST_CASE("efficiency report normalizes by the reference", "[flops]") {
    SECTION("identical architectures land at 100 percent") {
        std::vector<ArchitectureSpec> twins(2);
        twins[0].name = "a";
        twins[1].name = "b";
        EfficiencyReport rep = efficiency_report(twins, "a");
        CHECK(rep.rows[0].cost.resource_pct == 1.0);
        CHECK(rep.rows[1].cost.resource_pct == 1.0);
    }

    SECTION("missing reference is an error") {
        std::vector<ArchitectureSpec> specs = baseline_comparison_specs();
        CHECK_THROWS_MATCHES(efficiency_report(specs, "nope"), ValidationError,
                             Catch::Matchers::MessageMatches(ContainsSubstring("nope")));
    }

    SECTION("totals are the per-sample figure times the run size") {
        std::vector<ArchitectureSpec> specs = baseline_comparison_specs();
        EfficiencyReport rep = efficiency_report(specs, "transformer", 3e4, 2.0);
        for (const EfficiencyReport::Row& r : rep.rows) {
            CHECK(r.cost.total_train == r.cost.per_sample_forward_backward * 3e4 * 2.0);
        }
    }
}

TEST_CASE("the bundled comparison reproduces the published ordering", "[flops]") {
    std::vector<ArchitectureSpec> specs = baseline_comparison_specs();
    REQUIRE(specs.size() == 3);
    EfficiencyReport rep = efficiency_report(specs, "transformer");
    const double t = rep.rows[0].cost.per_sample_forward_backward;
    const double p = rep.rows[1].cost.per_sample_forward_backward;
    const double a = rep.rows[2].cost.per_sample_forward_backward;
    CHECK(a < p);
    CHECK(p < t);
    CHECK(rep.rows[2].cost.resource_pct <= 0.05);
    CHECK(rep.rows[1].cost.resource_pct >= 0.05);
    CHECK(rep.rows[1].cost.resource_pct <= 0.20);
    CHECK(rep.rows[0].cost.resource_pct == 1.0);
}

TEST_CASE("report emitters", "[flops]") {
    std::vector<ArchitectureSpec> specs = baseline_comparison_specs();
    EfficiencyReport rep = efficiency_report(specs, "transformer");

    std::string csv = to_csv(rep);
    CHECK(csv.rfind("name,parameters,per_sample_flops,total_train_flops,resource_pct\n", 0) == 0);
    std::size_t lines = 0;
    for (char ch : csv) {
        lines += ch == '\n';
    }
    CHECK(lines == 4);
    CHECK_THAT(csv, ContainsSubstring("asymmetric"));

    std::string text = to_text(rep);
    CHECK_THAT(text, ContainsSubstring("backward costed as 2x forward"));
    CHECK_THAT(text, ContainsSubstring("100.00%"));
    CHECK_THAT(text, ContainsSubstring("transformer"));
}
