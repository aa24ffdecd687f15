#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "fixtures.hpp"
#include "helpers.hpp"
#include "sct/expression.hpp"
#include "sct/rng.hpp"
#include "sct/synthetic.hpp"

using namespace sct;

TEST_CASE("coordinate format parses header and triplets", "[data]") {
    TempDir tmp;
    write_text(tmp.file("m.txt"),
               "2 10 11\n"
               "0 0 1\n0 1 2\n0 3 4\n0 5 7\n0 6 8\n0 8 3\n0 9 2\n"
               "1 0 1\n1 3 3\n1 4 2\n1 5 1\n");
    auto m = load_matrix(tmp.file("m.txt"));
    CHECK(m.n_cells == 2);
    CHECK(m.n_genes == 10);
    CHECK(m.entries.size() == 11);
    CHECK(m.nnz(0) == 7);
    CHECK(m.cell(1)[1].gene == 3);
    CHECK(m.cell(1)[1].value == 3.0);
}

TEST_CASE("malformed line reports its line number", "[data]") {
    TempDir tmp;
    write_text(tmp.file("bad.txt"), "1 3 2\n0 0 1\n0 two 1\n");
    CHECK_THROWS_MATCHES(load_matrix(tmp.file("bad.txt")), ParseError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring(":3:")));
}

TEST_CASE("wrong entry count vs header is rejected", "[data]") {
    TempDir tmp;
    write_text(tmp.file("bad.txt"), "1 3 2\n0 0 1\n");
    CHECK_THROWS_AS(load_matrix(tmp.file("bad.txt")), ParseError);
}

TEST_CASE("duplicate (cell, gene) pair is rejected", "[data]") {
    TempDir tmp;
    write_text(tmp.file("dup.txt"), "1 10 2\n0 3 4.5\n0 3 4.5\n");
    CHECK_THROWS_MATCHES(load_matrix(tmp.file("dup.txt"), Stage::normalized), ValidationError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("duplicate")));
}

TEST_CASE("out-of-range indices are rejected", "[data]") {
    TempDir tmp;
    write_text(tmp.file("oob.txt"), "1 10 1\n0 10 1\n");
    CHECK_THROWS_AS(load_matrix(tmp.file("oob.txt")), ValidationError);
    write_text(tmp.file("oob2.txt"), "1 10 1\n1 0 1\n");
    CHECK_THROWS_AS(load_matrix(tmp.file("oob2.txt")), ValidationError);
}

TEST_CASE("explicit zeros and negative values are rejected", "[data]") {
    TempDir tmp;
    write_text(tmp.file("z.txt"), "1 10 1\n0 0 0\n");
    CHECK_THROWS_AS(load_matrix(tmp.file("z.txt")), ValidationError);
    write_text(tmp.file("n.txt"), "1 10 1\n0 0 -2\n");
    CHECK_THROWS_AS(load_matrix(tmp.file("n.txt")), ValidationError);
}

TEST_CASE("raw counts must be integers", "[data]") {
    TempDir tmp;
    write_text(tmp.file("f.txt"), "1 10 1\n0 0 2.5\n");
    CHECK_THROWS_AS(load_matrix(tmp.file("f.txt"), Stage::raw_counts), ValidationError);
    CHECK_NOTHROW(load_matrix(tmp.file("f.txt"), Stage::normalized));
}

TEST_CASE("worked 2x10 example stores 7 entries for the first cell", "[data]") {
    auto m = example_two_cell_matrix();
    CHECK(m.nnz(0) == 7);
    CHECK(m.nnz(1) == 5);
    std::set<int> genes;
    for (const auto& e : m.cell(0)) genes.insert(e.gene);
    CHECK(genes == std::set<int>{0, 1, 3, 5, 6, 8, 9});
}

TEST_CASE("save then load round-trips bit-exactly", "[data]") {
    TempDir tmp;
    SyntheticSpec spec;
    spec.n_cells = 20;
    spec.n_genes = 50;
    spec.n_cell_types = 3;
    spec.sparsity = 0.8;
    spec.seed = 7;
    auto data = synthesize_dataset(spec);
    auto norm = normalize(data.matrix);

    save_matrix(tmp.file("a.txt"), norm);
    auto back = load_matrix(tmp.file("a.txt"), Stage::normalized);
    CHECK(back.n_cells == norm.n_cells);
    CHECK(back.n_genes == norm.n_genes);
    REQUIRE(back.entries.size() == norm.entries.size());
    CHECK(back.entries == norm.entries);

    save_matrix(tmp.file("b.txt"), back);
    CHECK(read_text(tmp.file("a.txt")) == read_text(tmp.file("b.txt")));
}

TEST_CASE("dense csv rows load as sparse entries", "[data]") {
    TempDir tmp;
    write_text(tmp.file("d.csv"), "0,2,0,1\n3,0,0,0\n");
    auto m = load_matrix(tmp.file("d.csv"));
    CHECK(m.n_cells == 2);
    CHECK(m.n_genes == 4);
    REQUIRE(m.entries.size() == 3);
    CHECK(m.entries[0] == Entry{0, 1, 2.0});
    CHECK(m.entries[2] == Entry{1, 0, 3.0});

    write_text(tmp.file("ragged.csv"), "0,2,0,1\n3,0\n");
    CHECK_THROWS_AS(load_matrix(tmp.file("ragged.csv")), ParseError);
}

TEST_CASE("quality_filter keeps cells with enough expressed genes", "[data]") {
    SparseExpressionMatrix m;
    m.n_cells = 3;
    m.n_genes = 300;
    const int counts[3] = {250, 199, 201};
    for (int c = 0; c < 3; ++c) {
        for (int g = 0; g < counts[c]; ++g) {
            m.entries.push_back({c, g, 1.0});
        }
    }
    m.finalize();

    std::vector<int> kept;
    auto f = quality_filter(m, 200, &kept);
    CHECK(f.n_cells == 2);
    CHECK(kept == std::vector<int>{0, 2});
    CHECK(f.nnz(0) == 250);
    CHECK(f.nnz(1) == 201);
    CHECK(f.n_genes == m.n_genes);

    SECTION("min_genes=0 is the identity") {
        auto id = quality_filter(m, 0);
        CHECK(id.entries == m.entries);
    }
    SECTION("idempotent") {
        auto twice = quality_filter(f, 200);
        CHECK(twice.entries == f.entries);
    }
    SECTION("removing every cell is an error") {
        CHECK_THROWS_AS(quality_filter(m, 251), ValidationError);
    }
}

TEST_CASE("normalize scales to target sum then takes log1p", "[data]") {
    SparseExpressionMatrix m;
    m.n_cells = 1;
    m.n_genes = 4;
    m.entries = {{0, 1, 1.0}, {0, 2, 3.0}};
    m.finalize();

    auto n = normalize(m);
    REQUIRE(n.entries.size() == 2);
    CHECK_THAT(n.entries[0].value, Catch::Matchers::WithinRel(std::log(2501.0), 1e-12));
    CHECK_THAT(n.entries[1].value, Catch::Matchers::WithinRel(std::log(7501.0), 1e-12));
    CHECK(n.stage == Stage::normalized);
}

TEST_CASE("normalize: equal counts stay equal, pattern is preserved", "[data]") {
    SparseExpressionMatrix m;
    m.n_cells = 1;
    m.n_genes = 5;
    m.entries = {{0, 0, 5.0}, {0, 4, 5.0}};
    m.finalize();
    auto n = normalize(m);
    CHECK(n.entries[0].value == n.entries[1].value);
    CHECK(n.entries[0].gene == 0);
    CHECK(n.entries[1].gene == 4);
    CHECK(n.entries.size() == m.entries.size());
}

TEST_CASE("normalize: per-cell pre-log sums hit the target to 1e-9 relative", "[data]") {
    SyntheticSpec spec;
    spec.n_cells = 30;
    spec.n_genes = 80;
    spec.n_cell_types = 2;
    spec.sparsity = 0.7;
    spec.seed = 11;
    auto data = synthesize_dataset(spec);
    auto n = normalize(data.matrix);
    for (int c = 0; c < n.n_cells; ++c) {
        double sum = 0.0;
        for (const auto& e : n.cell(c)) {
            sum += std::expm1(e.value);
        }
        CHECK_THAT(sum, Catch::Matchers::WithinRel(10000.0, 1e-9));
    }
}

TEST_CASE("normalize rejects zero library size", "[data]") {
    SparseExpressionMatrix m;
    m.n_cells = 2;
    m.n_genes = 3;
    m.entries = {{0, 0, 1.0}};
    m.finalize();
    CHECK_THROWS_AS(normalize(m), ValidationError);
}

TEST_CASE("synthesize_dataset is deterministic and hits the sparsity", "[data]") {
    SyntheticSpec spec;
    spec.n_cells = 40;
    spec.n_genes = 1000;
    spec.n_cell_types = 4;
    spec.sparsity = 0.9;
    spec.seed = 42;

    auto a = synthesize_dataset(spec);
    auto b = synthesize_dataset(spec);
    CHECK(a.matrix.entries == b.matrix.entries);
    CHECK(a.labels == b.labels);

    double mean_nnz = static_cast<double>(a.matrix.entries.size()) / spec.n_cells;
    CHECK_THAT(mean_nnz, Catch::Matchers::WithinAbs(100.0, 5.0));
    for (const auto& e : a.matrix.entries) {
        CHECK(e.value >= 1.0);
    }
}

TEST_CASE("synthesize_dataset edge cases", "[data]") {
    SyntheticSpec spec;
    spec.n_cells = 5;
    spec.n_genes = 10;
    spec.n_cell_types = 1;
    spec.sparsity = 0.5;
    spec.seed = 3;
    auto d = synthesize_dataset(spec);
    for (const auto& l : d.labels) {
        CHECK(l == d.labels[0]);
    }

    spec.sparsity = 0.99; // 10 genes -> q = 0
    CHECK_THROWS_AS(synthesize_dataset(spec), ValidationError);
    spec.sparsity = 1.5;
    CHECK_THROWS_AS(synthesize_dataset(spec), ValidationError);
}

TEST_CASE("labels round-trip and record assembly", "[data]") {
    TempDir tmp;
    std::vector<std::pair<std::string, std::string>> labels = {{"C0", "B cell"}, {"C1", "T cell"}};
    save_labels(tmp.file("l.csv"), labels);
    CHECK(load_labels(tmp.file("l.csv")) == labels);

    SparseExpressionMatrix m;
    m.n_cells = 2;
    m.n_genes = 3;
    m.entries = {{0, 0, 2.0}, {0, 2, 3.0}, {1, 1, 4.0}};
    m.finalize();
    auto rec = make_records(m, &labels);
    REQUIRE(rec.size() == 2);
    CHECK(rec[0].cell_id == "C0");
    CHECK(rec[0].library_size == 5.0);
    CHECK(rec[1].label.value() == "T cell");

    labels.pop_back();
    CHECK_THROWS_AS(make_records(m, &labels), ValidationError);
}

TEST_CASE("rng streams are labeled and reproducible", "[data][rng]") {
    Rng a(123, "mask", 0);
    Rng b(123, "mask", 0);
    Rng c(123, "mask", 1);
    Rng d(123, "init", 0);
    auto va = a.bits();
    CHECK(va == b.bits());
    CHECK(va != c.bits());
    CHECK(va != d.bits());

    Rng u(9);
    for (int i = 0; i < 1000; ++i) {
        double x = u.uniform();
        CHECK(x >= 0.0);
        CHECK(x < 1.0);
    }
}
