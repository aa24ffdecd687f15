#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "sct/discretize.hpp"
#include "sct/embedding.hpp"

using namespace sct;
namespace ad = sct::ad;

namespace {

PackedBatch tiny_batch() {
    PackedBatch b;
    b.batch = 2;
    b.m = 2;
    b.n_genes = 6;
    b.values = ad::Mat(2, 2);
    b.values << 1.5, 3.0, 1.5, 0.0;
    b.gene_indices = Eigen::MatrixXi(2, 2);
    b.gene_indices << 0, 4, 2, -1;
    b.pad_mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>(2, 2);
    b.pad_mask << false, false, false, true;
    b.scatter_map = {{0, 4}, {2}};
    b.residuals.resize(2);
    return b;
}

} // namespace

TEST_CASE("discretize weights form a probability vector", "[embedding]") {
    AutoDiscretizer disc(8, 20, 42);
    for (double v : {0.0, 0.1, 0.5, 1.0, 2.7, 5.5, 9.9}) {
        auto out = discretize(v, disc);
        CHECK_THAT(out.weights.sum(), Catch::Matchers::WithinAbs(1.0, 1e-6));
        CHECK(out.weights.minCoeff() >= 0.0);
        CHECK(out.embedding.size() == 8);
    }
}

TEST_CASE("discretize at zero gives uniform bin weights", "[embedding]") {
    AutoDiscretizer disc(4, 10, 7);
    auto out = discretize(0.0, disc);
    for (long i = 0; i < out.weights.size(); ++i) {
        CHECK_THAT(out.weights(i), Catch::Matchers::WithinAbs(0.1, 1e-12));
    }
}

TEST_CASE("discretize is continuous in the value", "[embedding]") {
    AutoDiscretizer disc(8, 100, 13);
    for (double v : {0.05, 0.4, 1.3, 2.9, 6.2}) {
        const auto a = discretize(v, disc);
        const auto b = discretize(v + 1e-4, disc);
        CHECK((a.weights - b.weights).cwiseAbs().sum() < 1e-2);
    }

    // empirical Lipschitz bound over a dense grid
    double worst = 0.0;
    Eigen::VectorXd prev = discretize(0.0, disc).weights;
    for (int i = 1; i <= 1000; ++i) {
        Eigen::VectorXd cur = discretize(i * 0.01, disc).weights;
        worst = std::max(worst, (cur - prev).cwiseAbs().sum());
        prev = cur;
    }
    CHECK(worst < 0.2);
}

TEST_CASE("discretize rejects non-finite values", "[embedding]") {
    AutoDiscretizer disc(4, 10, 7);
    CHECK_THROWS_AS(discretize(std::numeric_limits<double>::quiet_NaN(), disc), NumericError);
}

TEST_CASE("discretizer gradients match finite differences", "[embedding]") {
    AutoDiscretizer disc(3, 5, 99);
    Eigen::VectorXd values(3);
    values << 0.5, 1.7, 3.2;
    ad::Mat r(3, 3);
    r << 0.3, -1.2, 0.8, 1.1, 0.4, -0.6, -0.9, 0.2, 1.5;

    auto params = disc.parameters();
    for (auto* p : params) {
        p->zero_grad();
    }
    {
        ad::Tape t;
        auto out = disc.forward(t, values);
        t.backward(ad::sum_all(ad::cwise_mul(out.embedding, t.constant(r))));
    }
    std::vector<ad::Mat> analytic;
    for (auto* p : params) {
        analytic.push_back(p->grad);
    }
    auto eval = [&]() {
        ad::Tape t;
        auto out = disc.forward(t, values);
        return out.embedding.value().cwiseProduct(r).sum();
    };
    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        ad::Mat& x = params[pi]->value;
        for (long i = 0; i < x.size(); ++i) {
            const double orig = x.data()[i];
            const double h = 1e-5 * std::max(1.0, std::abs(orig));
            x.data()[i] = orig + h;
            const double fp = eval();
            x.data()[i] = orig - h;
            const double fm = eval();
            x.data()[i] = orig;
            const double fd = (fp - fm) / (2 * h);
            const double an = analytic[pi].data()[i];
            worst = std::max(worst, std::abs(fd - an) / std::max(1e-2, std::abs(fd) + std::abs(an)));
        }
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("baseline binning schemes", "[embedding]") {
    CHECK(baseline_bin(1.99, BinScheme::round_zero) == 2);
    CHECK(baseline_bin(2.01, BinScheme::round_zero) == 2);
    CHECK(baseline_bin(1.01, BinScheme::round_zero) == 1);
    CHECK(baseline_bin(0.0, BinScheme::round_zero) == 0);

    CHECK(baseline_bin(1.99, BinScheme::floor_zero) == 1);
    CHECK(baseline_bin(1.01, BinScheme::floor_zero) == 1);

    CHECK(baseline_bin(0.0, BinScheme::up_no_zero) == 0);
    CHECK(baseline_bin(0.3, BinScheme::up_no_zero) == 1);
    CHECK(baseline_bin(2.0, BinScheme::up_no_zero) == 2);

    std::vector<double> uniform;
    for (int i = 1; i <= 100; ++i) {
        uniform.push_back(i);
    }
    auto stats = ValueStats::fit(uniform, 10);
    CHECK(baseline_bin(5.0, BinScheme::equal_freq, &stats) == 0);
    CHECK(baseline_bin(95.0, BinScheme::equal_freq, &stats) == 9);
    CHECK_THROWS_AS(baseline_bin(5.0, BinScheme::equal_freq, nullptr), ValidationError);
    CHECK_THROWS_AS(baseline_bin(-1.0, BinScheme::round_zero), ValidationError);
}

TEST_CASE("embed_tokens adds value and gene embeddings", "[embedding]") {
    AutoDiscretizer disc(5, 12, 3);
    GeneEmbeddingTable genes(6, 5, 4);
    auto batch = tiny_batch();

    ad::Tape t;
    ad::Var I = embed_tokens(t, batch, disc, genes);
    REQUIRE(I.rows() == 4);
    REQUIRE(I.cols() == 5);

    // PAD slot zeroed
    CHECK(I.value().row(3).cwiseAbs().maxCoeff() == 0.0);

    // same value, different genes: identical E, different I
    const auto e15 = discretize(1.5, disc).embedding;
    Eigen::RowVectorXd i0 = I.value().row(0);
    Eigen::RowVectorXd i2 = I.value().row(2);
    CHECK((i0 - i2).cwiseAbs().maxCoeff() > 1e-9);
    CHECK((i0.transpose() - e15 - genes.table.value.row(0).transpose()).cwiseAbs().maxCoeff() < 1e-12);

    // zeroed gene row -> I equals the value embedding alone
    genes.table.value.row(2).setZero();
    ad::Tape t2;
    ad::Var I2 = embed_tokens(t2, batch, disc, genes);
    CHECK((I2.value().row(2).transpose() - e15).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("embed_tokens is permutation equivariant", "[embedding]") {
    AutoDiscretizer disc(4, 10, 5);
    GeneEmbeddingTable genes(6, 4, 6);
    auto batch = tiny_batch();

    ad::Tape t;
    ad::Mat base = embed_tokens(t, batch, disc, genes).value();

    auto swapped = batch; // swap the two slots of cell 0
    std::swap(swapped.values(0, 0), swapped.values(0, 1));
    std::swap(swapped.gene_indices(0, 0), swapped.gene_indices(0, 1));
    ad::Tape t2;
    ad::Mat perm = embed_tokens(t2, swapped, disc, genes).value();

    CHECK((perm.row(0) - base.row(1)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((perm.row(1) - base.row(0)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("embed_tokens rejects unknown gene ids", "[embedding]") {
    AutoDiscretizer disc(4, 10, 5);
    GeneEmbeddingTable genes(3, 4, 6); // table too small for gene id 4
    auto batch = tiny_batch();
    ad::Tape t;
    CHECK_THROWS_AS(embed_tokens(t, batch, disc, genes), ValidationError);
}

TEST_CASE("round_bin mode uses hard bin columns", "[embedding]") {
    AutoDiscretizer disc(4, 10, 8);
    ad::Tape t;
    Eigen::VectorXd values(2);
    values << 2.4, 0.0;
    ad::Var e = value_embedding(t, disc, values, ValueEmbeddingMode::round_bin);
    CHECK((e.value().row(0).transpose() - disc.table.value.col(2)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((e.value().row(1).transpose() - disc.table.value.col(0)).cwiseAbs().maxCoeff() < 1e-12);

    // gradients still reach the table
    disc.table.zero_grad();
    ad::Tape t2;
    ad::Var e2 = value_embedding(t2, disc, values, ValueEmbeddingMode::round_bin);
    t2.backward(ad::sum_all(e2));
    CHECK(disc.table.grad.col(2).cwiseAbs().sum() > 0.0);
    CHECK(disc.table.grad.col(1).cwiseAbs().sum() == 0.0);
}
