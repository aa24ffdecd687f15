#include <catch2/catch_amalgamated.hpp>

#include <functional>

#include "sct/autodiff.hpp"
#include "sct/rng.hpp"

using namespace sct;
namespace ad = sct::ad;

namespace {

ad::Mat random_mat(long r, long c, Rng& rng, double scale = 1.0) {
    ad::Mat m(r, c);
    for (long i = 0; i < r; ++i) {
        for (long j = 0; j < c; ++j) {
            m(i, j) = scale * rng.normal();
        }
    }
    return m;
}

// Max discrepancy between analytic gradients and central finite differences
// over every coordinate of every parameter. `build` must construct the same
// scalar loss from the shared parameters each time it is called.
double max_grad_gap(const std::function<ad::Var(ad::Tape&)>& build, std::vector<ad::Parameter*> params) {
    for (auto* p : params) {
        p->zero_grad();
    }
    {
        ad::Tape t;
        ad::Var loss = build(t);
        t.backward(loss);
    }
    std::vector<ad::Mat> analytic;
    analytic.reserve(params.size());
    for (auto* p : params) {
        analytic.push_back(p->grad);
    }

    auto eval = [&]() {
        ad::Tape t;
        return build(t).value()(0, 0);
    };

    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        ad::Mat& x = params[pi]->value;
        for (long i = 0; i < x.rows(); ++i) {
            for (long j = 0; j < x.cols(); ++j) {
                const double orig = x(i, j);
                const double h = 1e-5 * std::max(1.0, std::abs(orig));
                x(i, j) = orig + h;
                const double fp = eval();
                x(i, j) = orig - h;
                const double fm = eval();
                x(i, j) = orig;
                const double fd = (fp - fm) / (2.0 * h);
                const double an = analytic[pi](i, j);
                const double gap = std::abs(fd - an) / std::max(1e-2, std::abs(fd) + std::abs(an));
                worst = std::max(worst, gap);
            }
        }
    }
    return worst;
}

// loss = sum(R .* y) makes every output coordinate matter.
ad::Var weighted_sum(ad::Tape& t, const ad::Var& y, const ad::Mat& weights) {
    return ad::sum_all(ad::cwise_mul(y, t.constant(weights)));
}

} // namespace

TEST_CASE("d/dx of x^2 at x=3 is 6", "[autodiff]") {
    ad::Parameter x("x", ad::Mat::Constant(1, 1, 3.0));
    ad::Tape t;
    ad::Var vx = t.param(x);
    ad::Var loss = ad::cwise_mul(vx, vx);
    t.backward(loss);
    CHECK(x.grad(0, 0) == Catch::Approx(6.0));
}

TEST_CASE("arithmetic ops match finite differences", "[autodiff]") {
    Rng rng(101);
    ad::Parameter a("a", random_mat(3, 4, rng));
    ad::Parameter b("b", random_mat(3, 4, rng));
    ad::Parameter row("row", random_mat(1, 4, rng));
    ad::Parameter col("col", random_mat(3, 1, rng).array().abs().matrix() + ad::Mat::Constant(3, 1, 0.5));
    ad::Parameter alpha("alpha", ad::Mat::Constant(1, 1, 0.7));
    const ad::Mat r1 = random_mat(3, 4, rng);

    SECTION("add") {
        CHECK(max_grad_gap([&](ad::Tape& t) { return weighted_sum(t, ad::add(t.param(a), t.param(b)), r1); },
                           {&a, &b}) < 1e-4);
    }
    SECTION("sub") {
        CHECK(max_grad_gap([&](ad::Tape& t) { return weighted_sum(t, ad::sub(t.param(a), t.param(b)), r1); },
                           {&a, &b}) < 1e-4);
    }
    SECTION("cwise_mul") {
        CHECK(max_grad_gap(
                  [&](ad::Tape& t) { return weighted_sum(t, ad::cwise_mul(t.param(a), t.param(b)), r1); },
                  {&a, &b}) < 1e-4);
    }
    SECTION("mul_scalar") {
        CHECK(max_grad_gap(
                  [&](ad::Tape& t) { return weighted_sum(t, ad::mul_scalar(t.param(a), -1.7), r1); },
                  {&a}) < 1e-4);
    }
    SECTION("mul_scalar_param") {
        CHECK(max_grad_gap(
                  [&](ad::Tape& t) {
                      return weighted_sum(t, ad::mul_scalar_param(t.param(a), t.param(alpha)), r1);
                  },
                  {&a, &alpha}) < 1e-4);
    }
    SECTION("add_rowvec") {
        CHECK(max_grad_gap(
                  [&](ad::Tape& t) { return weighted_sum(t, ad::add_rowvec(t.param(a), t.param(row)), r1); },
                  {&a, &row}) < 1e-4);
    }
    SECTION("mul_colvec") {
        CHECK(max_grad_gap(
                  [&](ad::Tape& t) { return weighted_sum(t, ad::mul_colvec(t.param(a), t.param(col)), r1); },
                  {&a, &col}) < 1e-4);
    }
    SECTION("div_colvec") {
        CHECK(max_grad_gap(
                  [&](ad::Tape& t) { return weighted_sum(t, ad::div_colvec(t.param(a), t.param(col)), r1); },
                  {&a, &col}) < 1e-4);
    }
    SECTION("sub_colvec") {
        CHECK(max_grad_gap(
                  [&](ad::Tape& t) { return weighted_sum(t, ad::sub_colvec(t.param(a), t.param(col)), r1); },
                  {&a, &col}) < 1e-4);
    }
}

TEST_CASE("matmul transpose variants match finite differences", "[autodiff]") {
    Rng rng(202);
    ad::Parameter a("a", random_mat(3, 4, rng));
    ad::Parameter b("b", random_mat(4, 2, rng));
    ad::Parameter bt("bt", random_mat(2, 4, rng));
    ad::Parameter at("at", random_mat(4, 3, rng));
    const ad::Mat r = random_mat(3, 2, rng);

    CHECK(max_grad_gap(
              [&](ad::Tape& t) { return weighted_sum(t, ad::matmul(t.param(a), t.param(b)), r); },
              {&a, &b}) < 1e-4);
    CHECK(max_grad_gap(
              [&](ad::Tape& t) {
                  return weighted_sum(t, ad::matmul(t.param(at), t.param(b), true, false), r);
              },
              {&at, &b}) < 1e-4);
    CHECK(max_grad_gap(
              [&](ad::Tape& t) {
                  return weighted_sum(t, ad::matmul(t.param(a), t.param(bt), false, true), r);
              },
              {&a, &bt}) < 1e-4);
    CHECK(max_grad_gap(
              [&](ad::Tape& t) {
                  return weighted_sum(t, ad::matmul(t.param(at), t.param(bt), true, true), r);
              },
              {&at, &bt}) < 1e-4);
    CHECK_THROWS_AS(
        [&] {
            ad::Tape t;
            return ad::matmul(t.param(a), t.param(bt));
        }(),
        ValidationError);
}

TEST_CASE("nonlinearities match finite differences", "[autodiff]") {
    Rng rng(303);
    // keep values away from the leaky-relu kink
    ad::Mat base = random_mat(4, 5, rng);
    for (long i = 0; i < base.size(); ++i) {
        double& x = base.data()[i];
        if (std::abs(x) < 0.1) {
            x = x < 0 ? x - 0.2 : x + 0.2;
        }
    }
    ad::Parameter a("a", base);
    ad::Parameter gamma("gamma", random_mat(1, 5, rng, 0.5).array().matrix() + ad::Mat::Constant(1, 5, 1.0));
    ad::Parameter beta("beta", random_mat(1, 5, rng, 0.3));
    const ad::Mat r = random_mat(4, 5, rng);
    const ad::Mat rc = random_mat(4, 1, rng);

    SECTION("exp") {
        CHECK(max_grad_gap([&](ad::Tape& t) { return weighted_sum(t, ad::exp(t.param(a)), r); }, {&a}) <
              1e-4);
    }
    SECTION("leaky_relu") {
        CHECK(max_grad_gap(
                  [&](ad::Tape& t) { return weighted_sum(t, ad::leaky_relu(t.param(a), 0.1), r); },
                  {&a}) < 1e-4);
    }
    SECTION("gelu") {
        CHECK(max_grad_gap([&](ad::Tape& t) { return weighted_sum(t, ad::gelu(t.param(a)), r); }, {&a}) <
              1e-4);
    }
    SECTION("softmax_rows") {
        CHECK(max_grad_gap(
                  [&](ad::Tape& t) { return weighted_sum(t, ad::softmax_rows(t.param(a)), r); },
                  {&a}) < 1e-4);
        ad::Tape t;
        ad::Var p = ad::softmax_rows(t.param(a));
        for (long i = 0; i < p.rows(); ++i) {
            CHECK(p.value().row(i).sum() == Catch::Approx(1.0));
            CHECK(p.value().row(i).minCoeff() >= 0.0);
        }
    }
    SECTION("layer_norm_rows") {
        CHECK(max_grad_gap(
                  [&](ad::Tape& t) {
                      return weighted_sum(t, ad::layer_norm_rows(t.param(a), t.param(gamma), t.param(beta)),
                                          r);
                  },
                  {&a, &gamma, &beta}) < 1e-4);
    }
    SECTION("rowwise_halfsqnorm") {
        CHECK(max_grad_gap(
                  [&](ad::Tape& t) { return weighted_sum(t, ad::rowwise_halfsqnorm(t.param(a)), rc); },
                  {&a}) < 1e-4);
    }
}

TEST_CASE("structural ops match finite differences", "[autodiff]") {
    Rng rng(404);
    ad::Parameter a("a", random_mat(5, 3, rng));
    ad::Parameter b("b", random_mat(2, 3, rng));

    SECTION("gather with duplicates") {
        const ad::Mat r = random_mat(4, 3, rng);
        CHECK(max_grad_gap(
                  [&](ad::Tape& t) {
                      return weighted_sum(t, ad::gather_rows(t.param(a), {0, 2, 2, 4}), r);
                  },
                  {&a}) < 1e-4);
    }
    SECTION("scatter") {
        const ad::Mat r = random_mat(6, 3, rng);
        CHECK(max_grad_gap(
                  [&](ad::Tape& t) { return weighted_sum(t, ad::scatter_rows(t.param(a), {5, 0, 3, 1, 2}, 6), r); },
                  {&a}) < 1e-4);
        ad::Tape t;
        CHECK_THROWS_AS(ad::scatter_rows(t.param(a), {0, 0, 1, 2, 3}, 6), ValidationError);
    }
    SECTION("slice") {
        const ad::Mat r = random_mat(2, 2, rng);
        CHECK(max_grad_gap(
                  [&](ad::Tape& t) { return weighted_sum(t, ad::slice_block(t.param(a), 1, 1, 2, 2), r); },
                  {&a}) < 1e-4);
    }
    SECTION("hstack vstack") {
        const ad::Mat rh = random_mat(5, 6, rng);
        CHECK(max_grad_gap(
                  [&](ad::Tape& t) {
                      std::vector<ad::Var> parts = {t.param(a), t.param(a)};
                      return weighted_sum(t, ad::hstack(parts), rh);
                  },
                  {&a}) < 1e-4);
        const ad::Mat rv = random_mat(7, 3, rng);
        CHECK(max_grad_gap(
                  [&](ad::Tape& t) {
                      std::vector<ad::Var> parts = {t.param(a), t.param(b)};
                      return weighted_sum(t, ad::vstack(parts), rv);
                  },
                  {&a, &b}) < 1e-4);
    }
}

TEST_CASE("attention_mix matches finite differences and zeroes pads", "[autodiff]") {
    Rng rng(505);
    const int batch = 2, T = 3, heads = 2, d = 4;
    ad::Parameter q("q", random_mat(batch * T, d, rng, 0.7));
    ad::Parameter k("k", random_mat(batch * T, d, rng, 0.7));
    ad::Parameter v("v", random_mat(batch * T, d, rng, 0.7));
    std::vector<char> pad(batch * T, 0);
    pad[5] = 1; // last slot of second cell
    const ad::Mat r = random_mat(batch * T, d, rng);

    CHECK(max_grad_gap(
              [&](ad::Tape& t) {
                  return weighted_sum(
                      t, ad::attention_mix(t.param(q), t.param(k), t.param(v), batch, heads, pad), r);
              },
              {&q, &k, &v}) < 1e-4);

    ad::Tape t;
    ad::Var y = ad::attention_mix(t.param(q), t.param(k), t.param(v), batch, heads, pad);
    CHECK(y.value().row(5).cwiseAbs().maxCoeff() == 0.0);
    CHECK(y.value().row(4).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("maxpool_groups picks maxima and routes gradients", "[autodiff]") {
    ad::Parameter x("x", ad::Mat(3, 2));
    x.value << 1, 5, 2, 3, 0, 9;
    ad::Tape t;
    ad::Var y = ad::maxpool_groups(t.param(x), {{0, 1, 2}});
    CHECK(y.value()(0, 0) == 2.0);
    CHECK(y.value()(0, 1) == 9.0);
    t.backward(ad::sum_all(y));
    ad::Mat expect(3, 2);
    expect << 0, 0, 1, 0, 0, 1;
    CHECK(x.grad == expect);

    Rng rng(606);
    ad::Parameter z("z", random_mat(6, 3, rng));
    const ad::Mat r = random_mat(2, 3, rng);
    CHECK(max_grad_gap(
              [&](ad::Tape& t) {
                  return weighted_sum(t, ad::maxpool_groups(t.param(z), {{0, 1, 2}, {3, 4, 5}}), r);
              },
              {&z}) < 1e-4);
    ad::Tape t2;
    CHECK_THROWS_AS(ad::maxpool_groups(t2.param(z), {{}}), ValidationError);
}

TEST_CASE("softmax_xent matches finite differences", "[autodiff]") {
    Rng rng(707);
    ad::Parameter logits("logits", random_mat(5, 4, rng));
    std::vector<int> labels = {0, 3, 1, 1, 2};
    CHECK(max_grad_gap([&](ad::Tape& t) { return ad::softmax_xent(t.param(logits), labels); },
                       {&logits}) < 1e-4);

    ad::Tape t;
    CHECK_THROWS_AS(ad::softmax_xent(t.param(logits), {0, 1}), ValidationError);
}

TEST_CASE("a small MLP backpropagates through the whole chain", "[autodiff]") {
    Rng rng(808);
    ad::Parameter w1("w1", random_mat(3, 8, rng, 0.5));
    ad::Parameter b1("b1", random_mat(1, 8, rng, 0.1));
    ad::Parameter w2("w2", random_mat(8, 2, rng, 0.5));
    ad::Parameter gamma("gamma", ad::Mat::Ones(1, 8));
    ad::Parameter beta("beta", ad::Mat::Zero(1, 8));
    const ad::Mat x = random_mat(6, 3, rng);
    const ad::Mat r = random_mat(6, 2, rng);

    auto build = [&](ad::Tape& t) {
        ad::Var h = ad::add_rowvec(ad::matmul(t.constant(x), t.param(w1)), t.param(b1));
        h = ad::layer_norm_rows(h, t.param(gamma), t.param(beta));
        h = ad::gelu(h);
        return weighted_sum(t, ad::matmul(h, t.param(w2)), r);
    };
    CHECK(max_grad_gap(build, {&w1, &b1, &w2, &gamma, &beta}) < 1e-4);
}

TEST_CASE("constants do not accumulate gradients", "[autodiff]") {
    ad::Parameter p("p", ad::Mat::Ones(2, 2));
    ad::Tape t;
    ad::Var c = t.constant(ad::Mat::Ones(2, 2));
    ad::Var y = ad::cwise_mul(t.param(p), c);
    CHECK_FALSE(t.needs_grad(c));
    t.backward(ad::sum_all(y));
    CHECK(t.grad(c).size() == 0);
    CHECK(p.grad == ad::Mat::Ones(2, 2));
}

TEST_CASE("tape guards against misuse", "[autodiff]") {
    ad::Parameter p("p", ad::Mat::Ones(2, 2));
    ad::Tape t;
    ad::Var y = t.param(p);
    CHECK_THROWS_AS(t.backward(y), ValidationError); // not 1x1

    ad::Tape t2;
    CHECK_THROWS_AS(ad::add(t.param(p), t2.param(p)), ValidationError);

    ad::Mat bad = ad::Mat::Ones(1, 1);
    bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(t.constant(bad), NumericError);
}

TEST_CASE("gradients accumulate across two backward passes", "[autodiff]") {
    ad::Parameter p("p", ad::Mat::Constant(1, 1, 2.0));
    for (int i = 0; i < 2; ++i) {
        ad::Tape t;
        ad::Var x = t.param(p);
        t.backward(ad::cwise_mul(x, x));
    }
    CHECK(p.grad(0, 0) == Catch::Approx(8.0)); // 2 * d(x^2)/dx at 2
}
