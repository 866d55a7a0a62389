// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "clora/numerics.hpp"
#include "support.hpp"

using namespace clora;
using clora::testing::random_matrix;

namespace {

// Σ w ⊙ f(params): a generic scalar probe for a backward rule.
double weighted(const Matrix& w, const Matrix& out) { return sum(hadamard(w, out)); }

}  // namespace

TEST_CASE("matmul examples") {
    const Matrix x{{1, 2, 3}, {4, 5, 6}};
    CHECK(matmul(Matrix::identity(2), x) == x);
    CHECK(matmul(Matrix{{1, 2}, {3, 4}}, Matrix{{1}, {1}}) == Matrix{{3}, {7}});
    CHECK(matmul_tn(x, x) == matmul(transpose(x), x));
    CHECK(matmul_nt(x, x) == matmul(x, transpose(x)));
}

TEST_CASE("matmul shape error names both shapes") {
    try {
        matmul(Matrix(2, 3), Matrix(2, 3));
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string what = e.what();
        CHECK(what.find("2x3") != std::string::npos);
        CHECK(e.kind() == "shape");
    }
}

TEST_CASE("gradient of sum(a·b) w.r.t. a") {
    SeededRng rng(1);
    Matrix a = random_matrix(rng, 3, 4), b = random_matrix(rng, 4, 2);
    const Matrix ones(3, 2, 1.0);
    const MatmulGrads g = matmul_backward(a, b, ones);
    const GradParam p{"a", &a, &g.da};
    const auto rep = check_gradients([&] { return sum(matmul(a, b)); }, std::span(&p, 1), 1e-5, 1e-6);
    CHECK(rep.passed);
}

TEST_CASE("elementwise examples") {
    CHECK(relu(Matrix{{-1, 0, 2}}) == Matrix{{0, 0, 2}});
    CHECK(sigmoid(0.0) == 0.5);
    CHECK(sigmoid(-800.0) >= 0.0);
    CHECK(sigmoid(800.0) == 1.0);
    CHECK_THROWS_AS(add(Matrix(2, 2), Matrix(2, 3)), ShapeError);
    CHECK_THROWS_AS(hadamard(Matrix(1, 2), Matrix(2, 1)), ShapeError);
}

TEST_CASE("hadamard gradient") {
    SeededRng rng(2);
    Matrix a = random_matrix(rng, 3, 3), b = random_matrix(rng, 3, 3);
    const Matrix w = random_matrix(rng, 3, 3);
    const MatmulGrads g = hadamard_backward(a, b, w);
    const GradParam ps[] = {{"a", &a, &g.da}, {"b", &b, &g.db}};
    CHECK(check_gradients([&] { return weighted(w, hadamard(a, b)); }, ps, 1e-5, 1e-6).passed);
}

TEST_CASE("log_softmax_nll examples") {
    const Matrix uniform(2, 4, 0.7);
    const std::vector<std::size_t> y{1, 3};
    CHECK(log_softmax_nll(uniform, y).loss == doctest::Approx(std::log(4.0)).epsilon(1e-14));
    const std::vector<std::size_t> y0{0};
    CHECK(log_softmax_nll(Matrix{{10, -10}}, y0).loss < 1e-4);
    const std::vector<std::size_t> bad{2};
    CHECK_THROWS_AS(log_softmax_nll(Matrix{{1, 2}}, bad), IndexError);

    SeededRng rng(3);
    Matrix logits = random_matrix(rng, 3, 5);
    const std::vector<std::size_t> labels{0, 4, 2};
    const NllResult r = log_softmax_nll(logits, labels);
    const GradParam p{"logits", &logits, &r.grad};
    CHECK(check_gradients([&] { return log_softmax_nll(logits, labels).loss; }, std::span(&p, 1), 1e-5, 1e-5).passed);
}

TEST_CASE("sample_standard_normal moments and determinism") {
    SeededRng rng(4);
    const Matrix m = sample_standard_normal(rng, 1000, 1000);
    double mean = 0.0, sq = 0.0;
    for (double v : m.values()) {
        mean += v;
        sq += v * v;
    }
    mean /= 1e6;
    const double var = sq / 1e6 - mean * mean;
    CHECK(std::abs(mean) <= 0.01);
    CHECK(var >= 0.99);
    CHECK(var <= 1.01);

    SeededRng a(9), b(9);
    CHECK(sample_standard_normal(a, 4, 5) == sample_standard_normal(b, 4, 5));
}

TEST_CASE("rng splits are deterministic and distinct") {
    const SeededRng root(11);
    SeededRng a = root.split("noise"), b = root.split("noise"), c = root.split("batches");
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    CHECK(x != c.next_u64());
    CHECK(root.split(std::uint64_t{0}).seed() != root.split(std::uint64_t{1}).seed());
    SeededRng r(5);
    for (int i = 0; i < 1000; ++i) {
        const double s = r.sign();
        CHECK((s == 1.0 || s == -1.0));
        const double u = r.uniform();
        CHECK((u >= 0.0 && u < 1.0));
        CHECK(r.index(7) < 7);
    }
    CHECK_THROWS_AS(r.index(0), UsageError);
}

TEST_CASE("check_gradients contract") {
    SeededRng rng(6);
    Matrix p = random_matrix(rng, 4, 3);
    Matrix g = p;  // ∇ ½‖p‖² = p
    GradParam gp{"p", &p, &g};
    const auto ok = check_gradients([&] { return 0.5 * frobenius_sq(p); }, std::span(&gp, 1));
    CHECK(ok.passed);
    CHECK(ok.max_rel_error <= 1e-8);
    CHECK(ok.entries_checked == 12);

    Matrix bad = scale(p, 1.1);
    gp.grad = &bad;
    const auto fail = check_gradients([&] { return 0.5 * frobenius_sq(p); }, std::span(&gp, 1));
    CHECK_FALSE(fail.passed);
    CHECK(fail.worst_param == "p");

    CHECK_THROWS_AS(check_gradients([&] { return 0.5 * frobenius_sq(p); }, std::span(&gp, 1), 0.0), DomainError);
    CHECK_THROWS_AS(check_gradients([&] { return 0.5 * frobenius_sq(p); }, std::span(&gp, 1), 1e-2), DomainError);
    CHECK_THROWS_AS(check_gradients([] { return std::nan(""); }, std::span(&gp, 1)), NumericError);
}

TEST_CASE("property: every primitive backward rule on random shapes") {
    SeededRng rng(7);
    for (int trial = 0; trial < 25; ++trial) {
        CAPTURE(trial);
        const std::size_t n = 1 + rng.index(16), k = 1 + rng.index(16), m = 1 + rng.index(16);
        Matrix a = random_matrix(rng, n, k), b = random_matrix(rng, k, m);
        Matrix c = random_matrix(rng, n, k);
        // Keep relu inputs away from the kink.
        for (double& v : c.values())
            if (std::abs(v) < 1e-3) v = 0.5;

        const Matrix wm = random_matrix(rng, n, m), wk = random_matrix(rng, n, k);
        const MatmulGrads gm = matmul_backward(a, b, wm);
        const GradParam pm[] = {{"a", &a, &gm.da}, {"b", &b, &gm.db}};
        CHECK(check_gradients([&] { return weighted(wm, matmul(a, b)); }, pm, 1e-5, 1e-5).passed);

        Matrix a2 = random_matrix(rng, n, k);
        const MatmulGrads gh = hadamard_backward(a2, c, wk);
        const GradParam ph[] = {{"a", &a2, &gh.da}, {"c", &c, &gh.db}};
        CHECK(check_gradients([&] { return weighted(wk, hadamard(a2, c)); }, ph, 1e-5, 1e-5).passed);

        const Matrix gr = relu_backward(c, wk);
        const GradParam pr{"c", &c, &gr};
        CHECK(check_gradients([&] { return weighted(wk, relu(c)); }, std::span(&pr, 1), 1e-5, 1e-5).passed);

        const Matrix gs = sigmoid_backward(sigmoid(c), wk);
        const GradParam ps{"c", &c, &gs};
        CHECK(check_gradients([&] { return weighted(wk, sigmoid(c)); }, std::span(&ps, 1), 1e-5, 1e-5).passed);

        const GradParam pa[] = {{"a", &a2, &wk}, {"c", &c, &wk}};
        CHECK(check_gradients([&] { return weighted(wk, add(a2, c)); }, pa, 1e-5, 1e-5).passed);

        std::vector<std::size_t> labels(n);
        for (auto& y : labels) y = rng.index(k);
        const NllResult nr = log_softmax_nll(a2, labels);
        const GradParam pn{"logits", &a2, &nr.grad};
        CHECK(check_gradients([&] { return log_softmax_nll(a2, labels).loss; }, std::span(&pn, 1), 1e-5, 1e-5).passed);
    }
}

TEST_CASE("property: primitives are pure and matmul is associative") {
    SeededRng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 1 + rng.index(6), k = 1 + rng.index(6), m = 1 + rng.index(6), p = 1 + rng.index(6);
        const Matrix a = random_matrix(rng, n, k), b = random_matrix(rng, k, m), c = random_matrix(rng, m, p);
        CHECK(matmul(a, b) == matmul(a, b));
        CHECK(softmax_rows(a) == softmax_rows(a));
        const Matrix l = matmul(matmul(a, b), c), r = matmul(a, matmul(b, c));
        for (std::size_t i = 0; i < l.size(); ++i) CHECK(std::abs(l[i] - r[i]) <= 1e-10);
    }
}

TEST_CASE("require_finite flags NaN") {
    Matrix m(2, 2);
    CHECK_NOTHROW(require_finite(m, "m"));
    m[3] = std::nan("");
    CHECK_FALSE(all_finite(m));
    CHECK_THROWS_AS(require_finite(m, "m"), NumericError);
}
