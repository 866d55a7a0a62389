// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "clora/model.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace clora;
using namespace clora::testing;

namespace {

std::vector<LayerNoise> zero_noise(const AdaptedModel& m) {
    SeededRng rng(0);
    auto n = draw_noise(m, rng, false);
    for (auto& l : n) l.flip.shared_eps.fill(0.0);
    return n;
}

Matrix logits_of(const AdaptedModel& m, const Matrix& x, NoiseMode mode = NoiseMode::Mean,
                 const std::vector<LayerNoise>* noise = nullptr) {
    ForwardOptions o;
    o.mode = mode;
    o.noise = noise;
    return forward(m, x, o).logits;
}

}  // namespace

TEST_CASE("B = 0 leaves the backbone logits unchanged in every mode") {
    for (Variant v : {Variant::Map, Variant::Blob, Variant::De, Variant::Fe, Variant::Clora}) {
        CAPTURE(to_string(v));
        SeededRng rng(41);
        SeededRng bb_rng = rng.split("bb");
        AdapterConfig c;
        c.r = 2;
        c.hidden_c = 4;
        c.variant = v;
        AdaptedModel m = make_adapted_model(random_backbone(bb_rng, 3, 6, 2), c, 3, rng);
        const Matrix x = random_matrix(rng, 3, 1);
        // Frozen-backbone logits computed by hand.
        Matrix h = relu(add(matmul(m.backbone.embed_w, x), m.backbone.embed_b));
        for (const auto& w : m.backbone.layers) h = relu(matmul(w, h));
        const Matrix expect = add(matmul(m.params.head_w, h), m.params.head_b);
        const auto noise = draw_noise(m, rng, true);
        for (NoiseMode mode : {NoiseMode::Mean, NoiseMode::Sample, NoiseMode::Flipout}) {
            const Matrix l = logits_of(m, x, mode, &noise);
            for (std::size_t i = 0; i < 3; ++i) CHECK(l[i] == doctest::Approx(expect[i]).epsilon(1e-13));
        }
    }
}

TEST_CASE("forward determinism and zero-noise sampling") {
    const AdaptedModel m = random_model(Variant::Clora, 42, 4, 2, 2);
    SeededRng rng(1);
    const Matrix x = random_matrix(rng, 3, 1);
    CHECK(logits_of(m, x) == logits_of(m, x));
    const auto zn = zero_noise(m);
    const Matrix a = logits_of(m, x), b = logits_of(m, x, NoiseMode::Sample, &zn);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-14));
    CHECK_THROWS_AS(logits_of(m, x, NoiseMode::Sample, nullptr), UsageError);
    CHECK_THROWS_AS(logits_of(m, Matrix(4, 1)), ShapeError);
}

TEST_CASE("non-finite activation names the layer") {
    AdaptedModel m = random_model(Variant::Fe, 43, 4, 2, 3);
    m.backbone.layers[1].fill(1e308);
    try {
        logits_of(m, Matrix(3, 1, 1.0));
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
    }
}

TEST_CASE("predictive") {
    const AdaptedModel m = random_model(Variant::Clora, 44, 4, 2, 2);
    SeededRng rng(2);
    const Matrix x = random_matrix(rng, 3, 1);
    const auto p0 = predictive(m, x, 0, rng);
    const auto direct = softmax(logits_of(m, x).values());
    CHECK(p0 == direct);
    const auto zn = zero_noise(m);
    const auto p1 = softmax(logits_of(m, x, NoiseMode::Sample, &zn).values());
    for (std::size_t k = 0; k < 3; ++k) CHECK(p1[k] == doctest::Approx(p0[k]).epsilon(1e-13));
    CHECK_THROWS_AS(predictive(m, x, -1, rng), UsageError);

    SeededRng a(7), b(7);
    CHECK(predictive(m, x, 10, a) == predictive(m, x, 10, b));
}

TEST_CASE("property: predictive is a distribution") {
    SeededRng rng(45);
    for (int trial = 0; trial < 20; ++trial) {
        const Variant v = std::array{Variant::Map, Variant::Blob, Variant::De, Variant::Fe, Variant::Clora}[trial % 5];
        const AdaptedModel m = random_model(v, 100 + trial, 6, 2, 2);
        const Matrix x = random_matrix(rng, 3, 1, 2.0);
        for (int mm : {0, 1, 7}) {
            const auto p = predictive(m, x, mm, rng);
            double s = 0.0;
            for (double q : p) {
                CHECK(q >= 0.0);
                s += q;
            }
            CHECK(std::abs(s - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("predictive converges to the quadrature oracle") {
    AdaptedModel m = random_model(Variant::Clora, 46, 4, 1, 1, 3, 3, 6);
    // Make the noise matter: larger omega and a stronger adapter.
    m.params.layers[0].ctx.b2[1] += 1.5;
    m.params.layers[0].b *= 3.0;
    SeededRng rng(3);
    for (int i = 0; i < 3; ++i) {
        const Matrix x = random_matrix(rng, 3, 1);
        const auto mc = predictive(m, x, 10000, rng);
        const auto exact = oracle::clora_r1_predictive(m, x);
        for (std::size_t k = 0; k < 3; ++k) CHECK(std::abs(mc[k] - exact[k]) <= 2e-2);
    }
}

TEST_CASE("contextual posterior depends on earlier layers' draws") {
    SeededRng rng(4);
    const Matrix x = random_matrix(rng, 3, 1);
    for (Variant v : {Variant::Clora, Variant::Fe}) {
        const AdaptedModel m = random_model(v, 47, 6, 2, 2);
        auto n1 = draw_noise(m, rng, false);
        auto n2 = n1;
        n2[0].flip.shared_eps *= -1.0;
        n2[0].flip.shared_eps[0] += 1.0;
        ForwardOptions o;
        o.mode = NoiseMode::Sample;
        o.noise = &n1;
        const ForwardTrace t1 = forward(m, x, o);
        o.noise = &n2;
        const ForwardTrace t2 = forward(m, x, o);
        if (v == Variant::Clora) CHECK_FALSE(t1.layers[1].q.mu == t2.layers[1].q.mu);
        else CHECK(t1.layers[1].q.mu == t2.layers[1].q.mu);
    }
}

TEST_CASE("flipout with identity signs equals sample mode") {
    const AdaptedModel m = random_model(Variant::Fe, 48, 6, 2, 2);
    SeededRng rng(5);
    const auto shared = draw_noise(m, rng, false);
    const Matrix x = random_matrix(rng, 3, 1);
    CHECK(logits_of(m, x, NoiseMode::Flipout, &shared) == logits_of(m, x, NoiseMode::Sample, &shared));
}

TEST_CASE("make_adapted_model contracts") {
    SeededRng rng(6);
    Backbone bb = random_backbone(rng, 3, 6, 2);
    bb.frozen = false;
    AdapterConfig c;
    c.r = 2;
    CHECK_THROWS_AS(make_adapted_model(bb, c, 2, rng), UsageError);
    bb.frozen = true;
    CHECK_THROWS_AS(make_adapted_model(bb, c, 1, rng), UsageError);
    const AdaptedModel m = make_adapted_model(bb, c, 2, rng);
    CHECK(m.params.layers.size() == bb.depth());
    CHECK(m.config.d == 6);
}

TEST_CASE("pretrain_backbone") {
    // Two well separated blobs in 8 dimensions.
    SeededRng rng(7);
    Dataset src;
    src.num_classes = 2;
    src.x = Matrix(400, 8);
    for (std::size_t i = 0; i < 400; ++i) {
        const std::size_t y = i % 2;
        src.y.push_back(y);
        for (std::size_t f = 0; f < 8; ++f) src.x(i, f) = (y ? 2.0 : -2.0) * (f < 2) + 0.3 * rng.normal();
    }
    PretrainSpec spec;
    spec.d = 8;
    spec.depth = 2;
    spec.epochs = 5;
    SeededRng r1(8), r2(8);
    const PretrainResult a = pretrain_backbone(spec, src, r1);
    const PretrainResult b = pretrain_backbone(spec, src, r2);
    CHECK(a.source_accuracy >= 0.99);
    CHECK(a.backbone.frozen);
    CHECK(a.backbone.embed_w == b.backbone.embed_w);
    CHECK(a.backbone.layers == b.backbone.layers);

    spec.epochs = 0;
    spec.target_accuracy = 1.01;
    SeededRng r3(8);
    CHECK_THROWS_AS(pretrain_backbone(spec, src, r3), TrainingError);
}
