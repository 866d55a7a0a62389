// SPDX-License-Identifier: Apache-2.0
// Shared fixtures for the unit, property and acceptance tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "clora/model.hpp"
#include "clora/training.hpp"

namespace clora::testing {

inline Matrix random_matrix(SeededRng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
    Matrix m = sample_standard_normal(rng, rows, cols);
    m *= scale;
    return m;
}

inline Backbone random_backbone(SeededRng& rng, std::size_t d_in, std::size_t d, std::size_t depth) {
    Backbone bb;
    bb.embed_w = random_matrix(rng, d, d_in, std::sqrt(2.0 / static_cast<double>(d_in)));
    bb.embed_b = random_matrix(rng, d, 1, 0.1);
    // Positive bias keeps most units active so relu kinks stay rare.
    for (std::size_t i = 0; i < d; ++i) bb.embed_b[i] += 0.5;
    for (std::size_t l = 0; l < depth; ++l) {
        Matrix w = random_matrix(rng, d, d, 1.0 / std::sqrt(static_cast<double>(d)));
        for (std::size_t i = 0; i < d; ++i) w(i, i) += 1.0;
        bb.layers.push_back(std::move(w));
    }
    bb.frozen = true;
    return bb;
}

// A model with every trainable matrix randomized (B is nonzero).
inline AdaptedModel random_model(Variant v,
                                 std::uint64_t seed,
                                 std::size_t d = 8,
                                 std::size_t r = 2,
                                 std::size_t depth = 2,
                                 std::size_t d_in = 3,
                                 std::size_t k = 3,
                                 std::size_t hidden_c = 5,
                                 double dropout = 0.0) {
    SeededRng rng(seed);
    AdapterConfig cfg;
    cfg.r = r;
    cfg.alpha = 2.0 * static_cast<double>(r);
    cfg.hidden_c = hidden_c;
    cfg.variant = v;
    cfg.dropout = dropout;
    SeededRng bb_rng = rng.split("backbone");
    SeededRng init = rng.split("init");
    AdaptedModel model = make_adapted_model(random_backbone(bb_rng, d_in, d, depth), cfg, k, init);
    SeededRng pr = rng.split("perturb");
    model.params.visit(v, [&](const std::string& name, Matrix& m, ParamGroup) {
        const bool is_rho = name.find("post_rho") != std::string::npos;
        // Large context weights compound across layers and saturate omega.
        const bool is_ctx = name.find("ctx.") != std::string::npos;
        const double s = is_rho ? 0.5 : is_ctx ? 0.1 : 0.3;
        for (std::size_t i = 0; i < m.size(); ++i) m[i] += s * pr.normal();
    });
    return model;
}

inline Dataset random_batch(SeededRng& rng, std::size_t n, std::size_t d_in, std::size_t k) {
    Dataset b;
    b.num_classes = k;
    b.x = random_matrix(rng, n, d_in);
    for (std::size_t i = 0; i < n; ++i) b.y.push_back(rng.index(k));
    return b;
}

// Frozen-noise ELBO: mean NLL + kl_scale · mean Σ_l KL, assembled from
// forward passes only.
inline double frozen_loss(const AdaptedModel& model,
                          const Dataset& batch,
                          const std::vector<std::vector<LayerNoise>>& noise,
                          double kl_scale,
                          KlEstimator est = KlEstimator::Closed) {
    double total = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        ForwardOptions o;
        o.mode = NoiseMode::Flipout;
        o.noise = &noise[i];
        o.estimator = est;
        const ForwardTrace tr = forward(model, batch.example(i), o);
        const auto z = tr.logits.values();
        double hi = z[0];
        for (double v : z) hi = std::max(hi, v);
        double se = 0.0;
        for (double v : z) se += std::exp(v - hi);
        total += hi + std::log(se) - z[batch.y[i]] + kl_scale * tr.kl_total;
    }
    return total / static_cast<double>(batch.size());
}

struct AuditCase {
    AdaptedModel model;
    Dataset batch;
    std::vector<std::vector<LayerNoise>> noise;
    double kl_scale = 0.3;
};

inline AuditCase audit_case(Variant v, std::uint64_t seed, double dropout = 0.0) {
    AuditCase c;
    c.model = random_model(v, seed, 8, 2, 2, 3, 3, 5, dropout);
    SeededRng rng = SeededRng(seed).split("audit");
    c.batch = random_batch(rng, 3, 3, 3);
    c.noise = draw_batch_noise(c.model, c.batch.size(), rng);
    return c;
}

// Checks the joint gradient (θ ∪ φ) of the frozen-noise ELBO.
inline GradCheckReport audit_gradients(AuditCase& c, KlEstimator est = KlEstimator::Closed) {
    const ElboTerms t = elbo_terms(c.model, c.batch, c.noise, c.kl_scale, FixedPrior{}, est);
    Params total = t.grad_nll;
    std::vector<const Matrix*> kl;
    t.grad_kl.visit(c.model.variant(), [&](const std::string&, const Matrix& m, ParamGroup) { kl.push_back(&m); });
    std::size_t i = 0;
    total.visit(c.model.variant(), [&](const std::string&, Matrix& m, ParamGroup) { m += *kl[i++]; });

    std::vector<GradParam> params;
    std::vector<const Matrix*> grads;
    total.visit(c.model.variant(), [&](const std::string&, const Matrix& m, ParamGroup) { grads.push_back(&m); });
    i = 0;
    c.model.params.visit(c.model.variant(), [&](const std::string& name, Matrix& m, ParamGroup) {
        params.push_back({name, &m, grads[i++]});
    });
    return check_gradients([&] { return frozen_loss(c.model, c.batch, c.noise, c.kl_scale, est); }, params);
}

}  // namespace clora::testing
