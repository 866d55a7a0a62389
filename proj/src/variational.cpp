// SPDX-License-Identifier: Apache-2.0
#include "clora/variational.hpp"

#include <cmath>

namespace clora {

void DiagonalGaussian::validate() const {
    require_same_shape(mu, omega, "DiagonalGaussian");
    for (double w : omega.values()) {
        if (!(w > 0.0)) throw DomainError("DiagonalGaussian: omega entries must be > 0");
    }
}

FlipoutNoise FlipoutNoise::identity(Matrix eps) {
    FlipoutNoise n;
    n.t.assign(eps.rows(), 1.0);
    n.s.assign(eps.cols(), 1.0);
    n.shared_eps = std::move(eps);
    return n;
}

FlipoutNoise FlipoutNoise::draw(SeededRng& rng, Matrix eps) {
    FlipoutNoise n;
    n.t.resize(eps.rows());
    n.s.resize(eps.cols());
    for (double& v : n.t) v = rng.sign();
    for (double& v : n.s) v = rng.sign();
    n.shared_eps = std::move(eps);
    return n;
}

Matrix FlipoutNoise::sign_matrix() const {
    if (t.size() != shared_eps.rows() || s.size() != shared_eps.cols()) {
        throw ShapeError("FlipoutNoise: sign vectors of length " + std::to_string(t.size()) + "/" +
                         std::to_string(s.size()) + " do not match noise " + shared_eps.shape_str());
    }
    auto check = [](double v) {
        if (v != 1.0 && v != -1.0) throw DomainError("FlipoutNoise: sign entries must be +1 or -1");
    };
    for (double v : t) check(v);
    for (double v : s) check(v);
    Matrix m(t.size(), s.size());
    for (std::size_t i = 0; i < t.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j) m(i, j) = t[i] * s[j];
    return m;
}

KlResult kl_to_prior(const DiagonalGaussian& q, const FixedPrior& p) {
    if (!(p.sigma_p > 0.0)) throw DomainError("kl_to_prior: sigma_p must be > 0");
    q.validate();
    const double var_p = p.sigma_p * p.sigma_p;
    const double log_sp = std::log(p.sigma_p);
    KlResult res{0.0, Matrix(q.mu.rows(), q.mu.cols()), Matrix(q.mu.rows(), q.mu.cols())};
    for (std::size_t i = 0; i < q.mu.size(); ++i) {
        const double m = q.mu[i], w = q.omega[i];
        res.value += log_sp - std::log(w) + (w * w + m * m) / (2.0 * var_p) - 0.5;
        res.grad_mu[i] = m / var_p;
        res.grad_omega[i] = -1.0 / w + w / var_p;
    }
    return res;
}

KlResult kl_sampled(const DiagonalGaussian& q, const FixedPrior& p, const Matrix& eps) {
    if (!(p.sigma_p > 0.0)) throw DomainError("kl_sampled: sigma_p must be > 0");
    q.validate();
    require_same_shape(q.mu, eps, "kl_sampled");
    const double var_p = p.sigma_p * p.sigma_p;
    const double log_sp = std::log(p.sigma_p);
    KlResult res{0.0, Matrix(q.mu.rows(), q.mu.cols()), Matrix(q.mu.rows(), q.mu.cols())};
    for (std::size_t i = 0; i < q.mu.size(); ++i) {
        const double w = q.omega[i], e = eps[i];
        const double x = q.mu[i] + w * e;
        // log N(x; μ, ω²) − log N(x; 0, σ_p²); the 2π terms cancel.
        res.value += -std::log(w) - 0.5 * e * e + log_sp + x * x / (2.0 * var_p);
        res.grad_mu[i] = x / var_p;
        res.grad_omega[i] = -1.0 / w + e * x / var_p;
    }
    return res;
}

Matrix reparam_sample(const DiagonalGaussian& q, const Matrix& eps) {
    require_same_shape(q.mu, q.omega, "reparam_sample");
    require_same_shape(q.mu, eps, "reparam_sample");
    Matrix out(q.mu.rows(), q.mu.cols());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = q.mu[i] + q.omega[i] * eps[i];
    return out;
}

Matrix flipout_perturb(const DiagonalGaussian& q, const FlipoutNoise& noise) {
    require_same_shape(q.mu, q.omega, "flipout_perturb");
    require_same_shape(q.mu, noise.shared_eps, "flipout_perturb");
    const Matrix signs = noise.sign_matrix();
    Matrix out(q.mu.rows(), q.mu.cols());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = q.mu[i] + noise.shared_eps[i] * q.omega[i] * signs[i];
    }
    return out;
}

}  // namespace clora
