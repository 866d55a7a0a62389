// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "clora/numerics.hpp"

namespace clora {

// Entrywise Gaussian N(mu, omega²); omega is a standard deviation.
struct DiagonalGaussian {
    Matrix mu;
    Matrix omega;

    // Throws ShapeError / DomainError when the invariants do not hold.
    void validate() const;
};

struct FixedPrior {
    double sigma_p = 1.0;
};

// Rank-one sign pattern applied to a shared noise matrix:
// E_i = mu + (eps ⊙ omega) ⊙ (t sᵀ). `t` indexes rows, `s` columns.
struct FlipoutNoise {
    std::vector<double> s;
    std::vector<double> t;
    Matrix shared_eps;

    static FlipoutNoise identity(Matrix eps);
    static FlipoutNoise draw(SeededRng& rng, Matrix eps);
    // t sᵀ as a matrix; throws DomainError on entries outside {−1, +1}.
    Matrix sign_matrix() const;
};

struct KlResult {
    double value = 0.0;
    Matrix grad_mu;
    Matrix grad_omega;
};

// Σ_entries log(σ_p/ω) + (ω² + μ²)/(2σ_p²) − ½
KlResult kl_to_prior(const DiagonalGaussian& q, const FixedPrior& p);

// Single-sample estimate log q(E) − log p(E) at E = μ + ω⊙ε with ε held
// fixed; gradients are pathwise. Its expectation over ε equals kl_to_prior.
KlResult kl_sampled(const DiagonalGaussian& q, const FixedPrior& p, const Matrix& eps);

Matrix reparam_sample(const DiagonalGaussian& q, const Matrix& eps);
Matrix flipout_perturb(const DiagonalGaussian& q, const FlipoutNoise& noise);

}  // namespace clora
