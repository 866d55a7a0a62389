// SPDX-License-Identifier: Apache-2.0
//
// Low-rank adapters of the form h = W0 x + (alpha/r) B E A x.
//
//   MAP    deterministic trainable E (plain LoRA up to reparameterization)
//   BLOB   mean-field Gaussian over A, no E
//   DE     mean-field Gaussian over a diagonal E
//   FE     mean-field Gaussian over a full r×r E
//   CLORA  Gaussian over E whose (mu, omega) are predicted per input from
//          z = A x by a two-layer network (the contextual module)
//
// MC dropout is MAP with dropout on z; see AdapterConfig::dropout.
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "clora/numerics.hpp"
#include "clora/variational.hpp"

namespace clora {

enum class Variant { Map, Blob, De, Fe, Clora };

std::string_view to_string(Variant v) noexcept;
Variant variant_from_string(std::string_view s);
bool is_stochastic(Variant v) noexcept;

struct AdapterConfig {
    std::size_t d = 32;
    std::size_t r = 8;
    double alpha = 16.0;
    std::size_t hidden_c = 64;
    Variant variant = Variant::Clora;
    // Initial posterior std for DE/FE/CLORA (through the sigmoid head).
    double omega_init = 0.5;
    // Initial posterior std of A's entries for BLOB.
    double blob_omega_init = 0.05;
    // Dropout rate on z; only meaningful for MAP (MC dropout baseline).
    double dropout = 0.0;

    double scaling() const noexcept { return alpha / static_cast<double>(r); }
    void validate() const;
};

// Number of parameters that define the adapter's weight distribution.
std::size_t stochastic_param_count(const AdapterConfig& config);

struct ContextualModule {
    Matrix w1;  // C × r
    Matrix b1;  // C × 1
    Matrix w2;  // 2r² × C
    Matrix b2;  // 2r² × 1

    std::size_t param_count() const noexcept { return w1.size() + b1.size() + w2.size() + b2.size(); }
};

struct ContextCache {
    Matrix hidden_pre;  // C × 1
    Matrix hidden;      // C × 1
    Matrix omega_pre;   // r × r, before the sigmoid
    DiagonalGaussian q;
};

// omega = sigmoid(x) with x clamped to ±kOmegaPreBound, so omega stays
// strictly inside (0, 1) in double precision. The gradient is zero outside
// the bound.
inline constexpr double kOmegaPreBound = 30.0;
Matrix omega_head(const Matrix& pre);
Matrix omega_head_backward(const Matrix& pre, const Matrix& omega, const Matrix& g_omega);

struct ContextGrads {
    Matrix w1, b1, w2, b2;
    Matrix z;
};

// hidden = relu(W1 z + b1); out = W2 hidden + b2; mu = first r² entries
// (row-major r×r), omega = sigmoid(last r² entries).
ContextCache context_forward(const ContextualModule& module, const Matrix& z);

ContextGrads context_backward(const ContextualModule& module,
                              const Matrix& z,
                              const ContextCache& cache,
                              const Matrix& grad_mu,
                              const Matrix& grad_omega);

enum class ParamGroup {
    Theta,  // deterministic weights, trained on the likelihood only
    Phi,    // posterior parameters, also receive the KL gradient
};

// Trainable state of one layer's adapter. Fields a variant does not use
// stay empty and are skipped by visit().
struct AdapterParams {
    Matrix b;         // d × r
    Matrix a;         // r × d; the posterior mean of A for BLOB
    Matrix e;         // r × r, MAP only
    Matrix post_mu;   // DE: r × 1, FE: r × r
    Matrix post_rho;  // pre-sigmoid omega. DE: r × 1, FE: r × r, BLOB: r × d
    ContextualModule ctx;

    // Calls f(name, matrix, group) for every parameter the variant uses, in
    // a fixed order.
    template <typename F>
    void visit(Variant variant, F&& f) { visit_impl(*this, variant, f); }
    template <typename F>
    void visit(Variant variant, F&& f) const { visit_impl(*this, variant, f); }

    // Same shapes, all zero.
    AdapterParams zeros_like() const;

private:
    template <typename Self, typename F>
    static void visit_impl(Self& self, Variant variant, F& f) {
        f("B", self.b, ParamGroup::Theta);
        f("A", self.a, variant == Variant::Blob ? ParamGroup::Phi : ParamGroup::Theta);
        if (!self.e.empty()) f("E", self.e, ParamGroup::Theta);
        if (!self.post_mu.empty()) f("post_mu", self.post_mu, ParamGroup::Phi);
        if (!self.post_rho.empty()) f("post_rho", self.post_rho, ParamGroup::Phi);
        if (!self.ctx.w1.empty()) {
            f("ctx.W1", self.ctx.w1, ParamGroup::Phi);
            f("ctx.b1", self.ctx.b1, ParamGroup::Phi);
            f("ctx.W2", self.ctx.w2, ParamGroup::Phi);
            f("ctx.b2", self.ctx.b2, ParamGroup::Phi);
        }
    }
};

AdapterParams init_adapter(const AdapterConfig& config, SeededRng& rng);

// How E (or A for BLOB) is chosen for a forward pass.
enum class NoiseMode {
    Mean,     // posterior mean, no dropout
    Sample,   // mu + omega ⊙ eps
    Flipout,  // mu + (eps ⊙ omega) ⊙ (t sᵀ), eps shared across a batch
};

struct LayerNoise {
    FlipoutNoise flip;                  // eps plus sign vectors (all ones for Sample)
    std::vector<double> dropout_mask;   // length r, already scaled by 1/(1−p); empty = none
};

// Shape of the Gaussian noise a variant consumes per layer (0×0 if none).
std::pair<std::size_t, std::size_t> noise_shape(const AdapterConfig& config);
LayerNoise draw_layer_noise(const AdapterConfig& config, SeededRng& rng, bool random_signs);
// Same eps, fresh sign vectors; used to give each batch member its own flips.
LayerNoise reflip(const AdapterConfig& config, const LayerNoise& shared, SeededRng& rng);

enum class KlEstimator { Closed, Sampled };

struct LayerTrace {
    Matrix x_prev;
    Matrix z;        // A x (pre-dropout)
    Matrix z_used;   // after dropout
    std::vector<double> dropout_mask;  // empty when no dropout was applied
    Matrix a_used;   // BLOB only
    Matrix e_used;   // r × r (empty for BLOB)
    Matrix u;        // E z_used  (z_used for BLOB)
    Matrix h;        // W0 x + s B u
    DiagonalGaussian q;  // posterior the sample was drawn from (empty for MAP)
    std::optional<ContextCache> ctx;
    Matrix eps_eff;  // eps ⊙ signs actually applied (empty in mean mode)
    double kl = 0.0;
    KlResult kl_grad;
};

struct AdapterForward {
    Matrix h;
    LayerTrace trace;
};

// One adapted linear map: h = W0 x + (alpha/r) B E z with z = A x. The
// model applies the nonlinearity. `noise` is required for Sample/Flipout;
// mean mode ignores it.
AdapterForward adapter_forward(const AdapterConfig& config,
                               const AdapterParams& params,
                               const Matrix& w0,
                               const Matrix& x,
                               NoiseMode mode,
                               const LayerNoise* noise,
                               const FixedPrior& prior,
                               KlEstimator estimator = KlEstimator::Closed);

// Accumulates into `grads` the gradient of g_hᵀh + kl_weight · KL.
// Returns ∂/∂x_prev.
Matrix adapter_backward(const AdapterConfig& config,
                        const AdapterParams& params,
                        const Matrix& w0,
                        const LayerTrace& trace,
                        const Matrix& g_h,
                        double kl_weight,
                        AdapterParams& grads);

// Posterior of E (or A for BLOB) for non-contextual variants.
DiagonalGaussian free_posterior(const AdapterConfig& config, const AdapterParams& params);

double logit(double p);

}  // namespace clora
