// SPDX-License-Identifier: Apache-2.0
#include "clora/adapters.hpp"

#include <algorithm>
#include <cmath>

namespace clora {

std::string_view to_string(Variant v) noexcept {
    switch (v) {
        case Variant::Map: return "MAP";
        case Variant::Blob: return "BLOB";
        case Variant::De: return "DE";
        case Variant::Fe: return "FE";
        case Variant::Clora: return "CLORA";
    }
    return "?";
}

Variant variant_from_string(std::string_view s) {
    if (s == "MAP") return Variant::Map;
    if (s == "BLOB") return Variant::Blob;
    if (s == "DE") return Variant::De;
    if (s == "FE") return Variant::Fe;
    if (s == "CLORA") return Variant::Clora;
    throw UsageError("unknown adapter variant '" + std::string(s) + "'");
}

bool is_stochastic(Variant v) noexcept { return v != Variant::Map; }

double logit(double p) {
    if (!(p > 0.0 && p < 1.0)) throw DomainError("logit: argument must be in (0, 1)");
    return std::log(p / (1.0 - p));
}

void AdapterConfig::validate() const {
    if (r < 1) throw DomainError("adapter rank r must be >= 1");
    if (2 * r > d) {
        throw DomainError("adapter rank r=" + std::to_string(r) + " must be <= d/2 (d=" +
                          std::to_string(d) + ")");
    }
    if (hidden_c < 1) throw DomainError("contextual hidden width must be >= 1");
    if (!(alpha > 0.0)) throw DomainError("LoRA alpha must be > 0");
    if (!(omega_init > 0.0 && omega_init < 1.0)) throw DomainError("omega_init must be in (0, 1)");
    if (!(blob_omega_init > 0.0 && blob_omega_init < 1.0)) {
        throw DomainError("blob_omega_init must be in (0, 1)");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw DomainError("dropout rate must be in [0, 1)");
    if (dropout > 0.0 && variant != Variant::Map) {
        throw DomainError("dropout is only supported for the MAP variant");
    }
}

std::size_t stochastic_param_count(const AdapterConfig& config) {
    const std::size_t r = config.r, c = config.hidden_c;
    switch (config.variant) {
        case Variant::Map: return 0;
        case Variant::De: return 2 * r;
        case Variant::Fe: return 2 * r * r;
        case Variant::Blob: return 2 * r * config.d;
        case Variant::Clora: return c * r + c + 2 * r * r * c + 2 * r * r;
    }
    return 0;
}

Matrix omega_head(const Matrix& pre) {
    Matrix out(pre.rows(), pre.cols());
    for (std::size_t i = 0; i < pre.size(); ++i) {
        out[i] = sigmoid(std::clamp(pre[i], -kOmegaPreBound, kOmegaPreBound));
    }
    return out;
}

Matrix omega_head_backward(const Matrix& pre, const Matrix& omega, const Matrix& g_omega) {
    require_same_shape(pre, g_omega, "omega_head_backward");
    Matrix g(pre.rows(), pre.cols());
    for (std::size_t i = 0; i < pre.size(); ++i) {
        if (std::abs(pre[i]) < kOmegaPreBound) g[i] = g_omega[i] * omega[i] * (1.0 - omega[i]);
    }
    return g;
}

ContextCache context_forward(const ContextualModule& module, const Matrix& z) {
    const std::size_t c = module.w1.rows(), r = module.w1.cols();
    if (z.rows() != r || z.cols() != 1) {
        throw ShapeError("context_forward: z is " + z.shape_str() + ", expected " +
                         std::to_string(r) + "x1");
    }
    if (module.b1.rows() != c || module.w2.cols() != c || module.w2.rows() != 2 * r * r ||
        module.b2.rows() != 2 * r * r) {
        throw ShapeError("context_forward: inconsistent contextual module shapes");
    }
    ContextCache cache;
    cache.hidden_pre = add(matmul(module.w1, z), module.b1);
    cache.hidden = relu(cache.hidden_pre);
    const Matrix out = add(matmul(module.w2, cache.hidden), module.b2);
    const std::size_t rr = r * r;
    cache.q.mu = Matrix(r, r);
    cache.omega_pre = Matrix(r, r);
    for (std::size_t i = 0; i < rr; ++i) {
        cache.q.mu[i] = out[i];
        cache.omega_pre[i] = out[rr + i];
    }
    cache.q.omega = omega_head(cache.omega_pre);
    return cache;
}

ContextGrads context_backward(const ContextualModule& module,
                              const Matrix& z,
                              const ContextCache& cache,
                              const Matrix& grad_mu,
                              const Matrix& grad_omega) {
    require_same_shape(cache.q.mu, grad_mu, "context_backward(mu)");
    require_same_shape(cache.q.omega, grad_omega, "context_backward(omega)");
    const std::size_t rr = grad_mu.size();
    const Matrix g_pre = omega_head_backward(cache.omega_pre, cache.q.omega, grad_omega);
    Matrix g_out(2 * rr, 1);
    for (std::size_t i = 0; i < rr; ++i) {
        g_out[i] = grad_mu[i];
        g_out[rr + i] = g_pre[i];
    }
    ContextGrads g;
    g.w2 = matmul_nt(g_out, cache.hidden);
    g.b2 = g_out;
    const Matrix g_hidden_pre = relu_backward(cache.hidden_pre, matmul_tn(module.w2, g_out));
    g.w1 = matmul_nt(g_hidden_pre, z);
    g.b1 = g_hidden_pre;
    g.z = matmul_tn(module.w1, g_hidden_pre);
    return g;
}

AdapterParams AdapterParams::zeros_like() const {
    auto z = [](const Matrix& m) { return Matrix(m.rows(), m.cols()); };
    AdapterParams out;
    out.b = z(b);
    out.a = z(a);
    out.e = z(e);
    out.post_mu = z(post_mu);
    out.post_rho = z(post_rho);
    out.ctx = {z(ctx.w1), z(ctx.b1), z(ctx.w2), z(ctx.b2)};
    return out;
}

AdapterParams init_adapter(const AdapterConfig& config, SeededRng& rng) {
    config.validate();
    const std::size_t d = config.d, r = config.r;
    AdapterParams p;
    p.a = sample_standard_normal(rng, r, d);
    p.a *= 1.0 / std::sqrt(static_cast<double>(r));
    p.b = Matrix(d, r);
    const double rho0 = logit(config.omega_init);
    switch (config.variant) {
        case Variant::Map:
            p.e = Matrix::identity(r);
            break;
        case Variant::De:
            p.post_mu = Matrix(r, 1, 1.0);
            p.post_rho = Matrix(r, 1, rho0);
            break;
        case Variant::Fe:
            p.post_mu = Matrix::identity(r);
            p.post_rho = Matrix(r, r, rho0);
            break;
        case Variant::Blob:
            p.post_rho = Matrix(r, d, logit(config.blob_omega_init));
            break;
        case Variant::Clora: {
            const std::size_t c = config.hidden_c, rr = r * r;
            p.ctx.w1 = sample_standard_normal(rng, c, r);
            p.ctx.w1 *= std::sqrt(2.0 / static_cast<double>(r));
            p.ctx.b1 = Matrix(c, 1);
            p.ctx.w2 = sample_standard_normal(rng, 2 * rr, c);
            p.ctx.w2 *= 0.1 / std::sqrt(static_cast<double>(c));
            // Start at mu = I and omega = omega_init for every input.
            p.ctx.b2 = Matrix(2 * rr, 1);
            for (std::size_t i = 0; i < r; ++i) p.ctx.b2[i * r + i] = 1.0;
            for (std::size_t i = 0; i < rr; ++i) p.ctx.b2[rr + i] = rho0;
            break;
        }
    }
    return p;
}

DiagonalGaussian free_posterior(const AdapterConfig& config, const AdapterParams& params) {
    switch (config.variant) {
        case Variant::De:
        case Variant::Fe:
            return {params.post_mu, omega_head(params.post_rho)};
        case Variant::Blob:
            return {params.a, omega_head(params.post_rho)};
        default:
            throw UsageError("free_posterior: variant " + std::string(to_string(config.variant)) +
                             " has no free posterior");
    }
}

std::pair<std::size_t, std::size_t> noise_shape(const AdapterConfig& config) {
    switch (config.variant) {
        case Variant::Map: return {0, 0};
        case Variant::Blob: return {config.r, config.d};
        default: return {config.r, config.r};
    }
}

LayerNoise draw_layer_noise(const AdapterConfig& config, SeededRng& rng, bool random_signs) {
    const auto [rows, cols] = noise_shape(config);
    Matrix eps = sample_standard_normal(rng, rows, cols);
    LayerNoise n;
    n.flip = random_signs ? FlipoutNoise::draw(rng, std::move(eps))
                          : FlipoutNoise::identity(std::move(eps));
    if (config.dropout > 0.0) {
        const double keep = 1.0 - config.dropout;
        n.dropout_mask.resize(config.r);
        for (double& m : n.dropout_mask) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
    }
    return n;
}

LayerNoise reflip(const AdapterConfig& config, const LayerNoise& shared, SeededRng& rng) {
    LayerNoise n;
    n.flip = FlipoutNoise::draw(rng, shared.flip.shared_eps);
    if (config.dropout > 0.0) {
        const double keep = 1.0 - config.dropout;
        n.dropout_mask.resize(config.r);
        for (double& m : n.dropout_mask) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
    }
    return n;
}

namespace {

Matrix effective_eps(const LayerNoise& noise, NoiseMode mode, std::size_t rows, std::size_t cols) {
    const Matrix& eps = noise.flip.shared_eps;
    if (eps.rows() != rows || eps.cols() != cols) {
        throw UsageError("adapter noise has shape " + eps.shape_str() + ", expected " +
                         std::to_string(rows) + "x" + std::to_string(cols));
    }
    if (mode == NoiseMode::Sample) return eps;
    return hadamard(eps, noise.flip.sign_matrix());
}

Matrix diag_of(const Matrix& m) {
    Matrix out(m.rows(), 1);
    for (std::size_t i = 0; i < m.rows(); ++i) out[i] = m(i, i);
    return out;
}

}  // namespace

AdapterForward adapter_forward(const AdapterConfig& config,
                               const AdapterParams& params,
                               const Matrix& w0,
                               const Matrix& x,
                               NoiseMode mode,
                               const LayerNoise* noise,
                               const FixedPrior& prior,
                               KlEstimator estimator) {
    const std::size_t d = config.d, r = config.r;
    if (x.rows() != d || x.cols() != 1) {
        throw ShapeError("adapter_forward: x is " + x.shape_str() + ", expected " +
                         std::to_string(d) + "x1");
    }
    if (mode != NoiseMode::Mean && noise == nullptr) {
        throw UsageError("adapter_forward: sample/flipout mode requires a noise draw");
    }
    const bool sampled = mode != NoiseMode::Mean && is_stochastic(config.variant);

    LayerTrace t;
    t.x_prev = x;
    if (config.variant == Variant::Blob) {
        t.q = free_posterior(config, params);
        if (sampled) {
            t.eps_eff = effective_eps(*noise, mode, r, d);
            t.a_used = add(t.q.mu, hadamard(t.q.omega, t.eps_eff));
        } else {
            t.a_used = params.a;
        }
        t.z = matmul(t.a_used, x);
        t.z_used = t.z;
        t.u = t.z_used;
    } else {
        t.z = matmul(params.a, x);
        t.z_used = t.z;
        if (mode != NoiseMode::Mean && !noise->dropout_mask.empty()) {
            t.dropout_mask = noise->dropout_mask;
            for (std::size_t i = 0; i < r; ++i) t.z_used[i] *= t.dropout_mask[i];
        }
        switch (config.variant) {
            case Variant::Map:
                t.e_used = params.e;
                break;
            case Variant::Clora:
                t.ctx = context_forward(params.ctx, t.z);
                t.q = t.ctx->q;
                break;
            default:
                t.q = free_posterior(config, params);
                break;
        }
        if (config.variant != Variant::Map) {
            if (sampled) t.eps_eff = effective_eps(*noise, mode, r, r);
            if (config.variant == Variant::De) {
                t.e_used = Matrix(r, r);
                for (std::size_t i = 0; i < r; ++i) {
                    t.e_used(i, i) = t.q.mu[i] + (sampled ? t.q.omega[i] * t.eps_eff(i, i) : 0.0);
                }
            } else {
                t.e_used = sampled ? add(t.q.mu, hadamard(t.q.omega, t.eps_eff)) : t.q.mu;
            }
        }
        t.u = matmul(t.e_used, t.z_used);
    }
    t.h = add(matmul(w0, x), scale(matmul(params.b, t.u), config.scaling()));

    if (is_stochastic(config.variant)) {
        if (estimator == KlEstimator::Sampled && sampled) {
            const Matrix eps = config.variant == Variant::De ? diag_of(t.eps_eff) : t.eps_eff;
            t.kl_grad = kl_sampled(t.q, prior, eps);
        } else {
            t.kl_grad = kl_to_prior(t.q, prior);
        }
        t.kl = t.kl_grad.value;
    }
    AdapterForward out{t.h, std::move(t)};
    return out;
}

Matrix adapter_backward(const AdapterConfig& config,
                        const AdapterParams& params,
                        const Matrix& w0,
                        const LayerTrace& t,
                        const Matrix& g_h,
                        double kl_weight,
                        AdapterParams& grads) {
    const std::size_t r = config.r;
    const double s = config.scaling();
    require_same_shape(t.h, g_h, "adapter_backward");

    grads.b += scale(matmul_nt(g_h, t.u), s);
    const Matrix g_u = scale(matmul_tn(params.b, g_h), s);
    Matrix g_x = matmul_tn(w0, g_h);
    const bool sampled = !t.eps_eff.empty();

    auto posterior_grads = [&](Matrix g_mu, Matrix g_omega) {
        if (kl_weight != 0.0) {
            g_mu += scale(t.kl_grad.grad_mu, kl_weight);
            g_omega += scale(t.kl_grad.grad_omega, kl_weight);
        }
        return std::pair{std::move(g_mu), std::move(g_omega)};
    };
    auto rho_grad = [&](const Matrix& g_omega) {
        return omega_head_backward(params.post_rho, t.q.omega, g_omega);
    };

    if (config.variant == Variant::Blob) {
        const Matrix& g_z = g_u;
        const Matrix g_a_used = matmul_nt(g_z, t.x_prev);
        g_x += matmul_tn(t.a_used, g_z);
        Matrix g_omega = sampled ? hadamard(g_a_used, t.eps_eff) : Matrix(r, config.d);
        auto [g_mu, g_om] = posterior_grads(g_a_used, std::move(g_omega));
        grads.a += g_mu;
        grads.post_rho += rho_grad(g_om);
        return g_x;
    }

    const Matrix g_e = matmul_nt(g_u, t.z_used);
    Matrix g_z = matmul_tn(t.e_used, g_u);
    if (!t.dropout_mask.empty()) {
        for (std::size_t i = 0; i < r; ++i) g_z[i] *= t.dropout_mask[i];
    }

    switch (config.variant) {
        case Variant::Map:
            grads.e += g_e;
            break;
        case Variant::De: {
            Matrix g_mu(r, 1), g_omega(r, 1);
            for (std::size_t i = 0; i < r; ++i) {
                g_mu[i] = g_e(i, i);
                g_omega[i] = sampled ? g_e(i, i) * t.eps_eff(i, i) : 0.0;
            }
            auto [gm, go] = posterior_grads(std::move(g_mu), std::move(g_omega));
            grads.post_mu += gm;
            grads.post_rho += rho_grad(go);
            break;
        }
        case Variant::Fe: {
            Matrix g_omega = sampled ? hadamard(g_e, t.eps_eff) : Matrix(r, r);
            auto [gm, go] = posterior_grads(g_e, std::move(g_omega));
            grads.post_mu += gm;
            grads.post_rho += rho_grad(go);
            break;
        }
        case Variant::Clora: {
            Matrix g_omega = sampled ? hadamard(g_e, t.eps_eff) : Matrix(r, r);
            auto [gm, go] = posterior_grads(g_e, std::move(g_omega));
            const ContextGrads cg = context_backward(params.ctx, t.z, *t.ctx, gm, go);
            grads.ctx.w1 += cg.w1;
            grads.ctx.b1 += cg.b1;
            grads.ctx.w2 += cg.w2;
            grads.ctx.b2 += cg.b2;
            g_z += cg.z;
            break;
        }
        case Variant::Blob:
            break;
    }
    grads.a += matmul_nt(g_z, t.x_prev);
    g_x += matmul_tn(params.a, g_z);
    return g_x;
}

}  // namespace clora
