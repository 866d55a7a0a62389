// SPDX-License-Identifier: Apache-2.0
#include "clora/training.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace clora {

void TrainConfig::validate() const {
    if (iters == 0) throw UsageError("train: iters must be > 0");
    if (eval_every == 0 || eval_every > iters) throw UsageError("train: eval_every must be in [1, iters]");
    if (batch_size == 0) throw UsageError("train: batch_size must be > 0");
    if (kl_scale && !(*kl_scale >= 0.0)) throw DomainError("train: kl_scale must be >= 0");
    if (!(sigma_p > 0.0)) throw DomainError("train: sigma_p must be > 0");
    if (!(lr_main >= 0.0) || !(lr_kl >= 0.0)) throw DomainError("train: learning rates must be >= 0");
    if (mc_samples_eval < 0) throw UsageError("train: mc_samples_eval must be >= 0");
    if (bins < 1) throw UsageError("train: bins must be >= 1");
}

double TrainConfig::resolved_kl_scale(std::size_t n_train) const {
    if (kl_scale) return *kl_scale;
    return n_train == 0 ? 0.0 : 1.0 / static_cast<double>(n_train);
}

double linear_lr(double lr0, std::size_t t, std::size_t iters) noexcept {
    return lr0 * (1.0 - static_cast<double>(t) / static_cast<double>(iters));
}

std::vector<std::vector<LayerNoise>> draw_batch_noise(const AdaptedModel& model,
                                                      std::size_t batch_size,
                                                      SeededRng& rng) {
    const auto shared = draw_noise(model, rng, false);
    std::vector<std::vector<LayerNoise>> out(batch_size);
    for (auto& ex : out) {
        ex.reserve(shared.size());
        for (const auto& layer : shared) ex.push_back(reflip(model.config, layer, rng));
    }
    return out;
}

ElboTerms elbo_terms(const AdaptedModel& model,
                     const Dataset& batch,
                     const std::vector<std::vector<LayerNoise>>& noise,
                     double kl_scale,
                     const FixedPrior& prior,
                     KlEstimator estimator) {
    const std::size_t n = batch.size();
    if (n == 0) throw UsageError("elbo_terms: empty batch");
    if (noise.size() != n) throw UsageError("elbo_terms: need one noise draw per example");
    ElboTerms terms;
    terms.grad_nll = model.params.zeros_like();
    terms.grad_kl = model.params.zeros_like();
    const double inv_n = 1.0 / static_cast<double>(n);
    const bool has_kl = is_stochastic(model.variant());
    const Matrix zero_logits(model.num_classes, 1);
    for (std::size_t i = 0; i < n; ++i) {
        ForwardOptions opts;
        opts.mode = NoiseMode::Flipout;
        opts.noise = &noise[i];
        opts.prior = prior;
        opts.estimator = estimator;
        const ForwardTrace tr = forward(model, batch.example(i), opts);
        const std::size_t label = batch.y[i];
        if (label >= model.num_classes) throw IndexError("elbo_terms: label out of range");
        const auto p = softmax(tr.logits.values());
        const double nll_i = -std::log(std::max(p[label], 1e-300));
        if (!std::isfinite(nll_i) || !std::isfinite(tr.kl_total)) {
            throw NumericError("elbo_terms: non-finite loss at example " + std::to_string(i));
        }
        terms.nll += nll_i * inv_n;
        terms.kl_raw += tr.kl_total * inv_n;
        Matrix g = Matrix::column(p);
        g[label] -= 1.0;
        g *= inv_n;
        backward(model, tr, g, 0.0, terms.grad_nll);
        if (has_kl && kl_scale != 0.0) backward(model, tr, zero_logits, kl_scale * inv_n, terms.grad_kl);
    }
    terms.kl = kl_scale * terms.kl_raw;
    return terms;
}

double route_kl_to_phi(Params& grad_kl, Variant variant) {
    double removed = 0.0;
    grad_kl.visit(variant, [&](const std::string&, Matrix& g, ParamGroup group) {
        if (group == ParamGroup::Theta) {
            removed += frobenius_sq(g);
            g.fill(0.0);
        }
    });
    return removed;
}

void AdamW::step(Params& params, const Params& grads, Variant variant, ParamGroup group, std::size_t t, double lr) {
    std::vector<Matrix*> ps;
    std::vector<const Matrix*> gs;
    std::vector<ParamGroup> groups;
    params.visit(variant, [&](const std::string&, Matrix& m, ParamGroup g) {
        ps.push_back(&m);
        groups.push_back(g);
    });
    grads.visit(variant, [&](const std::string&, const Matrix& m, ParamGroup) { gs.push_back(&m); });
    if (m_.empty()) {
        for (auto* p : ps) {
            m_.emplace_back(p->rows(), p->cols());
            v_.emplace_back(p->rows(), p->cols());
        }
    }
    if (m_.size() != ps.size() || gs.size() != ps.size()) throw ShapeError("AdamW: parameter layout changed");
    const double step = static_cast<double>(t + 1);
    const double c1 = 1.0 - std::pow(beta1_, step);
    const double c2 = 1.0 - std::pow(beta2_, step);
    for (std::size_t i = 0; i < ps.size(); ++i) {
        if (groups[i] != group) continue;
        Matrix& p = *ps[i];
        const Matrix& g = *gs[i];
        require_same_shape(p, g, "AdamW");
        for (std::size_t j = 0; j < p.size(); ++j) {
            m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
            v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
            p[j] -= lr * weight_decay_ * p[j];
            p[j] -= lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
        }
    }
}

void sgd_step(Params& params, const Params& grads, Variant variant, ParamGroup group, double lr) {
    std::vector<const Matrix*> gs;
    grads.visit(variant, [&](const std::string&, const Matrix& m, ParamGroup) { gs.push_back(&m); });
    std::size_t i = 0;
    params.visit(variant, [&](const std::string&, Matrix& p, ParamGroup g) {
        const Matrix& grad = *gs.at(i++);
        if (g != group) return;
        require_same_shape(p, grad, "sgd_step");
        for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * grad[j];
    });
}

double clip_global_norm(Params& grads, double max_norm) {
    double sq = 0.0;
    // The variant only changes group labels; every non-empty matrix is visited.
    const Params& cg = grads;
    cg.visit(Variant::Clora, [&](const std::string&, const Matrix& m, ParamGroup) { sq += frobenius_sq(m); });
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        grads.visit(Variant::Clora, [&](const std::string&, Matrix& m, ParamGroup) { m *= s; });
    }
    return norm;
}

void step_theta(AdaptedModel& model, const ElboTerms& terms, AdamW& opt, std::size_t t, double lr) {
    opt.step(model.params, terms.grad_nll, model.variant(), ParamGroup::Theta, t, lr);
}

void step_phi(AdaptedModel& model,
              const ElboTerms& terms,
              AdamW& opt,
              std::size_t t,
              double lr_main,
              double lr_kl) {
    opt.step(model.params, terms.grad_nll, model.variant(), ParamGroup::Phi, t, lr_main);
    sgd_step(model.params, terms.grad_kl, model.variant(), ParamGroup::Phi, lr_kl);
}

double checkpoint_criterion(double acc_val, double ece_val) {
    if (!(acc_val >= 0.0 && acc_val <= 1.0) || !(ece_val >= 0.0 && ece_val <= 1.0)) {
        throw DomainError("checkpoint_criterion: ACC and ECE must lie in [0, 1]");
    }
    return (1.0 - acc_val) * ece_val;
}

int validation_samples(const AdaptedModel& model, const TrainConfig& config) {
    const bool stochastic = is_stochastic(model.variant()) || model.config.dropout > 0.0;
    return stochastic ? config.mc_samples_eval : 0;
}

CalibrationReport validate_model(const AdaptedModel& model,
                                 const Dataset& val,
                                 const TrainConfig& config,
                                 const SeededRng& rng) {
    SeededRng val_rng = rng.split("validation");
    return evaluate(model, val, validation_samples(model, config), config.bins, val_rng);
}

CheckpointState train(AdaptedModel& model,
                      const Dataset& train_data,
                      const Dataset& val_data,
                      const TrainConfig& config,
                      const SeededRng& rng) {
    config.validate();
    if (train_data.size() == 0 || val_data.size() == 0) throw UsageError("train: empty train or validation split");
    const double kl_scale = config.resolved_kl_scale(train_data.size());
    const FixedPrior prior{config.sigma_p};
    const Variant variant = model.variant();

    SeededRng batch_rng = rng.split("batches");
    SeededRng noise_rng = rng.split("noise");
    AdamW opt(config.weight_decay);
    CheckpointState state;
    state.best_params = model.params;

    std::vector<std::size_t> order(train_data.size());
    std::size_t cursor = order.size();
    double nll_acc = 0.0, kl_acc = 0.0;
    std::size_t acc_steps = 0;

    for (std::size_t t = 0; t < config.iters; ++t) {
        std::vector<std::size_t> idx;
        idx.reserve(config.batch_size);
        for (std::size_t b = 0; b < config.batch_size; ++b) {
            if (cursor == order.size()) {
                std::iota(order.begin(), order.end(), 0);
                for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[batch_rng.index(i)]);
                cursor = 0;
            }
            idx.push_back(order[cursor++]);
        }
        const Dataset batch = train_data.subset(idx);
        const auto noise = draw_batch_noise(model, batch.size(), noise_rng);

        ElboTerms terms;
        try {
            terms = elbo_terms(model, batch, noise, kl_scale, prior, config.kl_estimator);
        } catch (const NumericError& e) {
            throw NumericError("train: divergence at step " + std::to_string(t) + ": " + e.what());
        }
        route_kl_to_phi(terms.grad_kl, variant);
        clip_global_norm(terms.grad_nll, config.grad_clip);

        const double lr = linear_lr(config.lr_main, t, config.iters);
        const double lr_kl = linear_lr(config.lr_kl, t, config.iters);
        step_theta(model, terms, opt, t, lr);
        step_phi(model, terms, opt, t, lr, lr_kl);

        nll_acc += terms.nll;
        kl_acc += terms.kl;
        ++acc_steps;

        if (t % config.eval_every == 0 || t + 1 == config.iters) {
            const CalibrationReport rep = validate_model(model, val_data, config, rng);
            EvalRecord rec;
            rec.step = t;
            rec.nll = nll_acc / static_cast<double>(acc_steps);
            rec.kl = kl_acc / static_cast<double>(acc_steps);
            rec.acc_val = rep.acc;
            rec.ece_val = rep.ece;
            rec.criterion = checkpoint_criterion(rep.acc, std::min(rep.ece, 1.0));
            state.history.push_back(rec);
            nll_acc = kl_acc = 0.0;
            acc_steps = 0;
            if (rec.criterion < state.best_criterion) {
                state.best_criterion = rec.criterion;
                state.best_step = t;
                state.best_params = model.params;
            }
        }
    }
    model.params = state.best_params;
    return state;
}

std::string step_log_csv(const CheckpointState& state) {
    std::ostringstream os;
    os << "step,nll,kl,acc_val,ece_val,criterion\n";
    char buf[256];
    for (const auto& r : state.history) {
        std::snprintf(buf, sizeof(buf), "%zu,%.10g,%.10g,%.10g,%.10g,%.10g\n", r.step, r.nll, r.kl, r.acc_val,
                      r.ece_val, r.criterion);
        os << buf;
    }
    return os.str();
}

}  // namespace clora
