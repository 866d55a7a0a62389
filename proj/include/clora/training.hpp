// SPDX-License-Identifier: Apache-2.0
//
// Fine-tuning loop. Deterministic weights θ (B, A, head, MAP's E) follow
// the likelihood gradient only; posterior parameters φ take the likelihood
// gradient through AdamW and the KL gradient through a separate SGD with a
// linearly decaying rate.
#pragma once

#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "clora/dataset.hpp"
#include "clora/eval.hpp"
#include "clora/model.hpp"

namespace clora {

struct TrainConfig {
    double lr_main = 1e-4;
    double lr_kl = 1e-4;
    double weight_decay = 0.01;
    std::size_t batch_size = 4;
    std::size_t iters = 1500;
    std::size_t eval_every = 100;
    // Multiplier on the batch-mean KL; unset means 1 / N_train.
    std::optional<double> kl_scale;
    double sigma_p = 1.0;
    KlEstimator kl_estimator = KlEstimator::Closed;
    int mc_samples_eval = 10;
    double grad_clip = 10.0;
    std::size_t bins = 15;

    void validate() const;
    double resolved_kl_scale(std::size_t n_train) const;
};

// lr0 · (1 − t / iters)
double linear_lr(double lr0, std::size_t t, std::size_t iters) noexcept;

// Per-example noise for one mini-batch: each layer's eps is shared by the
// batch, each example gets its own flip signs (and dropout mask).
std::vector<std::vector<LayerNoise>> draw_batch_noise(const AdaptedModel& model,
                                                      std::size_t batch_size,
                                                      SeededRng& rng);

struct ElboTerms {
    double nll = 0.0;     // batch mean of −log p(y | x, E)
    double kl = 0.0;      // kl_scale · batch mean of Σ_l KL^l
    double kl_raw = 0.0;  // batch mean of Σ_l KL^l
    Params grad_nll;      // ∂nll over every trainable parameter
    Params grad_kl;       // ∂kl over every trainable parameter
};

ElboTerms elbo_terms(const AdaptedModel& model,
                     const Dataset& batch,
                     const std::vector<std::vector<LayerNoise>>& noise,
                     double kl_scale,
                     const FixedPrior& prior,
                     KlEstimator estimator = KlEstimator::Closed);

// Zeroes the θ entries of a KL gradient; returns the squared norm removed.
double route_kl_to_phi(Params& grad_kl, Variant variant);

// Only params of `group` are touched; others are left as they are.
class AdamW {
public:
    explicit AdamW(double weight_decay = 0.01, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(Params& params, const Params& grads, Variant variant, ParamGroup group, std::size_t t, double lr);

private:
    double weight_decay_, beta1_, beta2_, eps_;
    std::vector<Matrix> m_, v_;
};

void sgd_step(Params& params, const Params& grads, Variant variant, ParamGroup group, double lr);

// Rescales g so its global norm is at most max_norm; returns the pre-clip norm.
double clip_global_norm(Params& grads, double max_norm);

// Update θ from the likelihood gradient only.
void step_theta(AdaptedModel& model, const ElboTerms& terms, AdamW& opt, std::size_t t, double lr);
// Likelihood part of φ via AdamW, KL part via SGD.
void step_phi(AdaptedModel& model,
              const ElboTerms& terms,
              AdamW& opt,
              std::size_t t,
              double lr_main,
              double lr_kl);

// (1 − ACC_val) · ECE_val; lower is better.
double checkpoint_criterion(double acc_val, double ece_val);

struct EvalRecord {
    std::size_t step = 0;
    double nll = 0.0;  // mean training NLL since the previous record
    double kl = 0.0;   // mean scaled KL since the previous record
    double acc_val = 0.0;
    double ece_val = 0.0;
    double criterion = 0.0;
};

struct CheckpointState {
    double best_criterion = std::numeric_limits<double>::infinity();
    std::size_t best_step = 0;
    Params best_params;
    std::vector<EvalRecord> history;
};

// Validation sample count used for checkpointing.
int validation_samples(const AdaptedModel& model, const TrainConfig& config);
// Evaluates on `val` with the fixed validation stream derived from `rng`.
CalibrationReport validate_model(const AdaptedModel& model,
                                 const Dataset& val,
                                 const TrainConfig& config,
                                 const SeededRng& rng);

// Runs config.iters flipout steps, checkpoints on the criterion every
// eval_every steps and at the last step, and leaves the best parameters in
// `model`.
CheckpointState train(AdaptedModel& model,
                      const Dataset& train_data,
                      const Dataset& val_data,
                      const TrainConfig& config,
                      const SeededRng& rng);

std::string step_log_csv(const CheckpointState& state);

}  // namespace clora
