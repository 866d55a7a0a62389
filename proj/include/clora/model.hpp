// SPDX-License-Identifier: Apache-2.0
//
// A small ReLU network standing in for a pretrained backbone. Every frozen
// layer W0^l carries its own adapter; sampling at layer l sees x^{l-1},
// which already depends on the draws of layers 1..l-1.
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "clora/adapters.hpp"
#include "clora/dataset.hpp"
#include "clora/numerics.hpp"

namespace clora {

struct Backbone {
    Matrix embed_w;              // d × d_in
    Matrix embed_b;              // d × 1
    std::vector<Matrix> layers;  // L frozen d × d weights
    bool frozen = false;

    std::size_t d_in() const noexcept { return embed_w.cols(); }
    std::size_t d() const noexcept { return embed_w.rows(); }
    std::size_t depth() const noexcept { return layers.size(); }
};

// Everything fine-tuning may change: per-layer adapters and the head.
struct Params {
    std::vector<AdapterParams> layers;
    Matrix head_w;  // K × d
    Matrix head_b;  // K × 1

    template <typename F>
    void visit(Variant variant, F&& f) { visit_impl(*this, variant, f); }
    template <typename F>
    void visit(Variant variant, F&& f) const { visit_impl(*this, variant, f); }

    Params zeros_like() const;

private:
    template <typename Self, typename F>
    static void visit_impl(Self& self, Variant variant, F& f) {
        for (std::size_t l = 0; l < self.layers.size(); ++l) {
            const std::string prefix = "layer" + std::to_string(l) + ".";
            self.layers[l].visit(variant, [&](const char* name, auto& m, ParamGroup g) {
                f(prefix + name, m, g);
            });
        }
        f(std::string("head.W"), self.head_w, ParamGroup::Theta);
        f(std::string("head.b"), self.head_b, ParamGroup::Theta);
    }
};

struct ParamRef {
    std::string name;
    Matrix* value;
    ParamGroup group;
};
std::vector<ParamRef> param_refs(Params& params, Variant variant);

struct AdaptedModel {
    Backbone backbone;
    AdapterConfig config;
    Params params;
    std::size_t num_classes = 0;

    Variant variant() const noexcept { return config.variant; }
};

// Wraps a frozen backbone with freshly initialized adapters and a new head.
AdaptedModel make_adapted_model(const Backbone& backbone,
                                AdapterConfig config,
                                std::size_t num_classes,
                                SeededRng& rng);

struct ForwardOptions {
    NoiseMode mode = NoiseMode::Mean;
    // One entry per layer; required unless mode is Mean.
    const std::vector<LayerNoise>* noise = nullptr;
    FixedPrior prior{};
    KlEstimator estimator = KlEstimator::Closed;
};

struct ForwardTrace {
    Matrix x_in;
    Matrix embed_pre;
    Matrix x0;
    std::vector<LayerTrace> layers;
    Matrix x_last;
    Matrix logits;  // K × 1
    double kl_total = 0.0;
};

ForwardTrace forward(const AdaptedModel& model, const Matrix& x_in, const ForwardOptions& options);

// Accumulates into `grads` the gradient of g_logitsᵀ·logits + kl_weight·Σ_l KL^l.
void backward(const AdaptedModel& model,
              const ForwardTrace& trace,
              const Matrix& g_logits,
              double kl_weight,
              Params& grads);

// Fresh per-layer noise for one forward pass.
std::vector<LayerNoise> draw_noise(const AdaptedModel& model, SeededRng& rng, bool random_signs);

// m = 0: logits at the posterior mean. m ≥ 1: logits of m independent
// sample-mode passes. Each entry has length K.
std::vector<std::vector<double>> logit_samples(const AdaptedModel& model,
                                               const Matrix& x_in,
                                               int m,
                                               SeededRng& rng);

// Posterior predictive: softmax of the mean pass for m = 0, otherwise the
// average of m sampled softmaxes.
std::vector<double> predictive(const AdaptedModel& model, const Matrix& x_in, int m, SeededRng& rng);

struct PretrainSpec {
    std::size_t d = 32;
    std::size_t depth = 4;
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    double lr = 3e-3;
    double target_accuracy = 0.9;
};

struct PretrainResult {
    Backbone backbone;
    double source_accuracy = 0.0;
};

// Trains embedding, layers, and a throwaway head on `source`, then freezes
// the backbone. Throws TrainingError if target_accuracy is not reached.
PretrainResult pretrain_backbone(const PretrainSpec& spec, const Dataset& source, SeededRng& rng);

}  // namespace clora
