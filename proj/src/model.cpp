// SPDX-License-Identifier: Apache-2.0
#include "clora/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace clora {

Params Params::zeros_like() const {
    Params out;
    out.layers.reserve(layers.size());
    for (const auto& l : layers) out.layers.push_back(l.zeros_like());
    out.head_w = Matrix(head_w.rows(), head_w.cols());
    out.head_b = Matrix(head_b.rows(), head_b.cols());
    return out;
}

std::vector<ParamRef> param_refs(Params& params, Variant variant) {
    std::vector<ParamRef> refs;
    params.visit(variant, [&](const std::string& name, Matrix& m, ParamGroup g) {
        refs.push_back({name, &m, g});
    });
    return refs;
}

AdaptedModel make_adapted_model(const Backbone& backbone,
                                AdapterConfig config,
                                std::size_t num_classes,
                                SeededRng& rng) {
    if (!backbone.frozen) throw UsageError("make_adapted_model: backbone must be frozen first");
    if (backbone.depth() < 1) throw UsageError("make_adapted_model: backbone has no layers");
    if (num_classes < 2) throw UsageError("make_adapted_model: need at least 2 classes");
    config.d = backbone.d();
    config.validate();
    AdaptedModel model;
    model.backbone = backbone;
    model.config = config;
    model.num_classes = num_classes;
    SeededRng adapter_rng = rng.split("adapters");
    for (std::size_t l = 0; l < backbone.depth(); ++l) {
        SeededRng layer_rng = adapter_rng.split(static_cast<std::uint64_t>(l));
        model.params.layers.push_back(init_adapter(config, layer_rng));
    }
    SeededRng head_rng = rng.split("head");
    model.params.head_w = sample_standard_normal(head_rng, num_classes, backbone.d());
    model.params.head_w *= 1.0 / std::sqrt(static_cast<double>(backbone.d()));
    model.params.head_b = Matrix(num_classes, 1);
    return model;
}

ForwardTrace forward(const AdaptedModel& model, const Matrix& x_in, const ForwardOptions& options) {
    const Backbone& bb = model.backbone;
    if (x_in.rows() != bb.d_in() || x_in.cols() != 1) {
        throw ShapeError("forward: input is " + x_in.shape_str() + ", expected " +
                         std::to_string(bb.d_in()) + "x1");
    }
    if (options.mode != NoiseMode::Mean &&
        (options.noise == nullptr || options.noise->size() != bb.depth())) {
        throw UsageError("forward: sample/flipout mode needs one noise draw per layer");
    }
    ForwardTrace tr;
    tr.x_in = x_in;
    tr.embed_pre = add(matmul(bb.embed_w, x_in), bb.embed_b);
    tr.x0 = relu(tr.embed_pre);
    require_finite(tr.x0, "embedding output");
    Matrix x = tr.x0;
    tr.layers.reserve(bb.depth());
    for (std::size_t l = 0; l < bb.depth(); ++l) {
        const LayerNoise* noise = options.mode == NoiseMode::Mean ? nullptr : &(*options.noise)[l];
        AdapterForward f = adapter_forward(model.config, model.params.layers[l], bb.layers[l], x,
                                           options.mode, noise, options.prior, options.estimator);
        x = relu(f.h);
        if (!all_finite(x)) throw NumericError("forward: non-finite activation at layer " + std::to_string(l));
        tr.kl_total += f.trace.kl;
        tr.layers.push_back(std::move(f.trace));
    }
    tr.x_last = x;
    tr.logits = add(matmul(model.params.head_w, x), model.params.head_b);
    require_finite(tr.logits, "logits");
    return tr;
}

void backward(const AdaptedModel& model,
              const ForwardTrace& trace,
              const Matrix& g_logits,
              double kl_weight,
              Params& grads) {
    const Backbone& bb = model.backbone;
    grads.head_w += matmul_nt(g_logits, trace.x_last);
    grads.head_b += g_logits;
    Matrix g_x = matmul_tn(model.params.head_w, g_logits);
    for (std::size_t l = bb.depth(); l-- > 0;) {
        const LayerTrace& lt = trace.layers[l];
        const Matrix g_h = relu_backward(lt.h, g_x);
        g_x = adapter_backward(model.config, model.params.layers[l], bb.layers[l], lt, g_h, kl_weight,
                               grads.layers[l]);
    }
}

std::vector<LayerNoise> draw_noise(const AdaptedModel& model, SeededRng& rng, bool random_signs) {
    std::vector<LayerNoise> noise;
    noise.reserve(model.backbone.depth());
    for (std::size_t l = 0; l < model.backbone.depth(); ++l) {
        noise.push_back(draw_layer_noise(model.config, rng, random_signs));
    }
    return noise;
}

std::vector<std::vector<double>> logit_samples(const AdaptedModel& model,
                                               const Matrix& x_in,
                                               int m,
                                               SeededRng& rng) {
    if (m < 0) throw UsageError("predictive: sample count m must be >= 0");
    std::vector<std::vector<double>> out;
    if (m == 0) {
        const ForwardTrace tr = forward(model, x_in, {});
        out.emplace_back(tr.logits.storage());
        return out;
    }
    out.reserve(static_cast<std::size_t>(m));
    for (int s = 0; s < m; ++s) {
        const auto noise = draw_noise(model, rng, false);
        ForwardOptions opts;
        opts.mode = NoiseMode::Sample;
        opts.noise = &noise;
        const ForwardTrace tr = forward(model, x_in, opts);
        out.emplace_back(tr.logits.storage());
    }
    return out;
}

std::vector<double> predictive(const AdaptedModel& model, const Matrix& x_in, int m, SeededRng& rng) {
    const auto samples = logit_samples(model, x_in, m, rng);
    std::vector<double> probs(model.num_classes, 0.0);
    for (const auto& l : samples) {
        const auto p = softmax(l);
        for (std::size_t k = 0; k < p.size(); ++k) probs[k] += p[k];
    }
    for (double& p : probs) p /= static_cast<double>(samples.size());
    return probs;
}

namespace {

// Plain Adam used only for backbone pretraining.
struct AdamState {
    std::vector<Matrix> m, v;
    std::size_t t = 0;
};

void adam_update(std::vector<Matrix*>& params,
                 const std::vector<Matrix>& grads,
                 AdamState& st,
                 double lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    if (st.m.empty()) {
        for (auto* p : params) {
            st.m.emplace_back(p->rows(), p->cols());
            st.v.emplace_back(p->rows(), p->cols());
        }
    }
    ++st.t;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Matrix& p = *params[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double g = grads[i][j];
            st.m[i][j] = b1 * st.m[i][j] + (1.0 - b1) * g;
            st.v[i][j] = b2 * st.v[i][j] + (1.0 - b2) * g * g;
            p[j] -= lr * (st.m[i][j] / c1) / (std::sqrt(st.v[i][j] / c2) + eps);
        }
    }
}

}  // namespace

PretrainResult pretrain_backbone(const PretrainSpec& spec, const Dataset& source, SeededRng& rng) {
    if (source.size() == 0) throw UsageError("pretrain_backbone: empty source dataset");
    if (spec.depth < 1) throw UsageError("pretrain_backbone: depth must be >= 1");
    const std::size_t d_in = source.dim(), d = spec.d, k = source.num_classes;

    SeededRng init = rng.split("pretrain-init");
    Backbone bb;
    bb.embed_w = sample_standard_normal(init, d, d_in);
    bb.embed_w *= std::sqrt(2.0 / static_cast<double>(d_in));
    bb.embed_b = Matrix(d, 1, 0.01);
    for (std::size_t l = 0; l < spec.depth; ++l) {
        Matrix w = sample_standard_normal(init, d, d);
        w *= std::sqrt(2.0 / static_cast<double>(d));
        bb.layers.push_back(std::move(w));
    }
    Matrix head_w = sample_standard_normal(init, k, d);
    head_w *= 1.0 / std::sqrt(static_cast<double>(d));
    Matrix head_b(k, 1);

    std::vector<Matrix*> params{&bb.embed_w, &bb.embed_b};
    for (auto& w : bb.layers) params.push_back(&w);
    params.push_back(&head_w);
    params.push_back(&head_b);

    struct Pass {
        Matrix embed_pre;
        std::vector<Matrix> acts;  // x0 .. xL
        std::vector<Matrix> pres;  // pre-activations of layers
        Matrix logits;
    };
    auto run = [&](const Matrix& x) {
        Pass p;
        p.embed_pre = add(matmul(bb.embed_w, x), bb.embed_b);
        p.acts.push_back(relu(p.embed_pre));
        for (const auto& w : bb.layers) {
            p.pres.push_back(matmul(w, p.acts.back()));
            p.acts.push_back(relu(p.pres.back()));
        }
        p.logits = add(matmul(head_w, p.acts.back()), head_b);
        return p;
    };

    SeededRng order_rng = rng.split("pretrain-order");
    std::vector<std::size_t> order(source.size());
    AdamState adam;
    const std::size_t n = source.size();
    const std::size_t bs = std::max<std::size_t>(1, std::min(spec.batch_size, n));
    for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[order_rng.index(i)]);
        for (std::size_t start = 0; start < n; start += bs) {
            const std::size_t end = std::min(n, start + bs);
            std::vector<Matrix> grads;
            for (auto* p : params) grads.emplace_back(p->rows(), p->cols());
            const double inv = 1.0 / static_cast<double>(end - start);
            for (std::size_t b = start; b < end; ++b) {
                const std::size_t idx = order[b];
                const Matrix x = source.example(idx);
                const Pass p = run(x);
                const std::size_t label = source.y[idx];
                Matrix g = Matrix::column(softmax(p.logits.values()));
                g[label] -= 1.0;
                g *= inv;
                const std::size_t last = grads.size();
                grads[last - 2] += matmul_nt(g, p.acts.back());
                grads[last - 1] += g;
                Matrix gx = matmul_tn(head_w, g);
                for (std::size_t l = bb.layers.size(); l-- > 0;) {
                    const Matrix gp = relu_backward(p.pres[l], gx);
                    grads[2 + l] += matmul_nt(gp, p.acts[l]);
                    gx = matmul_tn(bb.layers[l], gp);
                }
                const Matrix ge = relu_backward(p.embed_pre, gx);
                grads[0] += matmul_nt(ge, x);
                grads[1] += ge;
            }
            adam_update(params, grads, adam, spec.lr);
        }
    }

    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const Pass p = run(source.example(i));
        const auto v = p.logits.values();
        const auto pred = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
        if (pred == source.y[i]) ++correct;
    }
    PretrainResult res;
    res.source_accuracy = static_cast<double>(correct) / static_cast<double>(n);
    if (res.source_accuracy < spec.target_accuracy) {
        throw TrainingError("pretrain_backbone: source accuracy " + std::to_string(res.source_accuracy) +
                            " below target " + std::to_string(spec.target_accuracy));
    }
    bb.frozen = true;
    res.backbone = std::move(bb);
    return res;
}

}  // namespace clora
