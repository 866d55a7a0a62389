// SPDX-License-Identifier: Apache-2.0
#include "clora/eval.hpp"

#include <algorithm>
#include <cmath>

namespace clora {

void PredictionSet::validate() const {
    if (probs.rows() != labels.size()) {
        throw ShapeError("PredictionSet: " + std::to_string(labels.size()) + " labels for " +
                         probs.shape_str() + " probabilities");
    }
    for (std::size_t i = 0; i < probs.rows(); ++i) {
        double s = 0.0;
        for (double v : probs.row(i)) {
            if (!(v >= 0.0 && v <= 1.0)) throw DomainError("PredictionSet: probability outside [0, 1]");
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-9) {
            throw DomainError("PredictionSet: row " + std::to_string(i) + " sums to " + std::to_string(s));
        }
        if (labels[i] >= probs.cols()) throw IndexError("PredictionSet: label out of range");
    }
}

std::size_t argmax(std::span<const double> row) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < row.size(); ++k)
        if (row[k] > row[best]) best = k;
    return best;
}

double accuracy(const PredictionSet& p) {
    if (p.size() == 0) throw UsageError("accuracy: empty prediction set");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (argmax(p.probs.row(i)) == p.labels[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(p.size());
}

EceResult ece(const PredictionSet& p, std::size_t bins) {
    if (bins < 1) throw UsageError("ece: bin count must be >= 1");
    if (p.size() == 0) throw UsageError("ece: empty prediction set");
    std::vector<double> acc_sum(bins, 0.0), conf_sum(bins, 0.0);
    std::vector<std::size_t> count(bins, 0);
    for (std::size_t i = 0; i < p.size(); ++i) {
        const auto row = p.probs.row(i);
        const std::size_t pred = argmax(row);
        const double conf = row[pred];
        // Right-inclusive: (lo, hi] with the first bin also taking 0.
        auto b = static_cast<std::ptrdiff_t>(std::ceil(conf * static_cast<double>(bins))) - 1;
        b = std::clamp<std::ptrdiff_t>(b, 0, static_cast<std::ptrdiff_t>(bins) - 1);
        ++count[b];
        conf_sum[b] += conf;
        acc_sum[b] += pred == p.labels[i] ? 1.0 : 0.0;
    }
    EceResult res;
    const double n = static_cast<double>(p.size());
    for (std::size_t b = 0; b < bins; ++b) {
        BinRecord rec;
        rec.lo = static_cast<double>(b) / static_cast<double>(bins);
        rec.hi = static_cast<double>(b + 1) / static_cast<double>(bins);
        rec.count = count[b];
        if (count[b] > 0) {
            rec.acc = acc_sum[b] / static_cast<double>(count[b]);
            rec.conf = conf_sum[b] / static_cast<double>(count[b]);
            res.value += static_cast<double>(count[b]) / n * std::abs(rec.acc - rec.conf);
        }
        res.bins.push_back(rec);
    }
    return res;
}

double nll(const PredictionSet& p) {
    if (p.size() == 0) throw UsageError("nll: empty prediction set");
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        total -= std::log(std::max(p.probs(i, p.labels[i]), 1e-12));
    }
    return total / static_cast<double>(p.size());
}

Matrix probs_from_logits(const LogitDraws& draws, double temperature) {
    if (draws.empty()) throw UsageError("probs_from_logits: no draws");
    if (!(temperature > 0.0)) throw DomainError("temperature must be > 0");
    const std::size_t n = draws.front().rows(), k = draws.front().cols();
    Matrix probs(n, k);
    std::vector<double> scaled(k);
    for (const Matrix& d : draws) {
        require_same_shape(d, draws.front(), "probs_from_logits");
        require_finite(d, "probs_from_logits");
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < k; ++c) scaled[c] = d(i, c) / temperature;
            const auto p = softmax(scaled);
            for (std::size_t c = 0; c < k; ++c) probs(i, c) += p[c];
        }
    }
    probs *= 1.0 / static_cast<double>(draws.size());
    return probs;
}

namespace {

double nll_at(const LogitDraws& draws, const std::vector<std::size_t>& labels, double t) {
    return nll({probs_from_logits(draws, t), labels});
}

}  // namespace

TemperatureFit fit_temperature(const LogitDraws& val_draws, const std::vector<std::size_t>& labels) {
    for (const auto& d : val_draws) require_finite(d, "fit_temperature logits");
    if (val_draws.empty() || val_draws.front().rows() != labels.size()) {
        throw ShapeError("fit_temperature: logits do not match labels");
    }
    constexpr double lo0 = 0.05, hi0 = 20.0, tol = 1e-4;
    const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double lo = lo0, hi = hi0;
    double x1 = hi - inv_phi * (hi - lo), x2 = lo + inv_phi * (hi - lo);
    double f1 = nll_at(val_draws, labels, x1), f2 = nll_at(val_draws, labels, x2);
    while (hi - lo > tol) {
        if (f1 <= f2) {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = nll_at(val_draws, labels, x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = nll_at(val_draws, labels, x2);
        }
    }
    TemperatureFit fit;
    fit.val_nll_before = nll_at(val_draws, labels, 1.0);
    fit.t = 0.5 * (lo + hi);
    fit.val_nll_after = nll_at(val_draws, labels, fit.t);
    if (fit.val_nll_after > fit.val_nll_before) {
        fit.t = 1.0;
        fit.val_nll_after = fit.val_nll_before;
    }
    return fit;
}

TemperatureFit fit_temperature(const Matrix& val_logits, const std::vector<std::size_t>& labels) {
    return fit_temperature(LogitDraws{val_logits}, labels);
}

CalibrationReport calibration_report(const PredictionSet& p, std::size_t bins) {
    p.validate();
    CalibrationReport rep;
    rep.n = p.size();
    rep.acc = accuracy(p);
    EceResult e = ece(p, bins);
    rep.ece = e.value;
    rep.bins = std::move(e.bins);
    rep.nll = nll(p);
    return rep;
}

LogitDraws collect_logits(const AdaptedModel& model, const Dataset& data, int m, SeededRng& rng) {
    if (data.dim() != model.backbone.d_in()) {
        throw ShapeError("evaluate: dataset has " + std::to_string(data.dim()) +
                         " features, model expects " + std::to_string(model.backbone.d_in()));
    }
    const std::size_t draws = m == 0 ? 1 : static_cast<std::size_t>(m);
    LogitDraws out(draws, Matrix(data.size(), model.num_classes));
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto samples = logit_samples(model, data.example(i), m, rng);
        for (std::size_t s = 0; s < draws; ++s)
            std::copy(samples[s].begin(), samples[s].end(), out[s].row(i).begin());
    }
    return out;
}

CalibrationReport evaluate_draws(const LogitDraws& draws,
                                 const std::vector<std::size_t>& labels,
                                 int m,
                                 std::size_t bins,
                                 std::optional<double> temperature) {
    PredictionSet p{probs_from_logits(draws, temperature.value_or(1.0)), labels};
    CalibrationReport rep = calibration_report(p, bins);
    rep.m = m;
    rep.temperature = temperature;
    return rep;
}

CalibrationReport evaluate(const AdaptedModel& model,
                           const Dataset& data,
                           int m,
                           std::size_t bins,
                           SeededRng& rng,
                           std::optional<double> temperature) {
    return evaluate_draws(collect_logits(model, data, m, rng), data.y, m, bins, temperature);
}

}  // namespace clora
