// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "clora/dataset.hpp"
#include "clora/model.hpp"
#include "clora/numerics.hpp"

namespace clora {

struct PredictionSet {
    Matrix probs;  // N × K, rows sum to 1
    std::vector<std::size_t> labels;

    std::size_t size() const noexcept { return labels.size(); }
    void validate() const;
};

struct BinRecord {
    double lo = 0.0;
    double hi = 0.0;
    std::size_t count = 0;
    double acc = 0.0;   // 0 for an empty bin
    double conf = 0.0;  // 0 for an empty bin
};

struct EceResult {
    double value = 0.0;
    std::vector<BinRecord> bins;
};

// argmax with ties going to the lowest class index.
std::size_t argmax(std::span<const double> row);

double accuracy(const PredictionSet& p);
// Equal-width bins on [0, 1], right-inclusive; confidence = max probability.
EceResult ece(const PredictionSet& p, std::size_t bins);
// Mean −log p(true label), with probabilities clamped below at 1e-12.
double nll(const PredictionSet& p);

// Logits of S posterior draws, each N × K. A single entry is a point
// prediction (posterior mean or a deterministic model).
using LogitDraws = std::vector<Matrix>;

// Mean over draws of softmax(logits / T).
Matrix probs_from_logits(const LogitDraws& draws, double temperature = 1.0);

struct TemperatureFit {
    double t = 1.0;
    double val_nll_before = 0.0;
    double val_nll_after = 0.0;
};

// Golden-section search for T in [0.05, 20] minimizing validation NLL.
TemperatureFit fit_temperature(const LogitDraws& val_draws, const std::vector<std::size_t>& labels);
TemperatureFit fit_temperature(const Matrix& val_logits, const std::vector<std::size_t>& labels);

struct CalibrationReport {
    double acc = 0.0;
    double ece = 0.0;
    double nll = 0.0;
    std::vector<BinRecord> bins;
    std::size_t n = 0;
    int m = 0;
    std::optional<double> temperature;
};

CalibrationReport calibration_report(const PredictionSet& p, std::size_t bins);

// Draws logit samples for every row of `data` (m = 0 uses the mean pass).
LogitDraws collect_logits(const AdaptedModel& model, const Dataset& data, int m, SeededRng& rng);

CalibrationReport evaluate_draws(const LogitDraws& draws,
                                 const std::vector<std::size_t>& labels,
                                 int m,
                                 std::size_t bins,
                                 std::optional<double> temperature = std::nullopt);

CalibrationReport evaluate(const AdaptedModel& model,
                           const Dataset& data,
                           int m,
                           std::size_t bins,
                           SeededRng& rng,
                           std::optional<double> temperature = std::nullopt);

}  // namespace clora
