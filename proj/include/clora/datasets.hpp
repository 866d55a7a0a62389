// SPDX-License-Identifier: Apache-2.0
//
// Synthetic few-shot tasks. Every generator draws a 2-D latent point u,
// labels it, and embeds it into d_in features through a fixed random linear
// map, so Bayes-optimal accuracy can be computed from u alone.
//
//   hetero-xor  u ~ U[-1,1]², label = [u1·u2 > 0], flipped with probability
//               rho_hi where u1 > 0 and rho_lo elsewhere
//   clusters    K isotropic Gaussian blobs on the unit circle, std = overlap
//
// The backbone's source task is 4-way quadrant classification of a rotated
// u on [-1.5, 1.5]², noiseless. Shifted test sets transform u by a rotation
// and translation before labelling.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "clora/dataset.hpp"
#include "clora/numerics.hpp"

namespace clora {

struct ShiftSpec {
    double rotation_deg = 0.0;
    std::array<double, 2> translation{0.0, 0.0};
};

struct DatasetSpec {
    std::string generator = "hetero-xor";
    std::size_t n_train = 512;  // before the 80/20 train/validation split
    std::size_t n_test = 1000;
    std::size_t n_source = 3000;
    std::size_t num_classes = 2;  // clusters only; hetero-xor is binary
    double rho_lo = 0.05;
    double rho_hi = 0.3;
    double overlap = 0.35;
    std::size_t d_in = 16;
    double source_rotation_deg = 30.0;
    ShiftSpec small_shift{10.0, {0.2, 0.2}};
    ShiftSpec large_shift{35.0, {0.6, -0.5}};
    std::uint64_t seed = 0;

    void validate() const;
};

struct DatasetBundle {
    DatasetSpec spec;
    Dataset source;
    Dataset train;
    Dataset val;
    Dataset test;
    Dataset shift_small;
    Dataset shift_large;
    Matrix projection;  // d_in × 2
    // Bayes-optimal accuracy of the test set and of each shifted set.
    double bayes_accuracy = 0.0;
    double bayes_accuracy_small = 0.0;
    double bayes_accuracy_large = 0.0;

    // Label-flip probability at latent point (u1, u2); 0 for clusters.
    double noise_rate(double u1, double u2) const;

    // Named evaluation sets in a fixed order: test, shift_small, shift_large.
    std::vector<std::pair<std::string, const Dataset*>> eval_sets() const;
};

DatasetBundle generate_dataset(const DatasetSpec& spec);

// Closed form for hetero-xor on the unshifted square: 1 − (rho_lo + rho_hi)/2.
double hetero_xor_bayes_accuracy(double rho_lo, double rho_hi);

// FNV-1a over the serialized bundle (features, labels, split sizes).
std::string bundle_hash(const DatasetBundle& bundle);

}  // namespace clora
