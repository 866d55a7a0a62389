// SPDX-License-Identifier: Apache-2.0
#include "clora/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numbers>
#include <numeric>

namespace clora {

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
    Dataset out;
    out.num_classes = num_classes;
    out.x = Matrix(indices.size(), x.cols());
    out.y.reserve(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto src = x.row(indices[i]);
        std::copy(src.begin(), src.end(), out.x.row(i).begin());
        out.y.push_back(y[indices[i]]);
    }
    return out;
}

void DatasetSpec::validate() const {
    if (generator != "hetero-xor" && generator != "clusters") {
        throw UsageError("unknown dataset generator '" + generator + "'");
    }
    if (!(rho_lo >= 0.0 && rho_lo < 0.5) || !(rho_hi >= 0.0 && rho_hi < 0.5)) {
        throw DomainError("label noise rates must lie in [0, 0.5)");
    }
    if (n_train < 5) throw UsageError("n_train must be >= 5 to leave a validation split");
    if (n_test == 0 || n_source == 0) throw UsageError("n_test and n_source must be > 0");
    if (d_in < 2) throw UsageError("d_in must be >= 2");
    if (generator == "clusters") {
        if (num_classes < 2) throw UsageError("clusters needs at least 2 classes");
        if (!(overlap > 0.0)) throw DomainError("clusters overlap must be > 0");
    }
}

namespace {

using Point = std::array<double, 2>;

Point transform(const Point& u, const ShiftSpec& s) {
    const double a = s.rotation_deg * std::numbers::pi / 180.0;
    const double c = std::cos(a), sn = std::sin(a);
    return {c * u[0] - sn * u[1] + s.translation[0], sn * u[0] + c * u[1] + s.translation[1]};
}

double xor_noise(const DatasetSpec& spec, const Point& u) { return u[0] > 0.0 ? spec.rho_hi : spec.rho_lo; }

std::size_t xor_label(const Point& u) { return u[0] * u[1] > 0.0 ? 1 : 0; }

Point cluster_mean(std::size_t k, std::size_t num_classes) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(num_classes);
    return {std::cos(a), std::sin(a)};
}

Dataset embed(const std::vector<Point>& latent,
              const std::vector<std::size_t>& labels,
              const Matrix& projection,
              std::size_t num_classes) {
    Dataset d;
    d.num_classes = num_classes;
    d.y = labels;
    d.x = Matrix(latent.size(), projection.rows());
    for (std::size_t i = 0; i < latent.size(); ++i)
        for (std::size_t f = 0; f < projection.rows(); ++f)
            d.x(i, f) = projection(f, 0) * latent[i][0] + projection(f, 1) * latent[i][1];
    return d;
}

// Draws n labelled latent points, optionally shifted before labelling.
void draw_target(const DatasetSpec& spec,
                 std::size_t n,
                 const ShiftSpec* shift,
                 SeededRng& rng,
                 std::vector<Point>& latent,
                 std::vector<std::size_t>& labels) {
    latent.clear();
    labels.clear();
    for (std::size_t i = 0; i < n; ++i) {
        if (spec.generator == "hetero-xor") {
            Point u{2.0 * rng.uniform() - 1.0, 2.0 * rng.uniform() - 1.0};
            if (shift) u = transform(u, *shift);
            std::size_t y = xor_label(u);
            if (rng.uniform() < xor_noise(spec, u)) y = 1 - y;
            latent.push_back(u);
            labels.push_back(y);
        } else {
            const std::size_t k = rng.index(spec.num_classes);
            const Point m = cluster_mean(k, spec.num_classes);
            Point u{m[0] + spec.overlap * rng.normal(), m[1] + spec.overlap * rng.normal()};
            if (shift) u = transform(u, *shift);
            latent.push_back(u);
            labels.push_back(k);
        }
    }
}

// Midpoint rule over the unit square's image: 1 − E[ρ(T(u))].
double xor_bayes_quadrature(const DatasetSpec& spec, const ShiftSpec& shift) {
    constexpr std::size_t n = 1000;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const Point u{-1.0 + (2.0 * i + 1.0) / n, -1.0 + (2.0 * j + 1.0) / n};
            acc += 1.0 - xor_noise(spec, transform(u, shift));
        }
    }
    return acc / static_cast<double>(n * n);
}

// ∫ max_k π_k N(u; μ_k, σ²I) du on a grid wide enough to hold all mass.
double clusters_bayes_quadrature(const DatasetSpec& spec) {
    constexpr std::size_t n = 800;
    const double half = 1.0 + 7.0 * spec.overlap;
    const double h = 2.0 * half / n;
    const double var = spec.overlap * spec.overlap;
    const double norm = 1.0 / (2.0 * std::numbers::pi * var * static_cast<double>(spec.num_classes));
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double x = -half + (i + 0.5) * h, y = -half + (j + 0.5) * h;
            double best = 0.0;
            for (std::size_t k = 0; k < spec.num_classes; ++k) {
                const Point m = cluster_mean(k, spec.num_classes);
                const double d2 = (x - m[0]) * (x - m[0]) + (y - m[1]) * (y - m[1]);
                best = std::max(best, std::exp(-d2 / (2.0 * var)));
            }
            acc += best * norm * h * h;
        }
    }
    return std::min(acc, 1.0);
}

}  // namespace

double hetero_xor_bayes_accuracy(double rho_lo, double rho_hi) { return 1.0 - 0.5 * (rho_lo + rho_hi); }

double DatasetBundle::noise_rate(double u1, double u2) const {
    if (spec.generator != "hetero-xor") return 0.0;
    return xor_noise(spec, {u1, u2});
}

std::vector<std::pair<std::string, const Dataset*>> DatasetBundle::eval_sets() const {
    return {{"test", &test}, {"shift_small", &shift_small}, {"shift_large", &shift_large}};
}

DatasetBundle generate_dataset(const DatasetSpec& spec) {
    spec.validate();
    DatasetBundle b;
    b.spec = spec;
    const SeededRng root(spec.seed);
    const std::size_t k = spec.generator == "hetero-xor" ? 2 : spec.num_classes;

    SeededRng proj_rng = root.split("projection");
    b.projection = sample_standard_normal(proj_rng, spec.d_in, 2);

    // Source task: quadrant of the rotated latent point.
    {
        SeededRng rng = root.split("source");
        const ShiftSpec rot{spec.source_rotation_deg, {0.0, 0.0}};
        std::vector<Point> latent;
        std::vector<std::size_t> labels;
        for (std::size_t i = 0; i < spec.n_source; ++i) {
            const Point u{3.0 * rng.uniform() - 1.5, 3.0 * rng.uniform() - 1.5};
            const Point v = transform(u, rot);
            labels.push_back((v[0] > 0.0 ? 1 : 0) + (v[1] > 0.0 ? 2 : 0));
            latent.push_back(u);
        }
        b.source = embed(latent, labels, b.projection, 4);
    }

    std::vector<Point> latent;
    std::vector<std::size_t> labels;
    {
        SeededRng rng = root.split("train");
        draw_target(spec, spec.n_train, nullptr, rng, latent, labels);
        const Dataset all = embed(latent, labels, b.projection, k);
        std::vector<std::size_t> idx(spec.n_train);
        std::iota(idx.begin(), idx.end(), 0);
        SeededRng split_rng = root.split("split");
        for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[split_rng.index(i)]);
        const std::size_t n_fit = (spec.n_train * 4) / 5;
        b.train = all.subset({idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_fit)});
        b.val = all.subset({idx.begin() + static_cast<std::ptrdiff_t>(n_fit), idx.end()});
    }
    {
        SeededRng rng = root.split("test");
        draw_target(spec, spec.n_test, nullptr, rng, latent, labels);
        b.test = embed(latent, labels, b.projection, k);
    }
    {
        SeededRng rng = root.split("shift_small");
        draw_target(spec, spec.n_test, &spec.small_shift, rng, latent, labels);
        b.shift_small = embed(latent, labels, b.projection, k);
    }
    {
        SeededRng rng = root.split("shift_large");
        draw_target(spec, spec.n_test, &spec.large_shift, rng, latent, labels);
        b.shift_large = embed(latent, labels, b.projection, k);
    }

    if (spec.generator == "hetero-xor") {
        b.bayes_accuracy = hetero_xor_bayes_accuracy(spec.rho_lo, spec.rho_hi);
        b.bayes_accuracy_small = xor_bayes_quadrature(spec, spec.small_shift);
        b.bayes_accuracy_large = xor_bayes_quadrature(spec, spec.large_shift);
    } else {
        // Shifts are invertible and leave labels alone, so the optimum is unchanged.
        b.bayes_accuracy = clusters_bayes_quadrature(spec);
        b.bayes_accuracy_small = b.bayes_accuracy;
        b.bayes_accuracy_large = b.bayes_accuracy;
    }
    return b;
}

std::string bundle_hash(const DatasetBundle& bundle) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const void* data, std::size_t len) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < len; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    auto feed_set = [&](const Dataset& d) {
        const std::uint64_t n = d.size(), f = d.dim();
        feed(&n, sizeof n);
        feed(&f, sizeof f);
        feed(d.x.values().data(), d.x.size() * sizeof(double));
        for (std::size_t y : d.y) {
            const std::uint64_t v = y;
            feed(&v, sizeof v);
        }
    };
    feed_set(bundle.source);
    feed_set(bundle.train);
    feed_set(bundle.val);
    feed_set(bundle.test);
    feed_set(bundle.shift_small);
    feed_set(bundle.shift_large);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace clora
