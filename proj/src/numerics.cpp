// SPDX-License-Identifier: Apache-2.0
#include "clora/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace clora {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        std::ostringstream os;
        os << "matrix data length " << data_.size() << " does not match " << rows_ << "x" << cols_;
        throw ShapeError(os.str());
    }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) throw ShapeError("ragged initializer list for Matrix");
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::column(std::span<const double> values) {
    return Matrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Matrix& Matrix::operator+=(const Matrix& other) {
    require_same_shape(*this, other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Matrix& Matrix::operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
}

std::string Matrix::shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
}

void require_same_shape(const Matrix& a, const Matrix& b, std::string_view op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
    }
}

bool all_finite(const Matrix& m) noexcept {
    return std::all_of(m.values().begin(), m.values().end(),
                       [](double v) { return std::isfinite(v); });
}

void require_finite(const Matrix& m, std::string_view where) {
    if (!all_finite(m)) throw NumericError("non-finite value in " + std::string(where));
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: cannot multiply " + a.shape_str() + " by " + b.shape_str());
    }
    Matrix out(a.rows(), b.cols());
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a(i, p);
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < m; ++j) out(i, j) += av * b(p, j);
        }
    }
    return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_tn: cannot multiply transpose of " + a.shape_str() + " by " +
                         b.shape_str());
    }
    Matrix out(a.cols(), b.cols());
    for (std::size_t p = 0; p < a.rows(); ++p) {
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double av = a(p, i);
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += av * b(p, j);
        }
    }
    return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: cannot multiply " + a.shape_str() + " by transpose of " +
                         b.shape_str());
    }
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.rows(); ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < a.cols(); ++p) acc += a(i, p) * b(j, p);
            out(i, j) = acc;
        }
    }
    return out;
}

Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

MatmulGrads matmul_backward(const Matrix& a, const Matrix& b, const Matrix& g) {
    if (g.rows() != a.rows() || g.cols() != b.cols()) {
        throw ShapeError("matmul_backward: upstream " + g.shape_str() + " does not match product of " +
                         a.shape_str() + " and " + b.shape_str());
    }
    return {matmul_nt(g, b), matmul_tn(a, g)};
}

namespace {

template <typename F>
Matrix zip(const Matrix& a, const Matrix& b, std::string_view op, F f) {
    require_same_shape(a, b, op);
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
}

template <typename F>
Matrix map(const Matrix& a, F f) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
    return out;
}

}  // namespace

Matrix add(const Matrix& a, const Matrix& b) {
    return zip(a, b, "add", [](double x, double y) { return x + y; });
}
Matrix sub(const Matrix& a, const Matrix& b) {
    return zip(a, b, "sub", [](double x, double y) { return x - y; });
}
Matrix hadamard(const Matrix& a, const Matrix& b) {
    return zip(a, b, "hadamard", [](double x, double y) { return x * y; });
}
Matrix scale(const Matrix& a, double s) {
    return map(a, [s](double x) { return x * s; });
}

Matrix relu(const Matrix& a) {
    return map(a, [](double x) { return x > 0.0 ? x : 0.0; });
}

Matrix relu_backward(const Matrix& pre, const Matrix& g) {
    return zip(pre, g, "relu_backward", [](double p, double gv) { return p > 0.0 ? gv : 0.0; });
}

double sigmoid(double v) noexcept {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

Matrix sigmoid(const Matrix& a) {
    return map(a, [](double x) { return sigmoid(x); });
}

Matrix sigmoid_backward(const Matrix& out, const Matrix& g) {
    return zip(out, g, "sigmoid_backward", [](double s, double gv) { return gv * s * (1.0 - s); });
}

MatmulGrads hadamard_backward(const Matrix& a, const Matrix& b, const Matrix& g) {
    require_same_shape(a, b, "hadamard_backward");
    require_same_shape(a, g, "hadamard_backward");
    return {hadamard(g, b), hadamard(g, a)};
}

double sum(const Matrix& a) noexcept {
    double s = 0.0;
    for (double v : a.values()) s += v;
    return s;
}

double frobenius_sq(const Matrix& a) noexcept {
    double s = 0.0;
    for (double v : a.values()) s += v * v;
    return s;
}

std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> out(logits.size());
    if (logits.empty()) return out;
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k) {
        out[k] = std::exp(logits[k] - mx);
        z += out[k];
    }
    for (double& v : out) v /= z;
    return out;
}

Matrix softmax_rows(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const auto p = softmax(logits.row(i));
        std::copy(p.begin(), p.end(), out.row(i).begin());
    }
    return out;
}

NllResult log_softmax_nll(const Matrix& logits, std::span<const std::size_t> labels) {
    if (labels.size() != logits.rows()) {
        throw ShapeError("log_softmax_nll: " + std::to_string(labels.size()) + " labels for " +
                         logits.shape_str() + " logits");
    }
    const std::size_t n = logits.rows(), k = logits.cols();
    NllResult res{0.0, Matrix(n, k)};
    if (n == 0) return res;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= k) {
            throw IndexError("log_softmax_nll: label " + std::to_string(labels[i]) + " at row " +
                             std::to_string(i) + " outside [0, " + std::to_string(k) + ")");
        }
        const auto row = logits.row(i);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) z += std::exp(v - mx);
        const double log_z = mx + std::log(z);
        res.loss += log_z - row[labels[i]];
        for (std::size_t c = 0; c < k; ++c) {
            res.grad(i, c) = std::exp(row[c] - log_z) / static_cast<double>(n);
        }
        res.grad(i, labels[i]) -= 1.0 / static_cast<double>(n);
    }
    res.loss /= static_cast<double>(n);
    return res;
}

std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

SeededRng::SeededRng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

SeededRng SeededRng::split(std::string_view label) const {
    // FNV-1a over the label, then mixed with the parent seed.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : label) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return SeededRng(splitmix64(seed_ ^ splitmix64(h)));
}

SeededRng SeededRng::split(std::uint64_t index) const {
    return SeededRng(splitmix64(seed_ + 0x632be59bd9b4e019ULL * (index + 1)));
}

std::uint64_t SeededRng::next_u64() { return engine_(); }

double SeededRng::uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double SeededRng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

std::size_t SeededRng::index(std::size_t n) {
    if (n == 0) throw UsageError("SeededRng::index: empty range");
    // Rejection sampling keeps the draw unbiased.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v;
    do {
        v = engine_();
    } while (v >= limit);
    return static_cast<std::size_t>(v % n);
}

double SeededRng::sign() { return (engine_() >> 63) ? 1.0 : -1.0; }

Matrix sample_standard_normal(SeededRng& rng, std::size_t rows, std::size_t cols) {
    Matrix out(rows, cols);
    for (double& v : out.values()) v = rng.normal();
    return out;
}

GradCheckReport check_gradients(const std::function<double()>& loss_fn,
                                std::span<const GradParam> params,
                                double h,
                                double tol,
                                double floor) {
    if (!(h > 0.0 && h <= 1e-3)) throw DomainError("check_gradients: step h must be in (0, 1e-3]");
    GradCheckReport report;
    const double base = loss_fn();
    if (!std::isfinite(base)) throw NumericError("check_gradients: loss is not finite");
    for (const auto& p : params) {
        require_same_shape(*p.value, *p.grad, "check_gradients(" + p.name + ")");
        for (std::size_t i = 0; i < p.value->size(); ++i) {
            double& x = (*p.value)[i];
            const double saved = x;
            x = saved + h;
            const double up = loss_fn();
            x = saved - h;
            const double down = loss_fn();
            x = saved;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                throw NumericError("check_gradients: loss not finite while perturbing " + p.name);
            }
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = (*p.grad)[i];
            const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
            const double rel = std::abs(analytic - numeric) / denom;
            ++report.entries_checked;
            if (rel > report.max_rel_error || report.worst_param.empty()) {
                if (rel >= report.max_rel_error) {
                    report.max_rel_error = rel;
                    report.worst_param = p.name;
                    report.worst_index = i;
                    report.worst_analytic = analytic;
                    report.worst_numeric = numeric;
                }
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    return report;
}

}  // namespace clora
