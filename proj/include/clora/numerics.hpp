// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 matrices with hand-written backward rules, a seeded
// splittable RNG, and a central-difference gradient checker.
//
// There is no autodiff tape. Composite losses call the *_backward helpers
// below explicitly, and every such composition is audited with
// check_gradients in the test suite.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "clora/errors.hpp"

namespace clora {

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix zeros(std::size_t rows, std::size_t cols) { return Matrix(rows, cols); }
    static Matrix identity(std::size_t n);
    static Matrix column(std::span<const double> values);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }

    void fill(double v);
    // In-place accumulate; shapes must match.
    Matrix& operator+=(const Matrix& other);
    Matrix& operator*=(double s);

    bool same_shape(const Matrix& other) const noexcept {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }
    std::string shape_str() const;

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

void require_same_shape(const Matrix& a, const Matrix& b, std::string_view op);
// Throws NumericError naming `where` on the first NaN/Inf.
void require_finite(const Matrix& m, std::string_view where);
bool all_finite(const Matrix& m) noexcept;

// --- products -------------------------------------------------------------

Matrix matmul(const Matrix& a, const Matrix& b);
// aᵀ·b and a·bᵀ without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

struct MatmulGrads {
    Matrix da;
    Matrix db;
};
// Upstream g = ∂L/∂(a·b)  =>  ∂L/∂a = g·bᵀ, ∂L/∂b = aᵀ·g.
MatmulGrads matmul_backward(const Matrix& a, const Matrix& b, const Matrix& g);

// --- elementwise ----------------------------------------------------------

Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);

Matrix relu(const Matrix& a);
// Gradient w.r.t. the relu input given its input `pre` and upstream g.
Matrix relu_backward(const Matrix& pre, const Matrix& g);

double sigmoid(double v) noexcept;
Matrix sigmoid(const Matrix& a);
// Gradient w.r.t. the sigmoid input given its output and upstream g.
Matrix sigmoid_backward(const Matrix& out, const Matrix& g);

// Hadamard backward is symmetric: ∂L/∂a = g⊙b, ∂L/∂b = g⊙a.
MatmulGrads hadamard_backward(const Matrix& a, const Matrix& b, const Matrix& g);

double sum(const Matrix& a) noexcept;
double frobenius_sq(const Matrix& a) noexcept;

// --- softmax / likelihood -------------------------------------------------

// Row-wise softmax of an N×K matrix.
Matrix softmax_rows(const Matrix& logits);
std::vector<double> softmax(std::span<const double> logits);

struct NllResult {
    double loss = 0.0;  // mean over rows
    Matrix grad;        // ∂loss/∂logits = (softmax − onehot)/N
};
NllResult log_softmax_nll(const Matrix& logits, std::span<const std::size_t> labels);

// --- randomness -----------------------------------------------------------

// std::mt19937_64 engine (its output sequence is fixed by the standard),
// streams split by SplitMix64-mixing (seed, label), and normals drawn by an
// in-house Box-Muller transform, since std::normal_distribution is
// implementation-defined.
class SeededRng {
public:
    static constexpr std::string_view kAlgorithm = "mt19937_64/splitmix64-split/box-muller";

    explicit SeededRng(std::uint64_t seed);

    std::uint64_t seed() const noexcept { return seed_; }
    SeededRng split(std::string_view label) const;
    SeededRng split(std::uint64_t index) const;

    std::uint64_t next_u64();
    // Uniform on [0, 1) with 53 random bits.
    double uniform();
    double normal();
    // Uniform integer in [0, n).
    std::size_t index(std::size_t n);
    // +1 or −1 with equal probability.
    double sign();

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x) noexcept;

Matrix sample_standard_normal(SeededRng& rng, std::size_t rows, std::size_t cols);

// --- gradient checking ----------------------------------------------------

struct GradParam {
    std::string name;
    Matrix* value;         // perturbed in place, restored afterwards
    const Matrix* grad;    // analytic gradient under test
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t entries_checked = 0;
    bool passed = false;
};

// Central differences entry by entry. Relative error is
// |a − n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from
// dividing roundoff by roundoff.
GradCheckReport check_gradients(const std::function<double()>& loss_fn,
                                std::span<const GradParam> params,
                                double h = 1e-5,
                                double tol = 1e-4,
                                double floor = 1e-6);

}  // namespace clora
