#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "udaforge/errors.hpp"
#include "udaforge/rng.hpp"

namespace udaforge {

// Dense row-major matrix of f64. Rank 2 is all the training core needs;
// vectors are plain std::vector<double>.
class Tensor2 {
public:
    Tensor2() = default;
    Tensor2(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}
    Tensor2(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError("Tensor2 data length " + std::to_string(data_.size()) +
                             " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
        }
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool same_shape(const Tensor2& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    friend bool operator==(const Tensor2& a, const Tensor2& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// Standard product with a fixed left-to-right accumulation order, so results
// are bitwise reproducible.
inline Tensor2 matmul(const Tensor2& a, const Tensor2& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    }
    Tensor2 out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
        }
    }
    return out;
}

inline Tensor2 transpose(const Tensor2& a) {
    Tensor2 out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

inline double dot(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size())
        throw ShapeError("dot: length " + std::to_string(u.size()) + " vs " + std::to_string(v.size()));
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) acc += u[i] * v[i];
    return acc;
}

inline double norm(std::span<const double> u) {
    return std::sqrt(dot(u, u));
}

inline double cosine(std::span<const double> u, std::span<const double> v) {
    const double nu = norm(u);
    const double nv = norm(v);
    if (nu == 0.0 || nv == 0.0) throw DomainError("cosine: zero-norm input");
    double c = dot(u, v) / (nu * nv);
    if (c > 1.0) c = 1.0;
    if (c < -1.0) c = -1.0;
    return c;
}

// Max-subtracted softmax; output sums to 1 within 1e-12 for finite input.
// Non-finite logits signal a diverged model, which is a numeric abort rather
// than a caller mistake.
inline std::vector<double> softmax(std::span<const double> logits) {
    if (logits.empty()) throw DomainError("softmax: empty input");
    double mx = logits[0];
    for (double v : logits) {
        if (!std::isfinite(v)) throw NumericError("softmax: non-finite logit");
        if (v > mx) mx = v;
    }
    std::vector<double> out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return out;
}

// n x d matrix of mean + std * N(0,1), row by row. std = 0 copies the mean.
inline Tensor2 gaussian(Rng& rng, std::size_t n, std::size_t d, std::span<const double> mean,
                        double std_dev) {
    if (mean.size() != d)
        throw ShapeError("gaussian: mean length " + std::to_string(mean.size()) +
                         " != d " + std::to_string(d));
    if (std_dev < 0.0) throw DomainError("gaussian: negative std");
    Tensor2 out(n, d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
            out(i, j) = mean[j] + (std_dev == 0.0 ? 0.0 : std_dev * rng.next_gaussian());
    return out;
}

}  // namespace udaforge
