#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "udaforge/errors.hpp"

namespace udaforge {

// Floor inside every logarithm. Softmax outputs are strictly positive, but
// class masking can produce exact zeros, so log arguments are clamped.
inline constexpr double kLogFloor = 1e-12;

// Probability vector over c classes. Entries are non-negative and sum to 1
// within 1e-9; construction validates both.
class ProbDist {
public:
    ProbDist() = default;
    explicit ProbDist(std::vector<double> p) : p_(std::move(p)) {
        double sum = 0.0;
        for (double v : p_) {
            if (!(v >= 0.0)) throw DomainError("ProbDist: negative or NaN entry");
            sum += v;
        }
        if (std::abs(sum - 1.0) > 1e-9)
            throw DomainError("ProbDist: entries sum to " + std::to_string(sum));
    }

    std::size_t size() const { return p_.size(); }
    double operator[](std::size_t i) const { return p_[i]; }
    const std::vector<double>& values() const { return p_; }
    operator std::span<const double>() const { return {p_.data(), p_.size()}; }

private:
    std::vector<double> p_;
};

// Gini impurity 1 - sum p_i^2, in [0, 1 - 1/c].
inline double gini(std::span<const double> p) {
    double sq = 0.0;
    for (double v : p) sq += v * v;
    return 1.0 - sq;
}

// d gini / d p_i = -2 p_i.
inline std::vector<double> gini_grad(std::span<const double> p) {
    std::vector<double> g(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) g[i] = -2.0 * p[i];
    return g;
}

// -sum p_i ln p_i with 0 ln 0 := 0.
inline double gibbs_entropy(std::span<const double> p) {
    double h = 0.0;
    for (double v : p)
        if (v > 0.0) h -= v * std::log(v);
    return h;
}

// KL(p || q) = sum p_i ln(p_i / q_i). Entries with p_i = 0 contribute 0
// regardless of q_i.
inline double kl(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size())
        throw ShapeError("kl: length " + std::to_string(p.size()) + " vs " + std::to_string(q.size()));
    double d = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) d += p[i] * (std::log(std::max(p[i], kLogFloor)) -
                                     std::log(std::max(q[i], kLogFloor)));
    }
    return d;
}

// d KL(p || q) / d q_i = -p_i / q_i (the teacher-as-target building block).
inline std::vector<double> kl_grad_q(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw ShapeError("kl_grad_q: length mismatch");
    std::vector<double> g(p.size());
    for (std::size_t i = 0; i < p.size(); ++i)
        g[i] = p[i] > 0.0 ? -p[i] / std::max(q[i], kLogFloor) : 0.0;
    return g;
}

inline std::vector<double> smoothed_onehot(std::size_t label, std::size_t classes, double eps) {
    if (label >= classes) throw IndexError("label " + std::to_string(label) + " out of range");
    std::vector<double> y(classes, eps / static_cast<double>(classes));
    y[label] += 1.0 - eps;
    return y;
}

// Cross-entropy against the eps-smoothed one-hot target.
inline double cross_entropy_smoothed(std::size_t label, std::span<const double> p, double eps) {
    if (label >= p.size()) throw IndexError("label " + std::to_string(label) + " out of range");
    if (eps < 0.0 || eps >= 1.0) throw DomainError("label smoothing must be in [0,1)");
    const std::vector<double> y = smoothed_onehot(label, p.size(), eps);
    double loss = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (y[i] > 0.0) loss -= y[i] * std::log(std::max(p[i], kLogFloor));
    return loss;
}

// d CE / d p_i = -y_i / p_i.
inline std::vector<double> cross_entropy_smoothed_grad(std::size_t label, std::span<const double> p,
                                                       double eps) {
    if (label >= p.size()) throw IndexError("label " + std::to_string(label) + " out of range");
    const std::vector<double> y = smoothed_onehot(label, p.size(), eps);
    std::vector<double> g(p.size());
    for (std::size_t i = 0; i < p.size(); ++i)
        g[i] = y[i] > 0.0 ? -y[i] / std::max(p[i], kLogFloor) : 0.0;
    return g;
}

}  // namespace udaforge
