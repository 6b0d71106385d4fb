#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "udaforge/divergences.hpp"
#include "udaforge/errors.hpp"
#include "udaforge/model.hpp"
#include "udaforge/tensor.hpp"

namespace udaforge {

enum class AlphaMode { kl, ge, fixed };
enum class DistillMode { gini_mixed, vanilla_kl };

struct CmkdConfig {
    double beta1 = 0.25;    // lambda1 ramp amplitude
    double lambda2 = 0.1;   // constant teacher regularizer weight
    double beta3 = 0.025;   // lambda3 ramp amplitude
    AlphaMode alpha_mode = AlphaMode::kl;
    double alpha_fixed = 0.5;
    DistillMode distill_mode = DistillMode::gini_mixed;
    double label_smoothing = 0.1;
    std::size_t max_iters = 2000;

    void validate() const {
        if (beta1 < 0.0 || lambda2 < 0.0 || beta3 < 0.0)
            throw ConfigError("loss weights must be non-negative");
        if (alpha_mode == AlphaMode::fixed && (alpha_fixed < 0.0 || alpha_fixed > 1.0))
            throw ConfigError("fixed alpha must be in [0,1]");
        if (label_smoothing < 0.0 || label_smoothing >= 1.0)
            throw ConfigError("label smoothing must be in [0,1)");
        if (max_iters == 0) throw ConfigError("max_iters must be positive");
    }
};

struct ScheduleState {
    std::size_t iter = 0;
    std::size_t max_iters = 1;

    double mu() const {
        return std::min(1.0, static_cast<double>(iter) / static_cast<double>(max_iters));
    }
    void advance() { ++iter; }
};

// Saturating ramp from 0 toward beta as training progresses; keeps the
// self-training terms quiet while early predictions are still noise.
inline double lambda_schedule(const ScheduleState& state, double beta) {
    const double mu = state.mu();
    return beta * (2.0 / (1.0 + std::exp(-10.0 * mu)) - 1.0);
}

struct ScalarWithGrad {
    double value = 0.0;
    std::vector<double> grad;
};

// Self-training term: Gini impurity of the student head output.
inline ScalarWithGrad task_loss(std::span<const double> p_h) {
    return {gini(p_h), gini_grad(p_h)};
}

// Mixed distribution 0.5 (p_h + sg(p_g)); downstream gradients flow only
// through the p_h component.
inline std::vector<double> mix(std::span<const double> p_h, std::span<const double> p_g) {
    if (p_h.size() != p_g.size()) throw ShapeError("mix: length mismatch");
    std::vector<double> m(p_h.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = 0.5 * (p_h[i] + p_g[i]);
    return m;
}

// Distillation term. gini_mixed trains the mixed distribution; vanilla_kl is
// the classical KL(sg(p_g) || p_h) ablation. Gradient is w.r.t. p_h; p_g is
// stop-gradient in both modes.
inline ScalarWithGrad distill_loss(std::span<const double> p_h, std::span<const double> p_g,
                                   DistillMode mode) {
    if (mode == DistillMode::gini_mixed) {
        const std::vector<double> pm = mix(p_h, p_g);
        std::vector<double> grad(pm.size());
        for (std::size_t i = 0; i < pm.size(); ++i) grad[i] = -pm[i];
        return {gini(pm), std::move(grad)};
    }
    return {kl(p_g, p_h), kl_grad_q(p_g, p_h)};
}

// Per-sample trade-off between the student and teacher perspectives; carries
// no gradient by definition.
inline double alpha(std::span<const double> p_h, std::span<const double> p_g, AlphaMode mode,
                    double fixed_value = 0.5) {
    switch (mode) {
        case AlphaMode::kl: return std::exp(-kl(p_h, p_g));
        case AlphaMode::ge: return std::exp(-gibbs_entropy(p_h));
        case AlphaMode::fixed: return fixed_value;
    }
    throw ConfigError("unknown alpha mode");
}

struct RegLoss {
    double value = 0.0;
    Tensor2 d_pg_source;  // per-row gradients, already divided by batch size
    Tensor2 d_pg_target;
};

// Teacher-drift regularizer: lambda2 KL(smoothed y || p_g^s) on the source
// batch plus lambda3 GI(p_g^t) on the target batch, batch means. Gradients
// flow through p_g into the encoder.
inline RegLoss reg_loss(std::span<const std::size_t> y_source, const Tensor2& pg_source,
                        const Tensor2& pg_target, double lambda2, double lambda3,
                        double label_smoothing) {
    if (y_source.size() != pg_source.rows())
        throw ShapeError("reg_loss: label count != source batch size");
    RegLoss out;
    out.d_pg_source = Tensor2(pg_source.rows(), pg_source.cols());
    out.d_pg_target = Tensor2(pg_target.rows(), pg_target.cols());

    if (pg_source.rows() > 0 && lambda2 != 0.0) {
        const double inv_n = 1.0 / static_cast<double>(pg_source.rows());
        double acc = 0.0;
        for (std::size_t i = 0; i < pg_source.rows(); ++i) {
            const std::vector<double> y = smoothed_onehot(y_source[i], pg_source.cols(),
                                                          label_smoothing);
            acc += kl(y, pg_source.row(i));
            const std::vector<double> g = kl_grad_q(y, pg_source.row(i));
            for (std::size_t j = 0; j < pg_source.cols(); ++j)
                out.d_pg_source(i, j) = lambda2 * inv_n * g[j];
        }
        out.value += lambda2 * inv_n * acc;
    }
    if (pg_target.rows() > 0 && lambda3 != 0.0) {
        const double inv_n = 1.0 / static_cast<double>(pg_target.rows());
        double acc = 0.0;
        for (std::size_t i = 0; i < pg_target.rows(); ++i) {
            acc += gini(pg_target.row(i));
            for (std::size_t j = 0; j < pg_target.cols(); ++j)
                out.d_pg_target(i, j) = lambda3 * inv_n * -2.0 * pg_target(i, j);
        }
        out.value += lambda3 * inv_n * acc;
    }
    return out;
}

struct CmkdTerms {
    double loss = 0.0;          // lambda1 (alpha task + (1-alpha) distill) + reg, batch means
    double task_mean = 0.0;     // unweighted mean GI(p_h^t)
    double distill_mean = 0.0;  // unweighted mean distill value
    double reg_value = 0.0;     // weighted, as in the objective
    double mean_alpha = 0.0;
    Tensor2 d_ph_target;
    Tensor2 d_pg_target;
    Tensor2 d_pg_source;
};

// Assembles the CMKD objective over one step's probability batches.
// ph_target may be a masked variant of the raw head output; gradients are
// returned w.r.t. exactly the rows passed in.
inline CmkdTerms cmkd_loss(const Tensor2& ph_target, const Tensor2& pg_target,
                           const Tensor2& pg_source, std::span<const std::size_t> y_source,
                           const CmkdConfig& cfg, const ScheduleState& state) {
    cfg.validate();
    const double lambda1 = lambda_schedule(state, cfg.beta1);
    const double lambda3 = lambda_schedule(state, cfg.beta3);

    CmkdTerms out;
    out.d_ph_target = Tensor2(ph_target.rows(), ph_target.cols());

    const std::size_t n_t = ph_target.rows();
    if (n_t > 0) {
        if (!ph_target.same_shape(pg_target)) throw ShapeError("cmkd_loss: target batch mismatch");
        const double inv_n = 1.0 / static_cast<double>(n_t);
        double acc = 0.0;
        for (std::size_t i = 0; i < n_t; ++i) {
            const auto ph = ph_target.row(i);
            const auto pg = pg_target.row(i);
            const double a = alpha(ph, pg, cfg.alpha_mode, cfg.alpha_fixed);
            const ScalarWithGrad task = task_loss(ph);
            const ScalarWithGrad dist = distill_loss(ph, pg, cfg.distill_mode);
            acc += a * task.value + (1.0 - a) * dist.value;
            for (std::size_t j = 0; j < ph.size(); ++j)
                out.d_ph_target(i, j) =
                    lambda1 * inv_n * (a * task.grad[j] + (1.0 - a) * dist.grad[j]);
            out.task_mean += inv_n * task.value;
            out.distill_mean += inv_n * dist.value;
            out.mean_alpha += inv_n * a;
        }
        out.loss += lambda1 * inv_n * acc;
    }

    const RegLoss reg = reg_loss(y_source, pg_source, pg_target, cfg.lambda2, lambda3,
                                 cfg.label_smoothing);
    out.reg_value = reg.value;
    out.loss += reg.value;
    out.d_pg_source = reg.d_pg_source;
    out.d_pg_target = reg.d_pg_target;
    return out;
}

struct StepMetrics {
    std::size_t iter = 0;
    double loss_total = 0.0;
    double loss_cls = 0.0;
    double loss_cmkd = 0.0;
    double task_mean = 0.0;
    double distill_mean = 0.0;
    double reg_value = 0.0;
    double mean_alpha = 0.0;
    double lambda1 = 0.0;
    double lambda3 = 0.0;
};

namespace detail {

inline void check_finite_term(double v, const char* term) {
    if (!std::isfinite(v)) throw NumericError(std::string(term) + " is non-finite");
}

}  // namespace detail

// Smoothed cross-entropy on the source head output; gradients divided by the
// batch size.
inline double classification_loss(const Tensor2& ph_source, std::span<const std::size_t> y_source,
                                  double label_smoothing, Tensor2& d_ph_source) {
    const std::size_t n = ph_source.rows();
    if (n == 0) throw DomainError("classification_loss: empty source batch");
    d_ph_source = Tensor2(ph_source.rows(), ph_source.cols());
    const double inv_n = 1.0 / static_cast<double>(n);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        acc += cross_entropy_smoothed(y_source[i], ph_source.row(i), label_smoothing);
        const std::vector<double> g =
            cross_entropy_smoothed_grad(y_source[i], ph_source.row(i), label_smoothing);
        for (std::size_t j = 0; j < ph_source.cols(); ++j) d_ph_source(i, j) = inv_n * g[j];
    }
    return inv_n * acc;
}

// One full UDA training step: L_total = L_cls + L_cmkd, backward through both
// batches, one optimizer step, schedule advance.
inline StepMetrics total_loss_step(const Tensor2& x_source, std::span<const std::size_t> y_source,
                                   const Tensor2& x_target, StudentModel& model,
                                   const Teacher& teacher, SgdOptimizer& opt,
                                   const CmkdConfig& cfg, ScheduleState& state) {
    const ForwardTrace trace_s = forward(model, teacher, x_source);
    Tensor2 d_ph_source;
    const double l_cls = classification_loss(trace_s.p_h, y_source, cfg.label_smoothing,
                                             d_ph_source);
    detail::check_finite_term(l_cls, "L_cls");

    ForwardTrace trace_t;
    const bool has_target = x_target.rows() > 0;
    if (has_target) trace_t = forward(model, teacher, x_target);

    const CmkdTerms terms =
        cmkd_loss(trace_t.p_h, trace_t.p_g, trace_s.p_g, y_source, cfg, state);
    detail::check_finite_term(terms.task_mean, "L_task");
    detail::check_finite_term(terms.distill_mean, "L_distill");
    detail::check_finite_term(terms.reg_value, "L_reg");

    Gradients grads = backward(model, teacher, trace_s, d_ph_source, terms.d_pg_source);
    if (has_target) {
        const Gradients gt = backward(model, teacher, trace_t, terms.d_ph_target,
                                      terms.d_pg_target);
        accumulate(grads, gt);
    }
    opt.step(model, grads);

    StepMetrics m;
    m.iter = state.iter;
    m.loss_cls = l_cls;
    m.loss_cmkd = terms.loss;
    m.loss_total = l_cls + terms.loss;
    m.task_mean = terms.task_mean;
    m.distill_mean = terms.distill_mean;
    m.reg_value = terms.reg_value;
    m.mean_alpha = terms.mean_alpha;
    m.lambda1 = lambda_schedule(state, cfg.beta1);
    m.lambda3 = lambda_schedule(state, cfg.beta3);
    detail::check_finite_term(m.loss_total, "L_total");
    state.advance();
    return m;
}

}  // namespace udaforge
