#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "udaforge/divergences.hpp"
#include "udaforge/errors.hpp"
#include "udaforge/rng.hpp"

namespace udaforge {

// ---------------------------------------------------------------------------
// FixMatch consistency add-on. Augmentations are the desk-scale analog of the
// image pipelines: weak adds isotropic noise, strong drops coordinates and
// then adds stronger noise.

struct FixMatchConfig {
    double lambda_fm = 0.5;
    double tau_fm = 0.95;
    double weak_noise = 0.1;
    double strong_noise = 0.5;
    double strong_dropout = 0.2;

    void validate() const {
        if (!(tau_fm > 0.0 && tau_fm < 1.0)) throw ConfigError("tau_fm must be in (0,1)");
        if (weak_noise < 0.0 || strong_noise < weak_noise)
            throw ConfigError("need strong_noise >= weak_noise >= 0");
        if (strong_dropout < 0.0 || strong_dropout > 1.0)
            throw ConfigError("dropout rate must be in [0,1]");
        if (lambda_fm < 0.0) throw ConfigError("lambda_fm must be non-negative");
    }
};

// Published weight/gate pairs for the harder benchmarks; "default" covers
// everything else.
inline FixMatchConfig fixmatch_preset(const std::string& name) {
    FixMatchConfig cfg;
    if (name == "default") {
        cfg.lambda_fm = 0.5;
        cfg.tau_fm = 0.95;
    } else if (name == "visda") {
        cfg.lambda_fm = 2.0;
        cfg.tau_fm = 0.80;
    } else if (name == "domainnet") {
        cfg.lambda_fm = 0.1;
        cfg.tau_fm = 0.95;
    } else {
        throw ConfigError("unknown fixmatch preset '" + name + "'");
    }
    return cfg;
}

inline std::vector<double> augment_weak(std::span<const double> x, Rng& rng,
                                        const FixMatchConfig& cfg) {
    std::vector<double> out(x.begin(), x.end());
    if (cfg.weak_noise > 0.0)
        for (double& v : out) v += cfg.weak_noise * rng.next_gaussian();
    return out;
}

// Dropout first, then noise.
inline std::vector<double> augment_strong(std::span<const double> x, Rng& rng,
                                          const FixMatchConfig& cfg) {
    std::vector<double> out(x.begin(), x.end());
    if (cfg.strong_dropout > 0.0)
        for (double& v : out)
            if (rng.next_double() < cfg.strong_dropout) v = 0.0;
    if (cfg.strong_noise > 0.0)
        for (double& v : out) v += cfg.strong_noise * rng.next_gaussian();
    return out;
}

struct FixMatchLoss {
    double value = 0.0;
    std::vector<double> d_ps;  // gradient w.r.t. the strong-view prediction
    bool gated_in = false;
};

// Confidence-gated pseudo-label cross-entropy: the weak view supplies the
// label, the strong view is trained, and samples below the confidence gate
// contribute exactly nothing. The gate is strict.
inline FixMatchLoss fixmatch_loss(std::span<const double> p_w, std::span<const double> p_s,
                                  const FixMatchConfig& cfg) {
    cfg.validate();
    if (p_w.size() != p_s.size()) throw ShapeError("fixmatch_loss: length mismatch");
    FixMatchLoss out;
    out.d_ps.assign(p_s.size(), 0.0);
    std::size_t arg = 0;
    for (std::size_t i = 1; i < p_w.size(); ++i)
        if (p_w[i] > p_w[arg]) arg = i;
    if (!(p_w[arg] > cfg.tau_fm)) return out;
    out.gated_in = true;
    const double p = std::max(p_s[arg], kLogFloor);
    out.value = -cfg.lambda_fm * std::log(p);
    out.d_ps[arg] = -cfg.lambda_fm / p;
    return out;
}

// ---------------------------------------------------------------------------
// Partial-set domain adaptation: classes predicted fewer than T_pda times
// over the target set are masked out of the student prediction.

inline std::vector<std::size_t> pda_count(std::span<const std::size_t> predictions,
                                          std::size_t classes) {
    std::vector<std::size_t> counts(classes, 0);
    for (std::size_t p : predictions) {
        if (p >= classes) throw IndexError("prediction " + std::to_string(p) + " out of range");
        ++counts[p];
    }
    return counts;
}

inline std::vector<std::uint8_t> pda_keep_mask(std::span<const std::size_t> counts,
                                               std::size_t threshold) {
    std::vector<std::uint8_t> keep(counts.size());
    for (std::size_t i = 0; i < counts.size(); ++i) keep[i] = counts[i] >= threshold ? 1 : 0;
    return keep;
}

struct PdaState {
    std::vector<std::size_t> counts;
    std::size_t threshold = 14;
    std::vector<std::uint8_t> keep;

    bool any_kept() const {
        for (std::uint8_t k : keep)
            if (k) return true;
        return false;
    }

    void refresh(std::span<const std::size_t> predictions, std::size_t classes) {
        counts = pda_count(predictions, classes);
        keep = pda_keep_mask(counts, threshold);
    }
};

// Zeroes masked classes; with renormalize the kept mass is rescaled to sum 1
// (required before the masked vector feeds any probability-based loss).
inline std::vector<double> pda_mask(std::span<const double> p, std::span<const std::size_t> counts,
                                    std::size_t threshold, bool renormalize = true) {
    if (counts.size() != p.size()) throw ShapeError("pda_mask: counts length != class count");
    std::vector<double> masked(p.size());
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        masked[i] = counts[i] >= threshold ? p[i] : 0.0;
        total += masked[i];
    }
    if (renormalize) {
        if (total <= 0.0) throw DomainError("pda_mask: all classes masked");
        for (double& v : masked) v /= total;
    }
    return masked;
}

// Chain rule through mask + renormalization: for kept classes
// d/dp_j = (g_j - <g, p_hat>) / S, masked classes get zero.
inline std::vector<double> pda_mask_backward(std::span<const double> p,
                                             std::span<const std::uint8_t> keep,
                                             std::span<const double> masked,
                                             std::span<const double> d_masked, bool renormalize) {
    std::vector<double> d_raw(p.size(), 0.0);
    if (!renormalize) {
        for (std::size_t i = 0; i < p.size(); ++i) d_raw[i] = keep[i] ? d_masked[i] : 0.0;
        return d_raw;
    }
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (keep[i]) total += p[i];
    double mix = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) mix += d_masked[i] * masked[i];
    for (std::size_t i = 0; i < p.size(); ++i)
        d_raw[i] = keep[i] ? (d_masked[i] - mix) / total : 0.0;
    return d_raw;
}

}  // namespace udaforge
