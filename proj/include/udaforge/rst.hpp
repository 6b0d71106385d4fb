#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "udaforge/errors.hpp"
#include "udaforge/io.hpp"
#include "udaforge/model.hpp"
#include "udaforge/tensor.hpp"

namespace udaforge {

// FNV-1a over the f64 little-endian byte stream of all tensors in registry
// order. Residual files refuse to apply against a base with a different hash.
inline std::uint64_t model_checksum(const StudentModel& m) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto params = param_registry(const_cast<StudentModel&>(m));
    for (const auto& p : params) {
        for (double v : *p.data) {
            std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
            for (int s = 0; s < 64; s += 8) {
                h ^= (bits >> s) & 0xFF;
                h *= 0x100000001b3ULL;
            }
        }
    }
    return h;
}

enum class RstMode { constant_tau, ramp_tau, top_fraction };

struct RstConfig {
    RstMode mode = RstMode::constant_tau;
    double tau = 1e-3;
    double tau_start = 5e-4;
    double tau_end = 3.5e-2;
    double r_start = 100.0;
    double r_end = 0.2;
    std::size_t apply_every = 1;
    bool include_head = false;

    void validate() const {
        if (mode == RstMode::constant_tau && tau < 0.0)
            throw ConfigError("tau must be non-negative");
        if (mode == RstMode::ramp_tau && (tau_start <= 0.0 || tau_end <= 0.0))
            throw ConfigError("ramp thresholds must be positive");
        if (mode == RstMode::top_fraction) {
            for (double r : {r_start, r_end})
                if (!(r > 0.0 && r <= 100.0)) throw ConfigError("top fraction must be in (0,100]");
        }
        if (apply_every < 1) throw ConfigError("apply_every must be >= 1");
    }
};

// Effective threshold at training progress mu: constant tau, a geometric
// tau ramp, or a linearly interpolated keep-fraction r.
inline double current_threshold(const RstConfig& cfg, double mu) {
    cfg.validate();
    if (mu < 0.0 || mu > 1.0) throw DomainError("mu must be in [0,1]");
    switch (cfg.mode) {
        case RstMode::constant_tau: return cfg.tau;
        case RstMode::ramp_tau:
            return std::exp((1.0 - mu) * std::log(cfg.tau_start) + mu * std::log(cfg.tau_end));
        case RstMode::top_fraction: return (1.0 - mu) * cfg.r_start + mu * cfg.r_end;
    }
    throw ConfigError("unknown rst mode");
}

namespace detail {

inline void check_same_registry(const StudentModel& a, const StudentModel& b) {
    auto pa = param_registry(const_cast<StudentModel&>(a));
    auto pb = param_registry(const_cast<StudentModel&>(b));
    for (std::size_t t = 0; t < kRegistrySize; ++t)
        if (pa[t].data->size() != pb[t].data->size())
            throw FormatError("registry mismatch on tensor '" + std::string(pa[t].name) + "'");
}

}  // namespace detail

// Entries whose drift from the base is <= tau snap back to the base value
// bitwise; their momentum is zeroed so they do not immediately drift again.
inline std::size_t threshold_reset(StudentModel& current, const StudentModel& base, double tau,
                                   bool include_head = false, SgdOptimizer* opt = nullptr) {
    detail::check_same_registry(current, base);
    auto cur = param_registry(current);
    auto ref = param_registry(const_cast<StudentModel&>(base));
    std::size_t resets = 0;
    for (std::size_t t = 0; t < kRegistrySize; ++t) {
        if (!include_head && registry_is_head(t)) continue;
        auto& w = *cur[t].data;
        const auto& w0 = *ref[t].data;
        for (std::size_t i = 0; i < w.size(); ++i) {
            if (std::abs(w0[i] - w[i]) <= tau) {
                w[i] = w0[i];
                if (opt) opt->zero_velocity(t, i);
                ++resets;
            }
        }
    }
    return resets;
}

// Keeps the ceil(r% of N) entries with the largest |drift| and resets the
// rest. Ties break toward the lower flat index, then the lower registry
// index, so the selection is deterministic.
inline std::size_t top_fraction_reset(StudentModel& current, const StudentModel& base, double r,
                                      bool include_head = false, SgdOptimizer* opt = nullptr) {
    if (!(r > 0.0 && r <= 100.0)) throw ConfigError("top fraction must be in (0,100]");
    detail::check_same_registry(current, base);
    auto cur = param_registry(current);
    auto ref = param_registry(const_cast<StudentModel&>(base));

    struct Entry {
        double abs_delta;
        std::size_t flat;
        std::size_t tensor;
    };
    std::vector<Entry> entries;
    for (std::size_t t = 0; t < kRegistrySize; ++t) {
        if (!include_head && registry_is_head(t)) continue;
        const auto& w = *cur[t].data;
        const auto& w0 = *ref[t].data;
        for (std::size_t i = 0; i < w.size(); ++i)
            entries.push_back({std::abs(w[i] - w0[i]), i, t});
    }
    const std::size_t keep = std::min(
        entries.size(),
        static_cast<std::size_t>(std::ceil(r / 100.0 * static_cast<double>(entries.size()))));
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
        if (a.abs_delta != b.abs_delta) return a.abs_delta > b.abs_delta;
        if (a.flat != b.flat) return a.flat < b.flat;
        return a.tensor < b.tensor;
    });
    std::size_t resets = 0;
    for (std::size_t e = keep; e < entries.size(); ++e) {
        auto& w = *cur[entries[e].tensor].data;
        const auto& w0 = *ref[entries[e].tensor].data;
        if (w[entries[e].flat] != w0[entries[e].flat] ||
            std::bit_cast<std::uint64_t>(w[entries[e].flat]) !=
                std::bit_cast<std::uint64_t>(w0[entries[e].flat]))
            ++resets;
        w[entries[e].flat] = w0[entries[e].flat];
        if (opt) opt->zero_velocity(entries[e].tensor, entries[e].flat);
    }
    return resets;
}

// ---------------------------------------------------------------------------
// Sparse residuals

struct ResidualTensor {
    std::string name;
    std::uint8_t ndim = 1;
    std::array<std::uint32_t, 2> dims{};
    std::vector<std::uint64_t> indices;  // strictly ascending flat row-major
    std::vector<double> values;

    std::size_t element_count() const {
        std::size_t n = dims[0];
        if (ndim == 2) n *= dims[1];
        return n;
    }
};

struct SparseResidual {
    WeightDtype dtype = WeightDtype::f64;
    double tau_used = std::numeric_limits<double>::quiet_NaN();
    std::uint64_t base_checksum = 0;
    std::vector<ResidualTensor> tensors;  // registry order

    std::size_t nnz_total() const {
        std::size_t n = 0;
        for (const auto& t : tensors) n += t.indices.size();
        return n;
    }
    // Nonzeros outside the task head; this is the DSP-relevant count.
    std::size_t nnz_encoder() const {
        std::size_t n = 0;
        for (std::size_t t = 0; t < tensors.size(); ++t)
            if (!registry_is_head(t)) n += tensors[t].indices.size();
        return n;
    }
    std::size_t head_param_count() const {
        std::size_t n = 0;
        for (std::size_t t = 0; t < tensors.size(); ++t)
            if (registry_is_head(t)) n += tensors[t].element_count();
        return n;
    }
};

namespace detail {

// Residual values are chosen so base + value reproduces the tuned weight
// bitwise; the raw difference can be one ulp off after rounding.
inline double encode_delta(double base, double tuned) {
    double v = tuned - base;
    for (int attempt = 0; attempt < 8; ++attempt) {
        const double merged = base + v;
        if (std::bit_cast<std::uint64_t>(merged) == std::bit_cast<std::uint64_t>(tuned)) return v;
        const double toward = merged < tuned ? std::numeric_limits<double>::infinity()
                                             : -std::numeric_limits<double>::infinity();
        v = std::nextafter(v, toward);
    }
    throw NumericError("cannot encode residual delta for bitwise reproduction");
}

}  // namespace detail

// Rounds every weight onto the set reachable as base + delta in one f64
// addition. Training can land a weight where no representable delta
// reproduces it exactly (deltas crossing binades have coarser ulps than the
// result); snapping moves such weights by at most one ulp and is idempotent,
// after which extract/apply round trips are bitwise. RST training snaps once
// before its final evaluation and serialization.
inline void snap_to_residual_grid(StudentModel& model, const StudentModel& base) {
    detail::check_same_registry(model, base);
    auto cur = param_registry(model);
    auto ref = param_registry(const_cast<StudentModel&>(base));
    for (std::size_t t = 0; t < kRegistrySize; ++t) {
        auto& w = *cur[t].data;
        const auto& w0 = *ref[t].data;
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = w0[i] + (w[i] - w0[i]);
    }
}

// w_sp = w_tuned - w_base restricted to entries that actually moved.
inline SparseResidual extract_residual(const StudentModel& tuned, const StudentModel& base,
                                       double tau_used = std::numeric_limits<double>::quiet_NaN()) {
    detail::check_same_registry(tuned, base);
    SparseResidual res;
    res.tau_used = tau_used;
    res.base_checksum = model_checksum(base);
    auto pt = param_registry(const_cast<StudentModel&>(tuned));
    auto pb = param_registry(const_cast<StudentModel&>(base));
    for (std::size_t t = 0; t < kRegistrySize; ++t) {
        ResidualTensor rt;
        rt.name = std::string(pt[t].name);
        rt.ndim = pt[t].ndim;
        rt.dims = pt[t].dims;
        const auto& wt = *pt[t].data;
        const auto& wb = *pb[t].data;
        for (std::size_t i = 0; i < wt.size(); ++i) {
            if (wt[i] - wb[i] != 0.0) {
                rt.indices.push_back(i);
                rt.values.push_back(detail::encode_delta(wb[i], wt[i]));
            }
        }
        res.tensors.push_back(std::move(rt));
    }
    return res;
}

inline StudentModel apply_residual(const StudentModel& base, const SparseResidual& res) {
    if (res.base_checksum != model_checksum(base))
        throw FormatError("base model mismatch: residual was extracted against different weights");
    StudentModel merged = base;
    auto params = param_registry(merged);
    if (res.tensors.size() != kRegistrySize) throw FormatError("residual tensor count mismatch");
    for (std::size_t t = 0; t < kRegistrySize; ++t) {
        const auto& rt = res.tensors[t];
        if (rt.name != kRegistryNames[t])
            throw FormatError("residual tensor '" + rt.name + "' out of registry order");
        auto& w = *params[t].data;
        if (rt.element_count() != w.size())
            throw FormatError("residual tensor '" + rt.name + "' shape mismatch");
        for (std::size_t k = 0; k < rt.indices.size(); ++k) {
            const std::uint64_t idx = rt.indices[k];
            if (idx >= w.size())
                throw FormatError("residual index " + std::to_string(idx) + " out of range in '" +
                                  rt.name + "'");
            w[idx] += rt.values[k];
        }
    }
    return merged;
}

// ---------------------------------------------------------------------------
// RST1 file format
//
//   magic "RST1", u8 version=1, u8 dtype (0=f32, 1=f64), u16 reserved=0,
//   u32 tensor_count, u64 base_checksum, f64 tau_used (NaN when selection was
//   top-fraction), then per tensor: u16 name length, UTF-8 name, u8 ndim,
//   u32 dims[ndim], u64 nnz, nnz x u64 ascending flat indices, nnz x value.

inline constexpr std::array<std::uint8_t, 4> kRstMagic = {0x52, 0x53, 0x54, 0x31};
// Pinned quiet-NaN payload so files are byte-stable across toolchains.
inline constexpr std::uint64_t kCanonicalNanBits = 0x7FF8000000000000ULL;

inline std::vector<std::uint8_t> pack(const SparseResidual& res) {
    ByteWriter w;
    w.bytes(kRstMagic.data(), kRstMagic.size());
    w.u8(1);
    w.u8(static_cast<std::uint8_t>(res.dtype));
    w.u16(0);
    w.u32(static_cast<std::uint32_t>(res.tensors.size()));
    w.u64(res.base_checksum);
    if (std::isnan(res.tau_used))
        w.u64(kCanonicalNanBits);
    else
        w.f64(res.tau_used);
    for (const auto& t : res.tensors) {
        w.u16(static_cast<std::uint16_t>(t.name.size()));
        w.bytes(t.name.data(), t.name.size());
        w.u8(t.ndim);
        for (std::uint8_t d = 0; d < t.ndim; ++d) w.u32(t.dims[d]);
        w.u64(t.indices.size());
        for (std::uint64_t idx : t.indices) w.u64(idx);
        for (double v : t.values) {
            if (res.dtype == WeightDtype::f64)
                w.f64(v);
            else
                w.f32(static_cast<float>(v));
        }
    }
    return w.take();
}

inline SparseResidual unpack(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    for (std::uint8_t expect : kRstMagic)
        if (r.u8() != expect) r.fail("bad RST1 magic");
    if (const auto version = r.u8(); version != 1)
        r.fail("unsupported RST1 version " + std::to_string(version));
    SparseResidual res;
    const auto dtype_raw = r.u8();
    if (dtype_raw > 1) r.fail("unknown dtype " + std::to_string(dtype_raw));
    res.dtype = static_cast<WeightDtype>(dtype_raw);
    if (r.u16() != 0) r.fail("reserved field must be zero");
    const std::uint32_t count = r.u32();
    res.base_checksum = r.u64();
    res.tau_used = r.f64();
    for (std::uint32_t t = 0; t < count; ++t) {
        ResidualTensor rt;
        const std::uint16_t name_len = r.u16();
        rt.name = r.str(name_len);
        rt.ndim = r.u8();
        if (rt.ndim == 0 || rt.ndim > 2)
            r.fail("tensor '" + rt.name + "' has ndim " + std::to_string(rt.ndim));
        for (std::uint8_t d = 0; d < rt.ndim; ++d) rt.dims[d] = r.u32();
        const std::uint64_t nnz = r.u64();
        rt.indices.resize(nnz);
        std::uint64_t prev = 0;
        for (std::uint64_t k = 0; k < nnz; ++k) {
            rt.indices[k] = r.u64();
            if (k > 0 && rt.indices[k] <= prev) r.fail("indices not strictly ascending");
            if (rt.indices[k] >= rt.element_count())
                r.fail("index " + std::to_string(rt.indices[k]) + " out of range");
            prev = rt.indices[k];
        }
        rt.values.resize(nnz);
        for (double& v : rt.values) v = res.dtype == WeightDtype::f64 ? r.f64() : r.f32();
        res.tensors.push_back(std::move(rt));
    }
    if (!r.exhausted()) r.fail("trailing bytes");
    return res;
}

// ---------------------------------------------------------------------------
// Deployment cost accounting

struct DspEntry {
    std::string task;
    // RST deployments store encoder nonzeros plus the dense task head;
    // full fine-tuning stores the whole model; zero-shot stores nothing.
    std::size_t residual_nnz = 0;
    std::size_t head_params = 0;
    std::size_t full_params = 0;
    std::size_t byte_size = 0;

    std::size_t stored_params() const {
        return full_params > 0 ? full_params : residual_nnz + head_params;
    }
};

struct DspReport {
    std::vector<DspEntry> tasks;

    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& t : tasks) n += t.stored_params();
        return n;
    }
};

inline DspEntry dsp_entry_for_residual(const std::string& task, const SparseResidual& res,
                                       std::size_t byte_size = 0) {
    DspEntry e;
    e.task = task;
    e.residual_nnz = res.nnz_encoder();
    e.head_params = res.head_param_count();
    e.byte_size = byte_size;
    return e;
}

inline DspEntry dsp_entry_for_full_model(const std::string& task, const StudentModel& m,
                                         std::size_t byte_size = 0) {
    DspEntry e;
    e.task = task;
    e.full_params = count_params(m, true);
    e.byte_size = byte_size;
    return e;
}

inline DspReport dsp(std::vector<DspEntry> entries) {
    DspReport report;
    report.tasks = std::move(entries);
    return report;
}

// ---------------------------------------------------------------------------
// PEFT baselines

// Trainable mask over the registry: biases only.
inline std::array<bool, kRegistrySize> bitfit_mask() {
    std::array<bool, kRegistrySize> mask{};
    for (std::size_t t = 0; t < kRegistrySize; ++t) mask[t] = registry_is_bias(t);
    return mask;
}

inline std::array<bool, kRegistrySize> linear_probe_mask() {
    std::array<bool, kRegistrySize> mask{};
    for (std::size_t t = 0; t < kRegistrySize; ++t) mask[t] = registry_is_head(t);
    return mask;
}

// Low-rank additive path h = w0 x + B A x, column convention: w0 is d x k,
// A is r x k, B is d x r, x has length k.
inline std::vector<double> lora_forward(const Tensor2& w0, const Tensor2& A, const Tensor2& B,
                                        std::span<const double> x) {
    const std::size_t d = w0.rows();
    const std::size_t k = w0.cols();
    const std::size_t r = A.rows();
    if (A.cols() != k || B.rows() != d || B.cols() != r)
        throw ShapeError("lora_forward: adapter shapes inconsistent with w0");
    if (r > std::min(d, k)) throw ConfigError("lora rank exceeds min(d,k)");
    if (x.size() != k) throw ShapeError("lora_forward: input length mismatch");

    std::vector<double> ax(r, 0.0);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < k; ++j) ax[i] += A(i, j) * x[j];
    std::vector<double> out(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < k; ++j) acc += w0(i, j) * x[j];
        for (std::size_t j = 0; j < r; ++j) acc += B(i, j) * ax[j];
        out[i] = acc;
    }
    return out;
}

inline Tensor2 lora_merge(const Tensor2& A, const Tensor2& B) {
    return matmul(B, A);
}

}  // namespace udaforge
