#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "udaforge/divergences.hpp"
#include "udaforge/errors.hpp"
#include "udaforge/io.hpp"
#include "udaforge/rng.hpp"
#include "udaforge/tensor.hpp"

namespace udaforge {

struct ModelDims {
    std::size_t d_in = 16;
    std::size_t d_hid = 32;
    std::size_t d_feat = 8;
    std::size_t classes = 3;
};

// Trainable student: two-layer tanh encoder plus a linear-softmax task head.
// The parameter registry order [W1, b1, W2, b2, Wh, bh] is fixed; snapshots,
// residuals and the optimizer all index tensors by this order.
struct StudentModel {
    static constexpr std::string_view activation = "tanh";  // fixed nonlinearity

    Tensor2 W1;               // d_in x d_hid
    std::vector<double> b1;   // d_hid
    Tensor2 W2;               // d_hid x d_feat
    std::vector<double> b2;   // d_feat
    Tensor2 Wh;               // d_feat x c
    std::vector<double> bh;   // c

    ModelDims dims() const {
        return {W1.rows(), W1.cols(), W2.cols(), Wh.cols()};
    }

    friend bool operator==(const StudentModel& a, const StudentModel& b) {
        return a.W1 == b.W1 && a.b1 == b.b1 && a.W2 == b.W2 && a.b2 == b.b2 &&
               a.Wh == b.Wh && a.bh == b.bh;
    }
};

// Gradient (or velocity) buffers, one per registry tensor.
struct Gradients {
    Tensor2 W1;
    std::vector<double> b1;
    Tensor2 W2;
    std::vector<double> b2;
    Tensor2 Wh;
    std::vector<double> bh;
};

inline constexpr std::size_t kRegistrySize = 6;
inline constexpr std::array<std::string_view, kRegistrySize> kRegistryNames = {
    "W1", "b1", "W2", "b2", "Wh", "bh"};

// Registry tensors 0..3 form the encoder, 4..5 the task head.
inline constexpr bool registry_is_head(std::size_t idx) { return idx >= 4; }
inline constexpr bool registry_is_bias(std::size_t idx) { return idx % 2 == 1; }

struct ParamRef {
    std::string_view name;
    std::vector<double>* data;
    std::array<std::uint32_t, 2> dims;  // ndim==1 uses dims[0] only
    std::uint8_t ndim;
};

template <typename Params>
inline std::array<ParamRef, kRegistrySize> param_registry(Params& p) {
    return {{
        {"W1", &p.W1.data(), {static_cast<std::uint32_t>(p.W1.rows()), static_cast<std::uint32_t>(p.W1.cols())}, 2},
        {"b1", &p.b1, {static_cast<std::uint32_t>(p.b1.size()), 0}, 1},
        {"W2", &p.W2.data(), {static_cast<std::uint32_t>(p.W2.rows()), static_cast<std::uint32_t>(p.W2.cols())}, 2},
        {"b2", &p.b2, {static_cast<std::uint32_t>(p.b2.size()), 0}, 1},
        {"Wh", &p.Wh.data(), {static_cast<std::uint32_t>(p.Wh.rows()), static_cast<std::uint32_t>(p.Wh.cols())}, 2},
        {"bh", &p.bh, {static_cast<std::uint32_t>(p.bh.size()), 0}, 1},
    }};
}

inline Gradients zeros_like(const StudentModel& m) {
    Gradients g;
    g.W1 = Tensor2(m.W1.rows(), m.W1.cols());
    g.b1.assign(m.b1.size(), 0.0);
    g.W2 = Tensor2(m.W2.rows(), m.W2.cols());
    g.b2.assign(m.b2.size(), 0.0);
    g.Wh = Tensor2(m.Wh.rows(), m.Wh.cols());
    g.bh.assign(m.bh.size(), 0.0);
    return g;
}

inline void accumulate(Gradients& into, const Gradients& from) {
    auto dst = param_registry(into);
    auto src = param_registry(const_cast<Gradients&>(from));
    for (std::size_t t = 0; t < kRegistrySize; ++t)
        for (std::size_t i = 0; i < dst[t].data->size(); ++i)
            (*dst[t].data)[i] += (*src[t].data)[i];
}

// Weights ~ N(0, 1/sqrt(fan_in)), biases zero.
inline StudentModel init_student(const ModelDims& d, Rng& rng) {
    StudentModel m;
    auto fill = [&rng](Tensor2& w, std::size_t fan_in) {
        const double std_dev = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (double& v : w.data()) v = std_dev * rng.next_gaussian();
    };
    m.W1 = Tensor2(d.d_in, d.d_hid);
    fill(m.W1, d.d_in);
    m.b1.assign(d.d_hid, 0.0);
    m.W2 = Tensor2(d.d_hid, d.d_feat);
    fill(m.W2, d.d_hid);
    m.b2.assign(d.d_feat, 0.0);
    m.Wh = Tensor2(d.d_feat, d.classes);
    fill(m.Wh, d.d_feat);
    m.bh.assign(d.classes, 0.0);
    return m;
}

inline std::size_t count_params(const StudentModel& m, bool include_head = true) {
    std::size_t n = m.W1.size() + m.b1.size() + m.W2.size() + m.b2.size();
    if (include_head) n += m.Wh.size() + m.bh.size();
    return n;
}

// ---------------------------------------------------------------------------
// Teachers

// Frozen class anchors in feature space; rows are unit L2 norm. scale sharpens
// the softmax over cosine similarities (a stand-in for a pre-trained zero-shot
// classifier's logit scale).
struct AnchorTeacher {
    Tensor2 anchors;  // c x d_feat
    double scale = 5.0;

    static AnchorTeacher from_rows(Tensor2 rows, double scale) {
        for (std::size_t k = 0; k < rows.rows(); ++k) {
            const double n = norm(rows.row(k));
            if (n == 0.0) throw DomainError("anchor row " + std::to_string(k) + " has zero norm");
            for (double& v : rows.row(k)) v /= n;
        }
        return {std::move(rows), scale};
    }
};

// Frozen per-class prototype distributions, scored against a frozen snapshot
// of the task head taken at initialization.
struct PrototypeTeacher {
    Tensor2 prototypes;  // c x c, each row a valid ProbDist
    Tensor2 ref_Wh;      // frozen head snapshot
    std::vector<double> ref_bh;
};

using Teacher = std::variant<AnchorTeacher, PrototypeTeacher>;

// ---------------------------------------------------------------------------
// Forward / backward

struct ForwardTrace {
    Tensor2 x;             // batch x d_in
    Tensor2 a1;            // tanh of first pre-activation
    Tensor2 feat;          // encoder output f(x)
    Tensor2 head_logits;   // batch x c
    Tensor2 p_h;           // batch x c
    Tensor2 teacher_logits;
    Tensor2 p_g;           // batch x c
    Tensor2 ref_probs;     // prototype reference head output; empty for anchors
};

namespace detail {

inline Tensor2 affine(const Tensor2& x, const Tensor2& w, const std::vector<double>& b) {
    Tensor2 out = matmul(x, w);
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += b[j];
    return out;
}

inline Tensor2 tanh_map(const Tensor2& z) {
    Tensor2 out(z.rows(), z.cols());
    for (std::size_t i = 0; i < z.data().size(); ++i) out.data()[i] = std::tanh(z.data()[i]);
    return out;
}

inline Tensor2 rowwise_softmax(const Tensor2& logits) {
    Tensor2 out(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const std::vector<double> p = softmax(logits.row(i));
        for (std::size_t j = 0; j < logits.cols(); ++j) out(i, j) = p[j];
    }
    return out;
}

// d/d logits of a loss given d/d softmax(logits).
inline void softmax_backward_row(std::span<const double> p, std::span<const double> dp,
                                 std::span<double> dlogits) {
    double mix = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) mix += dp[j] * p[j];
    for (std::size_t j = 0; j < p.size(); ++j) dlogits[j] = p[j] * (dp[j] - mix);
}

}  // namespace detail

inline ForwardTrace forward(const StudentModel& m, const Teacher& teacher, const Tensor2& x) {
    if (x.cols() != m.W1.rows())
        throw ShapeError("forward: input dim " + std::to_string(x.cols()) + " != " +
                         std::to_string(m.W1.rows()));
    ForwardTrace t;
    t.x = x;
    t.a1 = detail::tanh_map(detail::affine(x, m.W1, m.b1));
    t.feat = detail::tanh_map(detail::affine(t.a1, m.W2, m.b2));
    t.head_logits = detail::affine(t.feat, m.Wh, m.bh);
    t.p_h = detail::rowwise_softmax(t.head_logits);

    const std::size_t batch = x.rows();
    const std::size_t c = m.Wh.cols();
    t.teacher_logits = Tensor2(batch, c);
    if (const auto* anchor = std::get_if<AnchorTeacher>(&teacher)) {
        if (anchor->anchors.cols() != m.W2.cols())
            throw ShapeError("anchor dim != feature dim");
        if (anchor->anchors.rows() != c) throw ShapeError("anchor count != class count");
        for (std::size_t i = 0; i < batch; ++i) {
            const auto f = t.feat.row(i);
            const double nf = norm(f);
            if (nf == 0.0) throw DomainError("zero-norm feature row");
            for (std::size_t k = 0; k < c; ++k)
                t.teacher_logits(i, k) = anchor->scale * dot(f, anchor->anchors.row(k)) / nf;
        }
    } else {
        const auto& proto = std::get<PrototypeTeacher>(teacher);
        if (proto.prototypes.rows() != c || proto.prototypes.cols() != c)
            throw ShapeError("prototype matrix must be c x c");
        t.ref_probs = detail::rowwise_softmax(detail::affine(t.feat, proto.ref_Wh, proto.ref_bh));
        for (std::size_t i = 0; i < batch; ++i) {
            const auto q = t.ref_probs.row(i);
            for (std::size_t k = 0; k < c; ++k) {
                // -KL(M_k || q); q is strictly positive here, no floor needed
                double neg_kl = 0.0;
                const auto mk = proto.prototypes.row(k);
                for (std::size_t j = 0; j < c; ++j)
                    if (mk[j] > 0.0) neg_kl -= mk[j] * (std::log(mk[j]) - std::log(q[j]));
                t.teacher_logits(i, k) = neg_kl;
            }
        }
    }
    t.p_g = detail::rowwise_softmax(t.teacher_logits);
    return t;
}

// Encoder features f(x), without the head or teacher.
inline Tensor2 encode(const StudentModel& m, const Tensor2& x) {
    if (x.cols() != m.W1.rows()) throw ShapeError("encode: input dim mismatch");
    const Tensor2 a1 = detail::tanh_map(detail::affine(x, m.W1, m.b1));
    return detail::tanh_map(detail::affine(a1, m.W2, m.b2));
}

// Student head output p_h without running a teacher.
inline Tensor2 head_probabilities(const StudentModel& m, const Tensor2& x) {
    return detail::rowwise_softmax(detail::affine(encode(m, x), m.Wh, m.bh));
}

// Back-propagates loss gradients w.r.t. p_h and p_g into every registry
// parameter, summed over the batch. Anchors, prototypes and the reference
// head are frozen: the p_g path only reaches the encoder through f(x).
inline Gradients backward(const StudentModel& m, const Teacher& teacher, const ForwardTrace& t,
                          const Tensor2& dL_dph, const Tensor2& dL_dpg) {
    if (!dL_dph.same_shape(t.p_h) || !dL_dpg.same_shape(t.p_g))
        throw ShapeError("backward: gradient shape mismatch");

    const std::size_t batch = t.x.rows();
    const std::size_t c = m.Wh.cols();
    const std::size_t d_feat = m.W2.cols();
    const std::size_t d_hid = m.W1.cols();
    Gradients g = zeros_like(m);

    std::vector<double> du(c), dv(c), dfeat(d_feat), dz2(d_feat), da1(d_hid), dz1(d_hid);
    for (std::size_t i = 0; i < batch; ++i) {
        // head softmax
        detail::softmax_backward_row(t.p_h.row(i), dL_dph.row(i), du);
        const auto f = t.feat.row(i);
        for (std::size_t r = 0; r < d_feat; ++r)
            for (std::size_t j = 0; j < c; ++j) g.Wh(r, j) += f[r] * du[j];
        for (std::size_t j = 0; j < c; ++j) g.bh[j] += du[j];
        for (std::size_t r = 0; r < d_feat; ++r) {
            double acc = 0.0;
            for (std::size_t j = 0; j < c; ++j) acc += m.Wh(r, j) * du[j];
            dfeat[r] = acc;
        }

        // teacher softmax into f(x)
        detail::softmax_backward_row(t.p_g.row(i), dL_dpg.row(i), dv);
        if (const auto* anchor = std::get_if<AnchorTeacher>(&teacher)) {
            const double nf = norm(f);
            const double inv = 1.0 / nf;
            const double inv3 = inv * inv * inv;
            for (std::size_t k = 0; k < c; ++k) {
                if (dv[k] == 0.0) continue;
                const auto ak = anchor->anchors.row(k);
                const double fk = dot(f, ak);
                for (std::size_t r = 0; r < d_feat; ++r)
                    dfeat[r] += dv[k] * anchor->scale * (ak[r] * inv - fk * f[r] * inv3);
            }
        } else {
            const auto& proto = std::get<PrototypeTeacher>(teacher);
            const auto q = t.ref_probs.row(i);
            std::vector<double> dq(c, 0.0);
            for (std::size_t k = 0; k < c; ++k) {
                if (dv[k] == 0.0) continue;
                const auto mk = proto.prototypes.row(k);
                for (std::size_t j = 0; j < c; ++j)
                    if (mk[j] > 0.0) dq[j] += dv[k] * mk[j] / q[j];
            }
            std::vector<double> dref(c);
            detail::softmax_backward_row(q, dq, dref);
            for (std::size_t r = 0; r < d_feat; ++r) {
                double acc = 0.0;
                for (std::size_t j = 0; j < c; ++j) acc += proto.ref_Wh(r, j) * dref[j];
                dfeat[r] += acc;
            }
        }

        // encoder
        for (std::size_t r = 0; r < d_feat; ++r) dz2[r] = dfeat[r] * (1.0 - f[r] * f[r]);
        const auto a1 = t.a1.row(i);
        for (std::size_t r = 0; r < d_hid; ++r)
            for (std::size_t j = 0; j < d_feat; ++j) g.W2(r, j) += a1[r] * dz2[j];
        for (std::size_t j = 0; j < d_feat; ++j) g.b2[j] += dz2[j];
        for (std::size_t r = 0; r < d_hid; ++r) {
            double acc = 0.0;
            for (std::size_t j = 0; j < d_feat; ++j) acc += m.W2(r, j) * dz2[j];
            da1[r] = acc;
        }
        for (std::size_t r = 0; r < d_hid; ++r) dz1[r] = da1[r] * (1.0 - a1[r] * a1[r]);
        const auto xr = t.x.row(i);
        for (std::size_t r = 0; r < t.x.cols(); ++r)
            for (std::size_t j = 0; j < d_hid; ++j) g.W1(r, j) += xr[r] * dz1[j];
        for (std::size_t j = 0; j < d_hid; ++j) g.b1[j] += dz1[j];
    }
    return g;
}

// ---------------------------------------------------------------------------
// Optimizer

struct SgdConfig {
    double lr_encoder = 0.0;
    double lr_head = 0.0;
    double momentum = 0.9;
    double weight_decay = 5e-4;
};

// Momentum SGD with decoupled encoder/head learning rates. Velocities live
// here so residual thresholding can zero them for reset entries.
class SgdOptimizer {
public:
    SgdOptimizer(const SgdConfig& cfg, const StudentModel& m)
        : cfg_(cfg), velocity_(zeros_like(m)) {
        trainable_.fill(true);
    }

    const SgdConfig& config() const { return cfg_; }

    void set_trainable(const std::array<bool, kRegistrySize>& mask) { trainable_ = mask; }
    const std::array<bool, kRegistrySize>& trainable() const { return trainable_; }

    void step(StudentModel& m, const Gradients& grads) {
        if (cfg_.lr_encoder < 0.0 || cfg_.lr_head < 0.0) throw DomainError("negative learning rate");
        auto params = param_registry(m);
        auto gs = param_registry(const_cast<Gradients&>(grads));
        auto vs = param_registry(velocity_);
        for (std::size_t t = 0; t < kRegistrySize; ++t) {
            if (!trainable_[t]) continue;
            const double lr = registry_is_head(t) ? cfg_.lr_head : cfg_.lr_encoder;
            auto& w = *params[t].data;
            auto& gv = *gs[t].data;
            auto& v = *vs[t].data;
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double g_eff = gv[i] + cfg_.weight_decay * w[i];
                v[i] = cfg_.momentum * v[i] + g_eff;
                w[i] -= lr * v[i];
            }
        }
    }

    void zero_velocity(std::size_t tensor_idx, std::size_t flat_idx) {
        auto vs = param_registry(velocity_);
        (*vs[tensor_idx].data)[flat_idx] = 0.0;
    }

    const Gradients& velocity() const { return velocity_; }

private:
    SgdConfig cfg_;
    Gradients velocity_;
    std::array<bool, kRegistrySize> trainable_{};
};

// ---------------------------------------------------------------------------
// Flatten / unflatten

struct NamedVector {
    std::string name;
    std::vector<double> values;
};

inline std::vector<NamedVector> flatten_params(const StudentModel& m) {
    std::vector<NamedVector> out;
    auto params = param_registry(const_cast<StudentModel&>(m));
    out.reserve(kRegistrySize);
    for (const auto& p : params) out.push_back({std::string(p.name), *p.data});
    return out;
}

inline StudentModel unflatten_params(const ModelDims& dims, const std::vector<NamedVector>& named) {
    if (named.size() != kRegistrySize)
        throw FormatError("expected " + std::to_string(kRegistrySize) + " tensors, got " +
                          std::to_string(named.size()));
    StudentModel m;
    m.W1 = Tensor2(dims.d_in, dims.d_hid);
    m.b1.assign(dims.d_hid, 0.0);
    m.W2 = Tensor2(dims.d_hid, dims.d_feat);
    m.b2.assign(dims.d_feat, 0.0);
    m.Wh = Tensor2(dims.d_feat, dims.classes);
    m.bh.assign(dims.classes, 0.0);
    auto params = param_registry(m);
    for (std::size_t t = 0; t < kRegistrySize; ++t) {
        if (named[t].name != kRegistryNames[t])
            throw FormatError("tensor " + std::to_string(t) + " named '" + named[t].name +
                              "', expected '" + std::string(kRegistryNames[t]) + "'");
        if (named[t].values.size() != params[t].data->size())
            throw FormatError("tensor '" + named[t].name + "' has " +
                              std::to_string(named[t].values.size()) + " values, expected " +
                              std::to_string(params[t].data->size()));
        *params[t].data = named[t].values;
    }
    return m;
}

// ---------------------------------------------------------------------------
// WGT1 snapshot format
//
//   magic "WGT1", u8 version=1, u8 dtype (0=f32, 1=f64), u32 tensor count,
//   then per tensor: u16 name length, UTF-8 name, u8 ndim, u32 dims[ndim],
//   raw little-endian values. Tensors appear in registry order.

inline constexpr std::array<std::uint8_t, 4> kWgtMagic = {0x57, 0x47, 0x54, 0x31};

enum class WeightDtype : std::uint8_t { f32 = 0, f64 = 1 };

inline std::vector<std::uint8_t> write_wgt(const StudentModel& m,
                                           WeightDtype dtype = WeightDtype::f64) {
    ByteWriter w;
    w.bytes(kWgtMagic.data(), kWgtMagic.size());
    w.u8(1);
    w.u8(static_cast<std::uint8_t>(dtype));
    w.u32(static_cast<std::uint32_t>(kRegistrySize));
    auto params = param_registry(const_cast<StudentModel&>(m));
    for (const auto& p : params) {
        w.u16(static_cast<std::uint16_t>(p.name.size()));
        w.bytes(p.name.data(), p.name.size());
        w.u8(p.ndim);
        for (std::uint8_t d = 0; d < p.ndim; ++d) w.u32(p.dims[d]);
        for (double v : *p.data) {
            if (dtype == WeightDtype::f64)
                w.f64(v);
            else
                w.f32(static_cast<float>(v));
        }
    }
    return w.take();
}

inline StudentModel read_wgt(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    for (std::uint8_t expect : kWgtMagic)
        if (r.u8() != expect) r.fail("bad WGT1 magic");
    if (const auto version = r.u8(); version != 1)
        r.fail("unsupported WGT1 version " + std::to_string(version));
    const auto dtype_raw = r.u8();
    if (dtype_raw > 1) r.fail("unknown dtype " + std::to_string(dtype_raw));
    const auto dtype = static_cast<WeightDtype>(dtype_raw);
    const std::uint32_t count = r.u32();
    if (count != kRegistrySize) r.fail("expected 6 tensors, found " + std::to_string(count));

    std::vector<NamedVector> named;
    std::array<std::array<std::uint32_t, 2>, kRegistrySize> dims{};
    for (std::uint32_t t = 0; t < count; ++t) {
        const std::uint16_t name_len = r.u16();
        NamedVector nv;
        nv.name = r.str(name_len);
        const std::uint8_t ndim = r.u8();
        if (ndim == 0 || ndim > 2) r.fail("tensor '" + nv.name + "' has ndim " + std::to_string(ndim));
        std::size_t total = 1;
        for (std::uint8_t d = 0; d < ndim; ++d) {
            dims[t][d] = r.u32();
            total *= dims[t][d];
        }
        nv.values.resize(total);
        for (double& v : nv.values) v = dtype == WeightDtype::f64 ? r.f64() : r.f32();
        named.push_back(std::move(nv));
    }
    if (!r.exhausted()) r.fail("trailing bytes");
    if (named.size() != kRegistrySize || named[0].name != "W1" || named[2].name != "W2" ||
        named[4].name != "Wh")
        throw FormatError("WGT1 tensors out of registry order");
    ModelDims md{dims[0][0], dims[0][1], dims[2][1], dims[4][1]};
    return unflatten_params(md, named);
}

// ---------------------------------------------------------------------------
// Gradient verification

struct LossWithGrads {
    double value = 0.0;
    Gradients grads;
};

using LossClosure = std::function<LossWithGrads(const StudentModel&)>;

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

// Central-difference check of a loss closure's analytic gradients over every
// registry parameter. Relative error uses max(|analytic|, |fd|, 1e-8) in the
// denominator.
inline GradCheckReport grad_check(StudentModel model, const LossClosure& loss, double h = 1e-5) {
    const LossWithGrads base = loss(model);
    if (!std::isfinite(base.value)) throw NumericError("grad_check: non-finite loss");
    Gradients analytic = base.grads;
    auto grads = param_registry(analytic);
    auto params = param_registry(model);

    GradCheckReport report;
    for (std::size_t t = 0; t < kRegistrySize; ++t) {
        auto& w = *params[t].data;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double saved = w[i];
            w[i] = saved + h;
            const double up = loss(model).value;
            w[i] = saved - h;
            const double down = loss(model).value;
            w[i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down))
                throw NumericError("grad_check: non-finite loss during perturbation");
            const double fd = (up - down) / (2.0 * h);
            const double an = (*grads[t].data)[i];
            const double denom = std::max({std::abs(an), std::abs(fd), 1e-8});
            const double rel = std::abs(an - fd) / denom;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = std::string(kRegistryNames[t]);
                report.worst_index = i;
                report.analytic = an;
                report.numeric = fd;
            }
        }
    }
    return report;
}

}  // namespace udaforge
