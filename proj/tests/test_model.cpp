#include <catch_amalgamated.hpp>

#include <cmath>

#include "udaforge/divergences.hpp"
#include "udaforge/gradcheck.hpp"
#include "udaforge/model.hpp"
#include "udaforge/rng.hpp"

using namespace udaforge;

namespace {

StudentModel make_model(const ModelDims& dims, std::uint64_t seed) {
    Rng rng(seed);
    return init_student(dims, rng);
}

Tensor2 random_batch(Rng& rng, std::size_t n, std::size_t d) {
    std::vector<double> zero(d, 0.0);
    return gaussian(rng, n, d, zero, 1.0);
}

Teacher make_anchor_teacher(std::uint64_t seed, std::size_t c, std::size_t d_feat, double scale) {
    Rng rng(seed);
    Tensor2 rows(c, d_feat);
    for (double& v : rows.data()) v = rng.next_gaussian();
    return AnchorTeacher::from_rows(std::move(rows), scale);
}

}  // namespace

TEST_CASE("count_params arithmetic", "[model]") {
    const StudentModel m = make_model({16, 32, 8, 3}, 1);
    REQUIRE(count_params(m, false) == 808);      // 16*32 + 32 + 32*8 + 8
    REQUIRE(count_params(m, true) == 808 + 27);  // head adds 8*3 + 3
}

TEST_CASE("anchor teacher forward matches analytic softmax", "[model]") {
    // Encoder rigged so f(x) is a positive multiple of e1; with orthonormal
    // anchors e1, e2 and scale 1 the teacher logits are exactly [1, 0].
    StudentModel m = make_model({4, 4, 3, 2}, 2);
    for (double& v : m.W1.data()) v = 0.0;
    m.b1.assign(m.b1.size(), 0.0);
    for (double& v : m.W2.data()) v = 0.0;
    m.b2 = {1.0, 0.0, 0.0};

    Tensor2 anchors(2, 3, {1, 0, 0, 0, 1, 0});
    const Teacher teacher = AnchorTeacher::from_rows(std::move(anchors), 1.0);

    Tensor2 x(1, 4, {0.3, -0.2, 0.9, 0.0});
    const ForwardTrace t = forward(m, teacher, x);
    REQUIRE(t.teacher_logits(0, 0) == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(t.teacher_logits(0, 1) == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(t.p_g(0, 0) == Catch::Approx(0.7311).margin(1e-4));
    REQUIRE(t.p_g(0, 1) == Catch::Approx(0.2689).margin(1e-4));
}

TEST_CASE("prototype teacher forward matches analytic softmax", "[model]") {
    // Frozen reference head outputs [0.5, 0.5] == M1 for any input, and M2 is
    // one-hot, so the logits are [0, -ln 2] and p_g = [2/3, 1/3].
    StudentModel m = make_model({4, 4, 3, 2}, 3);
    PrototypeTeacher proto;
    proto.prototypes = Tensor2(2, 2, {0.5, 0.5, 1.0, 0.0});
    proto.ref_Wh = Tensor2(3, 2);  // zeros
    proto.ref_bh = {0.0, 0.0};
    const Teacher teacher = proto;

    Rng rng(4);
    const Tensor2 x = random_batch(rng, 3, 4);
    const ForwardTrace t = forward(m, teacher, x);
    for (std::size_t i = 0; i < 3; ++i) {
        REQUIRE(t.p_g(i, 0) == Catch::Approx(2.0 / 3.0).margin(1e-12));
        REQUIRE(t.p_g(i, 1) == Catch::Approx(1.0 / 3.0).margin(1e-12));
    }
}

TEST_CASE("zero-weight head yields uniform predictions", "[model]") {
    StudentModel m = make_model({5, 6, 4, 3}, 5);
    for (double& v : m.Wh.data()) v = 0.0;
    m.bh.assign(m.bh.size(), 0.0);
    const Teacher teacher = make_anchor_teacher(6, 3, 4, 5.0);
    Rng rng(7);
    const Tensor2 x = random_batch(rng, 4, 5);
    const ForwardTrace t = forward(m, teacher, x);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            REQUIRE(t.p_h(i, j) == Catch::Approx(1.0 / 3.0).margin(1e-12));
}

TEST_CASE("forward outputs are valid distributions", "[model]") {
    const StudentModel m = make_model({6, 8, 5, 4}, 8);
    const Teacher teacher = make_anchor_teacher(9, 4, 5, 5.0);
    Rng rng(10);
    const Tensor2 x = random_batch(rng, 12, 6);
    const ForwardTrace t = forward(m, teacher, x);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        REQUIRE_NOTHROW(ProbDist(std::vector<double>(t.p_h.row(i).begin(), t.p_h.row(i).end())));
        REQUIRE_NOTHROW(ProbDist(std::vector<double>(t.p_g.row(i).begin(), t.p_g.row(i).end())));
    }
    REQUIRE_THROWS_AS(forward(m, teacher, Tensor2(2, 5)), ShapeError);
}

TEST_CASE("backward zero upstream gives zero gradients", "[model]") {
    const StudentModel m = make_model({5, 6, 4, 3}, 11);
    const Teacher teacher = make_anchor_teacher(12, 3, 4, 5.0);
    Rng rng(13);
    const Tensor2 x = random_batch(rng, 3, 5);
    const ForwardTrace t = forward(m, teacher, x);
    const Gradients g = backward(m, teacher, t, Tensor2(3, 3), Tensor2(3, 3));
    Gradients zero = zeros_like(m);
    auto gp = param_registry(const_cast<Gradients&>(g));
    auto zp = param_registry(zero);
    for (std::size_t t2 = 0; t2 < kRegistrySize; ++t2)
        REQUIRE(*gp[t2].data == *zp[t2].data);
}

TEST_CASE("backward is additive over samples", "[model]") {
    const StudentModel m = make_model({5, 6, 4, 3}, 14);
    const Teacher teacher = make_anchor_teacher(15, 3, 4, 5.0);
    Rng rng(16);
    const Tensor2 x = random_batch(rng, 2, 5);

    Tensor2 d_ph(2, 3);
    Tensor2 d_pg(2, 3);
    for (double& v : d_ph.data()) v = rng.next_gaussian();
    for (double& v : d_pg.data()) v = rng.next_gaussian();

    const ForwardTrace t_full = forward(m, teacher, x);
    const Gradients g_full = backward(m, teacher, t_full, d_ph, d_pg);

    Gradients g_sum = zeros_like(m);
    for (std::size_t i = 0; i < 2; ++i) {
        Tensor2 xi(1, 5);
        Tensor2 phi(1, 3);
        Tensor2 pgi(1, 3);
        for (std::size_t j = 0; j < 5; ++j) xi(0, j) = x(i, j);
        for (std::size_t j = 0; j < 3; ++j) {
            phi(0, j) = d_ph(i, j);
            pgi(0, j) = d_pg(i, j);
        }
        const ForwardTrace ti = forward(m, teacher, xi);
        accumulate(g_sum, backward(m, teacher, ti, phi, pgi));
    }
    auto a = param_registry(const_cast<Gradients&>(g_full));
    auto b = param_registry(g_sum);
    for (std::size_t t2 = 0; t2 < kRegistrySize; ++t2)
        for (std::size_t i = 0; i < a[t2].data->size(); ++i)
            REQUIRE(std::abs((*a[t2].data)[i] - (*b[t2].data)[i]) < 1e-10);
}

TEST_CASE("duplicating a sample doubles the summed gradient", "[model]") {
    const StudentModel m = make_model({4, 5, 3, 2}, 17);
    const Teacher teacher = make_anchor_teacher(18, 2, 3, 5.0);
    Rng rng(19);
    const Tensor2 x1 = random_batch(rng, 1, 4);
    Tensor2 x2(2, 4);
    for (std::size_t j = 0; j < 4; ++j) x2(0, j) = x2(1, j) = x1(0, j);

    Tensor2 d1(1, 2, {0.3, -0.7});
    Tensor2 z1(1, 2);
    Tensor2 d2(2, 2, {0.3, -0.7, 0.3, -0.7});
    Tensor2 z2(2, 2);

    const Gradients g1 = backward(m, teacher, forward(m, teacher, x1), d1, z1);
    const Gradients g2 = backward(m, teacher, forward(m, teacher, x2), d2, z2);
    auto a = param_registry(const_cast<Gradients&>(g1));
    auto b = param_registry(const_cast<Gradients&>(g2));
    for (std::size_t t2 = 0; t2 < kRegistrySize; ++t2)
        for (std::size_t i = 0; i < a[t2].data->size(); ++i)
            REQUIRE((*b[t2].data)[i] == Catch::Approx(2.0 * (*a[t2].data)[i]).margin(1e-12));
}

TEST_CASE("sgd step basics", "[model]") {
    StudentModel m = make_model({4, 5, 3, 2}, 20);
    const StudentModel before = m;
    Gradients g = zeros_like(m);
    for (double& v : g.W1.data()) v = 1.0;

    SgdOptimizer zero_lr({0.0, 0.0, 0.9, 0.0}, m);
    zero_lr.step(m, g);
    REQUIRE(m == before);

    // plain gradient step without momentum or decay
    SgdOptimizer plain({0.5, 0.5, 0.0, 0.0}, m);
    plain.step(m, g);
    for (std::size_t i = 0; i < m.W1.size(); ++i)
        REQUIRE(m.W1.data()[i] == Catch::Approx(before.W1.data()[i] - 0.5).margin(1e-15));

    // two momentum steps on a constant gradient: total delta = -lr g (1 + 1.9)
    StudentModel m2 = before;
    SgdOptimizer mom({0.1, 0.1, 0.9, 0.0}, m2);
    mom.step(m2, g);
    mom.step(m2, g);
    for (std::size_t i = 0; i < m2.W1.size(); ++i)
        REQUIRE(m2.W1.data()[i] ==
                Catch::Approx(before.W1.data()[i] - 0.1 * (1.0 + 1.9)).margin(1e-12));
}

TEST_CASE("flatten and unflatten round trip", "[model]") {
    const StudentModel m = make_model({6, 7, 4, 3}, 21);
    const std::vector<NamedVector> flat = flatten_params(m);
    REQUIRE(flat.size() == kRegistrySize);
    std::size_t total = 0;
    for (const auto& nv : flat) total += nv.values.size();
    REQUIRE(total == count_params(m, true));

    const StudentModel back = unflatten_params(m.dims(), flat);
    REQUIRE(back == m);

    std::vector<NamedVector> reordered = flat;
    std::swap(reordered[0], reordered[2]);
    REQUIRE_THROWS_AS(unflatten_params(m.dims(), reordered), FormatError);
}

TEST_CASE("wgt1 snapshot round trip", "[model]") {
    const StudentModel m = make_model({6, 7, 4, 3}, 22);
    const std::vector<std::uint8_t> bytes = write_wgt(m);
    const StudentModel back = read_wgt(bytes);
    REQUIRE(back == m);

    std::vector<std::uint8_t> bad = bytes;
    bad[0] = 0x00;
    REQUIRE_THROWS_AS(read_wgt(bad), FormatError);

    std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + 20);
    REQUIRE_THROWS_AS(read_wgt(truncated), FormatError);

    // f32 snapshots round trip through the narrower type
    const std::vector<std::uint8_t> bytes32 = write_wgt(m, WeightDtype::f32);
    const StudentModel back32 = read_wgt(bytes32);
    for (std::size_t i = 0; i < m.W1.size(); ++i)
        REQUIRE(back32.W1.data()[i] == static_cast<double>(static_cast<float>(m.W1.data()[i])));
}

TEST_CASE("teacher anchors never change during training", "[model]") {
    const Teacher teacher = make_anchor_teacher(23, 3, 4, 5.0);
    const Tensor2 anchors_before = std::get<AnchorTeacher>(teacher).anchors;

    StudentModel m = make_model({5, 6, 4, 3}, 24);
    SgdOptimizer opt({0.1, 0.1, 0.9, 5e-4}, m);
    Rng rng(25);
    for (int step = 0; step < 20; ++step) {
        const Tensor2 x = random_batch(rng, 4, 5);
        const ForwardTrace t = forward(m, teacher, x);
        Tensor2 d_ph(4, 3);
        for (double& v : d_ph.data()) v = rng.next_gaussian();
        const Gradients g = backward(m, teacher, t, d_ph, Tensor2(4, 3));
        opt.step(m, g);
    }
    REQUIRE(std::get<AnchorTeacher>(teacher).anchors == anchors_before);
}

TEST_CASE("grad_check on quadratic loss is exact", "[model]") {
    const StudentModel m = make_model({4, 5, 3, 2}, 26);
    const LossClosure quadratic = [](const StudentModel& model) {
        LossWithGrads out;
        out.grads = zeros_like(model);
        auto params = param_registry(const_cast<StudentModel&>(model));
        auto grads = param_registry(out.grads);
        for (std::size_t t = 0; t < kRegistrySize; ++t) {
            for (std::size_t i = 0; i < params[t].data->size(); ++i) {
                const double v = (*params[t].data)[i];
                out.value += 0.5 * v * v;
                (*grads[t].data)[i] = v;
            }
        }
        return out;
    };
    // central differences are exact for a quadratic at any h; a larger step
    // keeps float roundoff out of the 1e-9 budget
    const GradCheckReport r = grad_check(m, quadratic, 1e-2);
    REQUIRE(r.max_rel_err < 1e-9);
}

TEST_CASE("grad_check reports the offending parameter", "[model]") {
    const StudentModel m = make_model({4, 5, 3, 2}, 27);
    // deliberately wrong gradient on W2 only
    const LossClosure broken = [](const StudentModel& model) {
        LossWithGrads out;
        out.grads = zeros_like(model);
        for (std::size_t i = 0; i < model.W2.size(); ++i) {
            const double v = model.W2.data()[i];
            out.value += 0.5 * v * v;
            out.grads.W2.data()[i] = 3.0 * v;  // should be v
        }
        return out;
    };
    const GradCheckReport r = grad_check(m, broken, 1e-5);
    REQUIRE(r.max_rel_err > 0.1);
    REQUIRE(r.worst_param == "W2");
}

TEST_CASE("full loss gradients match finite differences", "[model]") {
    for (const GradCheckCase& c : default_gradcheck_cases()) {
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            const GradCheckReport r = c.run(seed);
            INFO(c.name << " seed " << seed << " worst " << r.worst_param);
            REQUIRE(r.max_rel_err < c.tolerance);
        }
    }
}
