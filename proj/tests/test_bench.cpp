#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "udaforge/bench.hpp"

using namespace udaforge;
namespace fs = std::filesystem;

namespace {

// A fast variant of the reference task for unit tests.
ExperimentConfig tiny_config(Method method) {
    ExperimentConfig cfg = reference_config(method);
    cfg.task.n_source = 90;
    cfg.task.n_target = 90;
    cfg.cmkd.max_iters = 40;
    cfg.eval_every = 20;
    cfg.seeds = {0};
    return cfg;
}

}  // namespace

TEST_CASE("task generation is deterministic", "[bench]") {
    const SyntheticTaskSpec spec = reference_task_spec();
    const GeneratedTask a = generate_task(spec, 3);
    const GeneratedTask b = generate_task(spec, 3);
    REQUIRE(a.source.x == b.source.x);
    REQUIRE(a.source.y == b.source.y);
    REQUIRE(a.target.x == b.target.x);
    REQUIRE(a.teacher.anchors == b.teacher.anchors);
    REQUIRE(a.init_model == b.init_model);

    const GeneratedTask c = generate_task(spec, 4);
    REQUIRE(a.source.x != c.source.x);
}

TEST_CASE("noiseless aligned task gives a perfect teacher", "[bench]") {
    SyntheticTaskSpec spec = reference_task_spec();
    spec.source_noise = 0.0;
    spec.target_noise = 0.0;
    spec.shift = ShiftSpec{};  // no rotation, unit scale, no translation
    spec.teacher.kappa = 0.0;
    const GeneratedTask task = generate_task(spec, 0);
    const Teacher teacher = task.teacher;
    REQUIRE(teacher_accuracy(task.init_model, teacher, task.target) == 1.0);
}

TEST_CASE("permuted teacher scores at or below chance on separated data", "[bench]") {
    SyntheticTaskSpec spec = reference_task_spec();
    spec.source_noise = 0.0;
    spec.target_noise = 0.0;
    spec.shift = ShiftSpec{};
    spec.teacher.kappa = 0.0;
    spec.teacher.permuted = true;
    const GeneratedTask task = generate_task(spec, 0);
    const Teacher teacher = task.teacher;
    REQUIRE(teacher_accuracy(task.init_model, teacher, task.target) <=
            1.0 / static_cast<double>(spec.classes));
}

TEST_CASE("teacher anchors never depend on target sampling", "[bench]") {
    SyntheticTaskSpec a = reference_task_spec();
    SyntheticTaskSpec b = a;
    b.target_noise = 3.0;  // very different target draw
    const GeneratedTask ta = generate_task(a, 7);
    const GeneratedTask tb = generate_task(b, 7);
    REQUIRE(ta.teacher.anchors == tb.teacher.anchors);
    REQUIRE(ta.source.x == tb.source.x);
}

TEST_CASE("evaluate basics", "[bench]") {
    SyntheticTaskSpec spec = reference_task_spec();
    spec.n_source = 30;
    spec.n_target = 30;
    const GeneratedTask task = generate_task(spec, 1);

    // uniform-output model predicts class 0 everywhere; balanced labels
    StudentModel uniform = task.init_model;
    for (double& v : uniform.Wh.data()) v = 0.0;
    uniform.bh.assign(uniform.bh.size(), 0.0);
    REQUIRE(evaluate(uniform, task.source) ==
            Catch::Approx(1.0 / static_cast<double>(spec.classes)).margin(1e-12));

    // side-effect free
    const double once = evaluate(task.init_model, task.target);
    const double twice = evaluate(task.init_model, task.target);
    REQUIRE(once == twice);

    REQUIRE_THROWS_AS(evaluate(uniform, Dataset{Tensor2(0, spec.input_dim), {}}), DomainError);
}

TEST_CASE("baseline equals cmkd with zero weights bitwise", "[bench]") {
    ExperimentConfig baseline = tiny_config(Method::baseline);
    ExperimentConfig zeroed = tiny_config(Method::cmkd);
    zeroed.cmkd.beta1 = 0.0;
    zeroed.cmkd.lambda2 = 0.0;
    zeroed.cmkd.beta3 = 0.0;

    const TrainArtifacts a = run_experiment(baseline, 0);
    const TrainArtifacts b = run_experiment(zeroed, 0);
    REQUIRE(a.tuned == b.tuned);
    REQUIRE(write_wgt(a.tuned) == write_wgt(b.tuned));
    REQUIRE(a.result.final_target_acc == b.result.final_target_acc);
    REQUIRE(a.result.final_source_acc == b.result.final_source_acc);
    REQUIRE(a.result.curve.size() == b.result.curve.size());
    for (std::size_t i = 0; i < a.result.curve.size(); ++i) {
        REQUIRE(a.result.curve[i].l_cls == b.result.curve[i].l_cls);
        REQUIRE(a.result.curve[i].target_acc == b.result.curve[i].target_acc);
    }
}

TEST_CASE("experiments are reproducible by seed", "[bench]") {
    const ExperimentConfig cfg = tiny_config(Method::cmkd);
    const TrainArtifacts a = run_experiment(cfg, 5);
    const TrainArtifacts b = run_experiment(cfg, 5);
    REQUIRE(a.tuned == b.tuned);
    REQUIRE(a.result.final_target_acc == b.result.final_target_acc);
    REQUIRE(a.result.digest == b.result.digest);

    const TrainArtifacts c = run_experiment(cfg, 6);
    REQUIRE(c.result.digest != a.result.digest);
}

TEST_CASE("rst run produces a bit-exact deployable residual", "[bench]") {
    ExperimentConfig cfg = tiny_config(Method::cmkd_rst);
    cfg.rst.mode = RstMode::constant_tau;
    cfg.rst.tau = 1e-3;
    const TrainArtifacts art = run_experiment(cfg, 0);
    REQUIRE(art.residual.has_value());

    const StudentModel merged = apply_residual(art.base, *art.residual);
    REQUIRE(write_wgt(merged) == write_wgt(art.tuned));

    // recorded accuracy matches a fresh evaluation of the merged model
    const GeneratedTask task = generate_task(cfg.task, 0);
    REQUIRE(evaluate(merged, task.target) == art.result.final_target_acc);

    // pack/unpack round trip through bytes
    const SparseResidual back = unpack(pack(*art.residual));
    REQUIRE(write_wgt(apply_residual(art.base, back)) == write_wgt(art.tuned));

    REQUIRE(art.result.dsp == art.residual->nnz_encoder() + art.tuned.Wh.size() +
                                  art.tuned.bh.size());
}

TEST_CASE("rst ramp and top-fraction modes train and deploy bit-exactly", "[bench]") {
    ExperimentConfig ramp = tiny_config(Method::cmkd_rst);
    ramp.rst.mode = RstMode::ramp_tau;
    ramp.rst.tau_start = 1e-4;
    ramp.rst.tau_end = 5e-3;
    const TrainArtifacts ra = run_experiment(ramp, 0);
    REQUIRE(ra.residual.has_value());
    REQUIRE(ra.residual->tau_used == Catch::Approx(5e-3).margin(1e-12));  // final ramp value
    REQUIRE(write_wgt(apply_residual(ra.base, *ra.residual)) == write_wgt(ra.tuned));

    ExperimentConfig frac = tiny_config(Method::cmkd_rst);
    frac.rst.mode = RstMode::top_fraction;
    frac.rst.r_start = 100.0;
    frac.rst.r_end = 2.0;
    const TrainArtifacts fa = run_experiment(frac, 0);
    REQUIRE(fa.residual.has_value());
    REQUIRE(std::isnan(fa.residual->tau_used));
    REQUIRE(std::isnan(unpack(pack(*fa.residual)).tau_used));
    REQUIRE(write_wgt(apply_residual(fa.base, *fa.residual)) == write_wgt(fa.tuned));
    // final keep fraction bounds the encoder nonzeros
    const std::size_t encoder = count_params(fa.base, false);
    REQUIRE(fa.residual->nnz_encoder() <=
            static_cast<std::size_t>(std::ceil(0.02 * static_cast<double>(encoder))));
}

TEST_CASE("fixmatch with zero weight is bitwise identical to cmkd", "[bench]") {
    const ExperimentConfig cmkd_cfg = tiny_config(Method::cmkd);
    ExperimentConfig fm_cfg = tiny_config(Method::cmkd_fixmatch);
    fm_cfg.fixmatch.lambda_fm = 0.0;

    const TrainArtifacts a = run_experiment(cmkd_cfg, 2);
    const TrainArtifacts b = run_experiment(fm_cfg, 2);
    REQUIRE(write_wgt(a.tuned) == write_wgt(b.tuned));
    REQUIRE(a.result.final_target_acc == b.result.final_target_acc);
}

TEST_CASE("peft baselines freeze what they claim to freeze", "[bench]") {
    ExperimentConfig lp = tiny_config(Method::linear_probe);
    const TrainArtifacts probe = run_experiment(lp, 0);
    REQUIRE(probe.tuned.W1 == probe.base.W1);
    REQUIRE(probe.tuned.W2 == probe.base.W2);
    REQUIRE(probe.tuned.b1 == probe.base.b1);
    REQUIRE(probe.tuned.Wh != probe.base.Wh);
    REQUIRE(probe.result.dsp == probe.tuned.Wh.size() + probe.tuned.bh.size());

    ExperimentConfig bf = tiny_config(Method::bitfit);
    const TrainArtifacts bitfit = run_experiment(bf, 0);
    REQUIRE(bitfit.tuned.W1 == bitfit.base.W1);
    REQUIRE(bitfit.tuned.W2 == bitfit.base.W2);
    REQUIRE(bitfit.tuned.Wh == bitfit.base.Wh);
    REQUIRE(bitfit.tuned.b1 != bitfit.base.b1);

    ExperimentConfig lora = tiny_config(Method::lora);
    lora.lora_rank = 2;
    const TrainArtifacts lr = run_experiment(lora, 0);
    REQUIRE(lr.tuned.b1 == lr.base.b1);   // encoder biases frozen
    REQUIRE(lr.tuned.W1 != lr.base.W1);   // low-rank delta applied
    const std::size_t adapter_params = 2 * (lora.task.input_dim + lora.task.hidden_dim) +
                                       2 * (lora.task.hidden_dim + lora.task.feature_dim);
    REQUIRE(lr.result.dsp ==
            adapter_params + lr.tuned.Wh.size() + lr.tuned.bh.size());
}

TEST_CASE("divergent runs abort with the last finite metrics", "[bench]") {
    ExperimentConfig cfg = tiny_config(Method::cmkd);
    cfg.optimizer.lr_encoder = 1e155;
    cfg.optimizer.lr_head = 1e155;
    try {
        run_experiment(cfg, 0);
        FAIL("expected a numeric abort");
    } catch (const NumericError& e) {
        const std::string what = e.what();
        REQUIRE(what.find("last finite metrics") != std::string::npos);
        REQUIRE(what.find("L_total") != std::string::npos);
    }
}

TEST_CASE("zero shot method trains nothing", "[bench]") {
    const ExperimentConfig cfg = tiny_config(Method::zero_shot);
    const TrainArtifacts art = run_experiment(cfg, 0);
    REQUIRE(art.tuned == art.base);
    REQUIRE(art.result.dsp == 0);
    REQUIRE(art.result.final_target_acc == art.result.teacher_zero_shot_acc);
}

TEST_CASE("config json round trip", "[bench]") {
    ExperimentConfig cfg = tiny_config(Method::cmkd_rst);
    cfg.rst.mode = RstMode::ramp_tau;
    cfg.pda.enabled = true;
    cfg.cmkd.alpha_mode = AlphaMode::ge;
    const json j = cfg;
    const ExperimentConfig back = j.get<ExperimentConfig>();
    const json j2 = back;
    REQUIRE(j == j2);
    REQUIRE(back.rst.mode == RstMode::ramp_tau);
    REQUIRE(back.pda.enabled);

    REQUIRE(config_digest(cfg, 0) == config_digest(cfg, 0));
    REQUIRE(config_digest(cfg, 0) != config_digest(cfg, 1));

    json bad = j;
    bad["method"] = "nonsense";
    REQUIRE_THROWS_AS(bad.get<ExperimentConfig>(), ConfigError);
}

TEST_CASE("report emission and parsing round trip", "[bench]") {
    const ExperimentConfig cfg = tiny_config(Method::cmkd);
    std::vector<RunResult> results;
    results.push_back(run_experiment(cfg, 0).result);
    results.push_back(run_experiment(cfg, 1).result);

    const fs::path dir = fs::temp_directory_path() / "udaforge_report_test";
    fs::remove_all(dir);
    emit_report(results, dir);

    REQUIRE(fs::exists(dir / "results.csv"));
    REQUIRE(fs::exists(dir / "results.jsonl"));
    REQUIRE(fs::exists(dir / "curves.csv"));

    // line count matches result count
    std::ifstream jsonl(dir / "results.jsonl");
    std::size_t lines = 0;
    std::string line;
    while (std::getline(jsonl, line))
        if (!line.empty()) ++lines;
    REQUIRE(lines == results.size());

    // header is the documented column order
    std::ifstream csv(dir / "results.csv");
    std::getline(csv, line);
    REQUIRE(line == kResultsCsvHeader);

    std::vector<RunResult> parsed = parse_report(dir);
    REQUIRE(parsed.size() == results.size());
    std::sort(results.begin(), results.end(),
              [](const RunResult& a, const RunResult& b) { return a.digest < b.digest; });
    for (std::size_t i = 0; i < results.size(); ++i) {
        REQUIRE(parsed[i].digest == results[i].digest);
        REQUIRE(parsed[i].method == results[i].method);
        REQUIRE(parsed[i].seed == results[i].seed);
        REQUIRE(parsed[i].final_source_acc == results[i].final_source_acc);
        REQUIRE(parsed[i].final_target_acc == results[i].final_target_acc);
        REQUIRE(parsed[i].teacher_zero_shot_acc == results[i].teacher_zero_shot_acc);
        REQUIRE(parsed[i].dsp == results[i].dsp);
        REQUIRE(parsed[i].wall_time_s == results[i].wall_time_s);
        REQUIRE(parsed[i].curve.size() == results[i].curve.size());
        for (std::size_t k = 0; k < parsed[i].curve.size(); ++k) {
            REQUIRE(parsed[i].curve[k].iter == results[i].curve[k].iter);
            REQUIRE(parsed[i].curve[k].l_cls == results[i].curve[k].l_cls);
            REQUIRE(parsed[i].curve[k].l_task == results[i].curve[k].l_task);
            REQUIRE(parsed[i].curve[k].l_distill == results[i].curve[k].l_distill);
            REQUIRE(parsed[i].curve[k].l_reg == results[i].curve[k].l_reg);
            REQUIRE(parsed[i].curve[k].mean_alpha == results[i].curve[k].mean_alpha);
            REQUIRE(parsed[i].curve[k].target_acc == results[i].curve[k].target_acc);
        }
    }
    fs::remove_all(dir);
}

TEST_CASE("rerun emits byte-identical results.jsonl", "[bench]") {
    const ExperimentConfig cfg = tiny_config(Method::cmkd);
    const fs::path dir_a = fs::temp_directory_path() / "udaforge_rerun_a";
    const fs::path dir_b = fs::temp_directory_path() / "udaforge_rerun_b";
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);

    emit_report({run_experiment(cfg, 0).result}, dir_a);
    emit_report({run_experiment(cfg, 0).result}, dir_b);

    const std::vector<std::uint8_t> a = read_file((dir_a / "results.jsonl").string());
    const std::vector<std::uint8_t> b = read_file((dir_b / "results.jsonl").string());
    REQUIRE(a == b);
    const std::vector<std::uint8_t> ca = read_file((dir_a / "curves.csv").string());
    const std::vector<std::uint8_t> cb = read_file((dir_b / "curves.csv").string());
    REQUIRE(ca == cb);
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}

TEST_CASE("curve iterations are strictly increasing", "[bench]") {
    const ExperimentConfig cfg = tiny_config(Method::cmkd);
    const TrainArtifacts art = run_experiment(cfg, 0);
    REQUIRE(art.result.curve.size() >= 2);
    for (std::size_t i = 1; i < art.result.curve.size(); ++i)
        REQUIRE(art.result.curve[i].iter > art.result.curve[i - 1].iter);
    for (const CurvePoint& p : art.result.curve) {
        REQUIRE(p.target_acc >= 0.0);
        REQUIRE(p.target_acc <= 1.0);
    }
}

TEST_CASE("pda masked run never predicts masked classes", "[bench]") {
    ExperimentConfig cfg = tiny_config(Method::cmkd);
    cfg.pda.enabled = true;
    cfg.pda.threshold = 1;  // mild masking; refreshed per epoch
    const TrainArtifacts art = run_experiment(cfg, 0);
    REQUIRE(std::isfinite(art.result.final_target_acc));
}

TEST_CASE("consistency signal is higher under an aligned teacher", "[bench]") {
    // mean alpha at the first post-warmup evaluation: once the student has
    // seen some data, agreement with exact anchors beats deranged anchors
    const auto first_eval_alpha = [](bool permuted) {
        ExperimentConfig cfg = reference_config(Method::cmkd);
        cfg.task.shift = ShiftSpec{};
        cfg.task.teacher.kappa = 0.0;
        cfg.task.teacher.permuted = permuted;
        cfg.cmkd.max_iters = 60;
        cfg.eval_every = 50;
        const TrainArtifacts art = run_experiment(cfg, 0);
        REQUIRE(art.result.curve.size() >= 2);
        return art.result.curve[1].mean_alpha;  // iteration 50
    };
    REQUIRE(first_eval_alpha(false) > first_eval_alpha(true));
}

TEST_CASE("fixmatch presets carry the published weights", "[bench]") {
    const FixMatchConfig visda = fixmatch_preset("visda");
    REQUIRE(visda.lambda_fm == 2.0);
    REQUIRE(visda.tau_fm == 0.80);
    const FixMatchConfig dn = fixmatch_preset("domainnet");
    REQUIRE(dn.lambda_fm == 0.1);
    REQUIRE(dn.tau_fm == 0.95);
    REQUIRE_THROWS_AS(fixmatch_preset("nonsense"), ConfigError);

    json j;
    j["preset"] = "visda";
    const FixMatchConfig parsed = j.get<FixMatchConfig>();
    REQUIRE(parsed.lambda_fm == 2.0);
    json j2;
    j2["preset"] = "visda";
    j2["lambda_fm"] = 1.5;  // explicit keys override the preset
    REQUIRE(j2.get<FixMatchConfig>().lambda_fm == 1.5);
    REQUIRE(j2.get<FixMatchConfig>().tau_fm == 0.80);
}

TEST_CASE("run_all_seeds matches per-seed runs", "[bench]") {
    ExperimentConfig cfg = tiny_config(Method::cmkd);
    cfg.seeds = {0, 1, 2};
    const std::vector<TrainArtifacts> runs = run_all_seeds(cfg);
    REQUIRE(runs.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        const TrainArtifacts single = run_experiment(cfg, cfg.seeds[i]);
        REQUIRE(runs[i].tuned == single.tuned);
        REQUIRE(runs[i].result.final_target_acc == single.result.final_target_acc);
    }
}
