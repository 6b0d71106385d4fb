// Command-line front door: dataset generation, training, residual
// packing/applying, deployment-cost accounting, gradient verification and
// report merging. stdout carries machine-readable summaries, diagnostics go
// to stderr. Exit codes: 0 success, 1 invalid input, 2 numeric failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "udaforge/udaforge.hpp"

namespace fs = std::filesystem;
using namespace udaforge;

namespace {

json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw FormatError(path + ": " + e.what());
    }
    return j;
}

SyntheticTaskSpec load_task_spec(const std::string& path) {
    const json j = load_json_file(path);
    return (j.contains("task") ? j.at("task") : j).get<SyntheticTaskSpec>();
}

void write_dataset_csv(const fs::path& path, const Dataset& ds) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << "label";
    for (std::size_t j = 0; j < ds.x.cols(); ++j) out << ",x" << j;
    out << "\n";
    for (std::size_t i = 0; i < ds.size(); ++i) {
        out << ds.y[i];
        for (std::size_t j = 0; j < ds.x.cols(); ++j)
            out << ',' << detail::fmt_double(ds.x(i, j));
        out << "\n";
    }
}

int cmd_gen_data(const std::string& spec_path, std::uint64_t seed, bool seed_given,
                 const std::string& out_dir) {
    SyntheticTaskSpec spec = load_task_spec(spec_path);
    const std::uint64_t effective_seed = seed_given ? seed : spec.seed;
    const GeneratedTask task = generate_task(spec, effective_seed);

    fs::create_directories(out_dir);
    write_dataset_csv(fs::path(out_dir) / "source.csv", task.source);
    write_dataset_csv(fs::path(out_dir) / "target.csv", task.target);

    json teacher;
    teacher["scale"] = task.teacher.scale;
    std::vector<std::vector<double>> anchors;
    for (std::size_t k = 0; k < task.teacher.anchors.rows(); ++k) {
        const auto row = task.teacher.anchors.row(k);
        anchors.emplace_back(row.begin(), row.end());
    }
    teacher["anchors"] = anchors;
    std::ofstream tf(fs::path(out_dir) / "teacher.json", std::ios::trunc);
    tf << teacher.dump(2) << "\n";

    json meta;
    meta["task"] = spec;
    meta["seed"] = effective_seed;
    std::ofstream mf(fs::path(out_dir) / "meta.json", std::ios::trunc);
    mf << meta.dump(2) << "\n";

    write_file((fs::path(out_dir) / "base.wgt").string(), write_wgt(task.init_model));

    std::cout << "out_dir," << out_dir << "\n"
              << "n_source," << task.source.size() << "\n"
              << "n_target," << task.target.size() << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, std::uint64_t seed, bool seed_given,
              const std::string& out_dir) {
    ExperimentConfig cfg = load_json_file(config_path).get<ExperimentConfig>();
    if (seed_given) cfg.seeds = {seed};
    cfg.validate();

    fs::create_directories(out_dir);
    const std::vector<TrainArtifacts> runs = run_all_seeds(cfg);

    std::vector<RunResult> results;
    for (std::size_t i = 0; i < runs.size(); ++i) {
        const TrainArtifacts& art = runs[i];
        const std::string tag = "seed" + std::to_string(cfg.seeds[i]);
        write_file((fs::path(out_dir) / ("base_" + tag + ".wgt")).string(),
                   write_wgt(art.base));
        write_file((fs::path(out_dir) / ("tuned_" + tag + ".wgt")).string(),
                   write_wgt(art.tuned));
        if (art.residual)
            write_file((fs::path(out_dir) / ("task_" + tag + ".rst")).string(),
                       pack(*art.residual));
        results.push_back(art.result);
    }
    emit_report(results, out_dir);

    for (const RunResult& r : results)
        std::cout << r.digest << ',' << r.method << ',' << r.seed << ','
                  << detail::fmt_double(r.final_target_acc) << ',' << r.dsp << "\n";
    std::cerr << "wrote " << results.size() << " runs to " << out_dir << "\n";
    return 0;
}

int cmd_rst_pack(const std::string& base_path, const std::string& tuned_path, double tau,
                 bool tau_given, const std::string& out_path) {
    const StudentModel base = read_wgt(read_file(base_path));
    const StudentModel tuned = read_wgt(read_file(tuned_path));
    const double tau_used = tau_given ? tau : std::numeric_limits<double>::quiet_NaN();
    const SparseResidual res = extract_residual(tuned, base, tau_used);
    write_file(out_path, pack(res));
    std::cout << "nnz," << res.nnz_total() << "\n"
              << "nnz_encoder," << res.nnz_encoder() << "\n"
              << "head_params," << res.head_param_count() << "\n";
    return 0;
}

int cmd_rst_apply(const std::string& base_path, const std::string& residual_path,
                  const std::string& out_path) {
    const StudentModel base = read_wgt(read_file(base_path));
    const SparseResidual res = unpack(read_file(residual_path));
    const StudentModel merged = apply_residual(base, res);
    write_file(out_path, write_wgt(merged));
    std::cout << "merged," << out_path << "\n";
    return 0;
}

int cmd_dsp(const std::string& runs_dir) {
    if (!fs::is_directory(runs_dir)) throw IoError(runs_dir + " is not a directory");
    std::vector<DspEntry> entries;
    std::map<std::string, fs::path> residuals;  // sorted for stable output
    std::map<std::string, fs::path> tuned;
    for (const auto& entry : fs::recursive_directory_iterator(runs_dir)) {
        if (!entry.is_regular_file()) continue;
        const fs::path p = entry.path();
        if (p.extension() == ".rst") residuals[p.stem().string()] = p;
        const std::string stem = p.stem().string();
        if (p.extension() == ".wgt" && stem.rfind("tuned", 0) == 0) tuned[stem] = p;
    }
    for (const auto& [stem, path] : residuals) {
        const SparseResidual res = unpack(read_file(path.string()));
        entries.push_back(dsp_entry_for_residual(stem, res, fs::file_size(path)));
    }
    for (const auto& [stem, path] : tuned) {
        // tuned_<tag>.wgt counts as a full fine-tuned task unless task_<tag>.rst exists
        const std::string tag = stem.size() > 6 ? stem.substr(6) : "";
        if (residuals.count("task_" + tag)) continue;
        const StudentModel m = read_wgt(read_file(path.string()));
        entries.push_back(dsp_entry_for_full_model(stem, m, fs::file_size(path)));
    }
    const DspReport report = dsp(std::move(entries));
    std::cout << "task,residual_nnz,head_params,full_params,stored_params\n";
    for (const DspEntry& e : report.tasks)
        std::cout << e.task << ',' << e.residual_nnz << ',' << e.head_params << ','
                  << e.full_params << ',' << e.stored_params() << "\n";
    std::cout << "total," << report.total() << "\n";
    return 0;
}

int cmd_gradcheck(std::size_t seeds) {
    const std::vector<GradCheckSummary> summaries = run_gradcheck_suite(seeds);
    bool all_passed = true;
    double worst = 0.0;
    std::cout << "check,max_rel_err,status\n";
    for (const GradCheckSummary& s : summaries) {
        std::cout << s.name << ',' << detail::fmt_double(s.max_rel_err) << ','
                  << (s.passed ? "pass" : "fail") << "\n";
        all_passed = all_passed && s.passed;
        worst = std::max(worst, s.max_rel_err);
    }
    std::cout << "max," << detail::fmt_double(worst) << "\n";
    if (!all_passed) {
        std::cerr << "gradient check exceeded tolerance\n";
        return 2;
    }
    return 0;
}

int cmd_report(const std::string& runs_dir, const std::string& format) {
    if (format != "csv" && format != "jsonl") throw ConfigError("format must be csv or jsonl");
    std::vector<RunResult> all;
    std::vector<fs::path> report_dirs;
    if (fs::exists(fs::path(runs_dir) / "results.jsonl")) report_dirs.push_back(runs_dir);
    for (const auto& entry : fs::recursive_directory_iterator(runs_dir))
        if (entry.is_regular_file() && entry.path().filename() == "results.jsonl" &&
            entry.path().parent_path() != fs::path(runs_dir))
            report_dirs.push_back(entry.path().parent_path());
    for (const fs::path& dir : report_dirs) {
        std::vector<RunResult> part = parse_report(dir);
        all.insert(all.end(), part.begin(), part.end());
    }
    if (all.empty()) throw IoError("no results.jsonl under " + runs_dir);
    std::sort(all.begin(), all.end(),
              [](const RunResult& a, const RunResult& b) { return a.digest < b.digest; });
    if (format == "jsonl") {
        for (const RunResult& r : all) std::cout << result_to_json(r).dump() << "\n";
    } else {
        std::cout << kResultsCsvHeader << "\n";
        for (const RunResult& r : all)
            std::cout << r.digest << ',' << r.method << ',' << r.seed << ','
                      << detail::fmt_double(r.final_source_acc) << ','
                      << detail::fmt_double(r.final_target_acc) << ','
                      << detail::fmt_double(r.teacher_zero_shot_acc) << ',' << r.dsp << ','
                      << detail::fmt_double(r.wall_time_s) << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"udaforge: cross-modal distillation UDA with residual sparse deployment"};
    app.require_subcommand(1);

    std::string spec_path, config_path, out_dir, base_path, tuned_path, residual_path, out_path;
    std::string runs_dir, format = "csv";
    std::uint64_t seed = 0;
    double tau = 0.0;
    std::size_t gradcheck_seeds = 20;

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic transfer task");
    gen->add_option("--spec", spec_path, "task spec JSON")->required();
    auto* gen_seed = gen->add_option("--seed", seed, "run seed (default: spec seed)");
    gen->add_option("--out", out_dir, "output directory")->required();

    auto* train = app.add_subcommand("train", "Train one method on a task");
    train->add_option("--config", config_path, "experiment config JSON")->required();
    auto* train_seed = train->add_option("--seed", seed, "single seed (default: config seeds)");
    train->add_option("--out", out_dir, "output directory")->required();

    auto* rst_pack = app.add_subcommand("rst-pack", "Extract a sparse residual from snapshots");
    rst_pack->add_option("--base", base_path, "base WGT1 snapshot")->required();
    rst_pack->add_option("--tuned", tuned_path, "tuned WGT1 snapshot")->required();
    auto* tau_opt = rst_pack->add_option("--tau", tau, "threshold to record as metadata");
    rst_pack->add_option("--out", out_path, "output RST1 file")->required();

    auto* rst_apply = app.add_subcommand("rst-apply", "Apply a residual to a base snapshot");
    rst_apply->add_option("--base", base_path, "base WGT1 snapshot")->required();
    rst_apply->add_option("--residual", residual_path, "RST1 file")->required();
    rst_apply->add_option("--out", out_path, "merged WGT1 output")->required();

    auto* dsp_cmd = app.add_subcommand("dsp", "Deployment parameter accounting over a run dir");
    dsp_cmd->add_option("--runs", runs_dir, "run directory")->required();

    auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
    gradcheck_cmd->add_option("--seeds", gradcheck_seeds, "random batches per check");

    auto* report = app.add_subcommand("report", "Merge run reports");
    report->add_option("--runs", runs_dir, "directory containing run outputs")->required();
    report->add_option("--format", format, "csv or jsonl");

    try {
        app.parse(argc, argv);
        if (gen->parsed())
            return cmd_gen_data(spec_path, seed, !gen_seed->empty(), out_dir);
        if (train->parsed()) return cmd_train(config_path, seed, !train_seed->empty(), out_dir);
        if (rst_pack->parsed())
            return cmd_rst_pack(base_path, tuned_path, tau, !tau_opt->empty(), out_path);
        if (rst_apply->parsed()) return cmd_rst_apply(base_path, residual_path, out_path);
        if (dsp_cmd->parsed()) return cmd_dsp(runs_dir);
        if (gradcheck_cmd->parsed()) return cmd_gradcheck(gradcheck_seeds);
        if (report->parsed()) return cmd_report(runs_dir, format);
        return 1;
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? 0 : 1;
    } catch (const NumericError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }
}
