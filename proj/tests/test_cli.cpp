#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "udaforge/bench.hpp"

using namespace udaforge;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

CliResult run_cli(const std::string& args, const fs::path& workdir) {
    const fs::path out_file = workdir / "stdout.txt";
    const fs::path err_file = workdir / "stderr.txt";
    const std::string cmd = std::string(UDAFORGE_CLI_PATH) + " " + args + " > " +
                            out_file.string() + " 2> " + err_file.string();
    const int raw = std::system(cmd.c_str());
    CliResult r;
    r.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    const auto slurp = [](const fs::path& p) {
        std::ifstream in(p);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    r.out = slurp(out_file);
    r.err = slurp(err_file);
    return r;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

ExperimentConfig tiny_config(Method method) {
    ExperimentConfig cfg = reference_config(method);
    cfg.task.n_source = 90;
    cfg.task.n_target = 90;
    cfg.cmkd.max_iters = 30;
    cfg.eval_every = 15;
    cfg.seeds = {0};
    return cfg;
}

void write_config(const fs::path& path, const ExperimentConfig& cfg) {
    std::ofstream out(path);
    out << json(cfg).dump(2) << "\n";
}

}  // namespace

TEST_CASE("gen-data writes deterministic datasets", "[cli]") {
    const fs::path dir = fresh_dir("udaforge_cli_gen");
    write_config(dir / "config.json", tiny_config(Method::cmkd));

    const CliResult first = run_cli("gen-data --spec " + (dir / "config.json").string() +
                                        " --seed 1 --out " + (dir / "a").string(),
                                    dir);
    INFO(first.err);
    REQUIRE(first.exit_code == 0);
    REQUIRE(fs::exists(dir / "a" / "source.csv"));
    REQUIRE(fs::exists(dir / "a" / "target.csv"));
    REQUIRE(fs::exists(dir / "a" / "teacher.json"));
    REQUIRE(fs::exists(dir / "a" / "base.wgt"));

    const CliResult second = run_cli("gen-data --spec " + (dir / "config.json").string() +
                                         " --seed 1 --out " + (dir / "b").string(),
                                     dir);
    REQUIRE(second.exit_code == 0);
    for (const char* name : {"source.csv", "target.csv", "teacher.json", "base.wgt"}) {
        const auto a = read_file((dir / "a" / name).string());
        const auto b = read_file((dir / "b" / name).string());
        REQUIRE(a == b);
    }
}

TEST_CASE("gen-data without --spec fails with usage", "[cli]") {
    const fs::path dir = fresh_dir("udaforge_cli_usage");
    const CliResult r = run_cli("gen-data --out " + dir.string(), dir);
    REQUIRE(r.exit_code == 1);
    REQUIRE(r.err.find("--spec") != std::string::npos);
}

TEST_CASE("train writes snapshots and reproducible reports", "[cli]") {
    const fs::path dir = fresh_dir("udaforge_cli_train");
    write_config(dir / "config.json", tiny_config(Method::cmkd_rst));

    const std::string args = "train --config " + (dir / "config.json").string() + " --out ";
    const CliResult first = run_cli(args + (dir / "run1").string(), dir);
    INFO(first.err);
    REQUIRE(first.exit_code == 0);
    REQUIRE(fs::exists(dir / "run1" / "base_seed0.wgt"));
    REQUIRE(fs::exists(dir / "run1" / "tuned_seed0.wgt"));
    REQUIRE(fs::exists(dir / "run1" / "task_seed0.rst"));
    REQUIRE(fs::exists(dir / "run1" / "results.jsonl"));

    const CliResult second = run_cli(args + (dir / "run2").string(), dir);
    REQUIRE(second.exit_code == 0);
    REQUIRE(read_file((dir / "run1" / "results.jsonl").string()) ==
            read_file((dir / "run2" / "results.jsonl").string()));

    // exactly one residual file
    std::size_t rst_files = 0;
    for (const auto& e : fs::directory_iterator(dir / "run1"))
        if (e.path().extension() == ".rst") ++rst_files;
    REQUIRE(rst_files == 1);
}

TEST_CASE("train rejects invalid weights", "[cli]") {
    const fs::path dir = fresh_dir("udaforge_cli_badcfg");
    ExperimentConfig cfg = tiny_config(Method::cmkd);
    write_config(dir / "config.json", cfg);
    // negative lambda2 directly in the json
    json j = json::parse(std::ifstream(dir / "config.json"));
    j["cmkd"]["lambda2"] = -0.5;
    std::ofstream(dir / "bad.json") << j.dump();

    const CliResult r = run_cli("train --config " + (dir / "bad.json").string() + " --out " +
                                    (dir / "out").string(),
                                dir);
    REQUIRE(r.exit_code == 1);
}

TEST_CASE("diverging training exits with the numeric error code", "[cli]") {
    const fs::path dir = fresh_dir("udaforge_cli_diverge");
    ExperimentConfig cfg = tiny_config(Method::cmkd);
    cfg.optimizer.lr_encoder = 1e155;  // weights overflow within a few steps
    cfg.optimizer.lr_head = 1e155;
    write_config(dir / "config.json", cfg);
    const CliResult r = run_cli("train --config " + (dir / "config.json").string() + " --out " +
                                    (dir / "out").string(),
                                dir);
    REQUIRE(r.exit_code == 2);
    REQUIRE_FALSE(r.err.empty());
}

TEST_CASE("rst pack and apply reproduce the tuned snapshot bitwise", "[cli]") {
    const fs::path dir = fresh_dir("udaforge_cli_rst");
    write_config(dir / "config.json", tiny_config(Method::cmkd_rst));
    REQUIRE(run_cli("train --config " + (dir / "config.json").string() + " --out " +
                        (dir / "run").string(),
                    dir)
                .exit_code == 0);

    const std::string base = (dir / "run" / "base_seed0.wgt").string();
    const std::string tuned = (dir / "run" / "tuned_seed0.wgt").string();
    const std::string packed = (dir / "repacked.rst").string();
    const std::string merged = (dir / "merged.wgt").string();

    const CliResult packed_r =
        run_cli("rst-pack --base " + base + " --tuned " + tuned + " --tau 1e-3 --out " + packed,
                dir);
    INFO(packed_r.err);
    REQUIRE(packed_r.exit_code == 0);

    const CliResult applied =
        run_cli("rst-apply --base " + base + " --residual " + packed + " --out " + merged, dir);
    REQUIRE(applied.exit_code == 0);
    REQUIRE(read_file(merged) == read_file(tuned));

    // applying against the wrong base is refused
    const CliResult wrong =
        run_cli("rst-apply --base " + tuned + " --residual " + packed + " --out " + merged, dir);
    REQUIRE(wrong.exit_code == 1);
    REQUIRE(wrong.err.find("base model mismatch") != std::string::npos);
}

TEST_CASE("dsp totals constructed fixtures", "[cli]") {
    const fs::path dir = fresh_dir("udaforge_cli_dsp");
    // build two residuals with encoder nnz 10 and 20 and a 6-parameter head
    Rng rng(1);
    const ModelDims dims{4, 4, 1, 3};  // head params = 1*3 + 3 = 6
    const StudentModel base = init_student(dims, rng);
    StudentModel t1 = base;
    for (std::size_t i = 0; i < 10; ++i) t1.W1.data()[i] += 1.0;
    StudentModel t2 = base;
    for (std::size_t i = 0; i < 16; ++i) t2.W1.data()[i] += 1.0;
    for (std::size_t i = 0; i < 4; ++i) t2.b1[i] += 1.0;
    write_file((dir / "task_a.rst").string(), pack(extract_residual(t1, base)));
    write_file((dir / "task_b.rst").string(), pack(extract_residual(t2, base)));

    const CliResult r = run_cli("dsp --runs " + dir.string(), dir);
    INFO(r.out);
    REQUIRE(r.exit_code == 0);
    REQUIRE(r.out.find("total,42") != std::string::npos);
}

TEST_CASE("gradcheck passes and reports the max error", "[cli]") {
    const fs::path dir = fresh_dir("udaforge_cli_gradcheck");
    const CliResult r = run_cli("gradcheck --seeds 3", dir);
    INFO(r.out);
    REQUIRE(r.exit_code == 0);
    REQUIRE(r.out.find("max,") != std::string::npos);
    REQUIRE(r.out.find("fail") == std::string::npos);
}

TEST_CASE("report merges run directories", "[cli]") {
    const fs::path dir = fresh_dir("udaforge_cli_report");
    write_config(dir / "config.json", tiny_config(Method::cmkd));
    REQUIRE(run_cli("train --config " + (dir / "config.json").string() + " --out " +
                        (dir / "runs" / "a").string(),
                    dir)
                .exit_code == 0);
    write_config(dir / "config2.json", tiny_config(Method::baseline));
    REQUIRE(run_cli("train --config " + (dir / "config2.json").string() + " --out " +
                        (dir / "runs" / "b").string(),
                    dir)
                .exit_code == 0);

    const CliResult csv = run_cli("report --runs " + (dir / "runs").string() + " --format csv", dir);
    REQUIRE(csv.exit_code == 0);
    REQUIRE(csv.out.find("cmkd") != std::string::npos);
    REQUIRE(csv.out.find("baseline") != std::string::npos);

    const CliResult jsonl =
        run_cli("report --runs " + (dir / "runs").string() + " --format jsonl", dir);
    REQUIRE(jsonl.exit_code == 0);
    std::size_t lines = 0;
    std::stringstream ss(jsonl.out);
    std::string line;
    while (std::getline(ss, line))
        if (!line.empty()) ++lines;
    REQUIRE(lines == 2);
}
