// SPDX-License-Identifier: Apache-2.0
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cpolab/checkpoint.hpp"
#include "cpolab/cli.hpp"
#include "cpolab/corpus.hpp"
#include "cpolab/trainer.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace cpolab;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = CPOLAB_FIXTURES;

struct Run {
    int code;
    std::string out;
    std::string err;
};

Run cpolab_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "cpolab");
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("cpolab-cli-" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

nlohmann::json read_json(const fs::path& p) {
    return nlohmann::json::parse(slurp(p));
}

std::size_t count(const std::string& haystack, const std::string& needle) {
    std::size_t n = 0;
    for (auto pos = haystack.find(needle); pos != std::string::npos; pos = haystack.find(needle, pos + 1)) {
        ++n;
    }
    return n;
}

} // namespace

TEST_CASE("build-data on the fixture matches its expected stats") {
    const fs::path out = scratch("build");
    const auto r = cpolab_cli({"--out-dir", out.string(), "build-data", "--input",
                               (kFixtures / "build_data" / "raw.jsonl").string(), "--fixtures",
                               (kFixtures / "build_data" / "judges").string()});
    INFO(r.err);
    REQUIRE(r.code == cli::kOk);
    const auto want = read_json(kFixtures / "build_data" / "expected_stats.json");
    const auto got = read_json(out / "stats.json");
    CHECK(got["input_records"] == want["input_records"]);
    CHECK(got["kept_records"] == want["kept_records"]);
    CHECK(got["stats"]["positive"] == want["positive"]);
    CHECK(got["stats"]["negative"] == want["negative"]);
    CHECK(got["dropped"] == want["dropped"]);
    CHECK(cli::read_labels(out / "lesson.jsonl") == cli::read_labels(kFixtures / "build_data" / "expected_labels.txt"));
    CHECK(r.err.find("r10") != std::string::npos); // unlisted sentence warning

    const auto manifest = read_json(out / "manifest.json");
    CHECK(manifest["command"] == "build-data");
    CHECK(manifest["exit_code"] == 0);
    CHECK(manifest["input_hashes"].size() >= 1);
    CHECK_FALSE(fs::exists(out / ".cpolab.lock"));
    fs::remove_all(out);
}

TEST_CASE("build-data without filters keeps every record") {
    const fs::path out = scratch("nofilter");
    const auto r = cpolab_cli({"--out-dir", out.string(), "build-data", "--filters", "none", "--input",
                               (kFixtures / "build_data" / "raw.jsonl").string(), "--fixtures",
                               (kFixtures / "build_data" / "judges").string()});
    REQUIRE(r.code == cli::kOk);
    const auto want = read_json(kFixtures / "build_data" / "expected_stats.json")["unfiltered"];
    const auto got = read_json(out / "stats.json");
    CHECK(got["kept_records"] == want["kept_records"]);
    CHECK(got["stats"]["positive"] == want["positive"]);
    CHECK(got["stats"]["negative"] == want["negative"]);
    CHECK(got["dropped"].empty());
    fs::remove_all(out);
}

TEST_CASE("usage errors exit with 1") {
    const fs::path out = scratch("usage");
    CHECK(cpolab_cli({"--out-dir", out.string(), "build-data", "--input", "/no/such/file.jsonl", "--fixtures",
                      (kFixtures / "build_data" / "judges").string()})
              .code == cli::kUsage);
    CHECK(cpolab_cli({"--out-dir", out.string(), "build-data"}).code == cli::kUsage);
    CHECK(cpolab_cli({}).code == cli::kUsage);
    CHECK(cpolab_cli({"frobnicate"}).code == cli::kUsage);
    CHECK(cpolab_cli({"--out-dir", out.string(), "build-data", "--filters", "colour", "--input",
                      (kFixtures / "build_data" / "raw.jsonl").string(), "--fixtures",
                      (kFixtures / "build_data" / "judges").string()})
              .code == cli::kUsage);
    CHECK(cpolab_cli({"--help"}).code == cli::kOk);
    fs::remove_all(out);
}

TEST_CASE("annotate and eval on the judge example example") {
    const fs::path out = scratch("judge_example");
    const auto a = cpolab_cli({"--out-dir", out.string(), "annotate", "--input",
                               (kFixtures / "judge_example" / "raw.jsonl").string(), "--fixtures",
                               (kFixtures / "judge_example" / "judges").string()});
    INFO(a.err);
    REQUIRE(a.code == cli::kOk);
    const auto records = load_jsonl(out / "annotated.jsonl");
    REQUIRE(records.size() == 1);
    CHECK(records[0].sentences.size() == 2);
    CHECK(cli::read_labels(out / "annotated.jsonl") == std::vector<int>{0, 0});

    {
        std::ofstream gold(out / "gold.txt");
        gold << "1 0\n";
    }
    const fs::path eval_dir = out / "eval";
    const auto e = cpolab_cli({"--out-dir", eval_dir.string(), "eval", "--predictions",
                               (out / "annotated.jsonl").string(), "--gold", (out / "gold.txt").string()});
    REQUIRE(e.code == cli::kOk);
    const auto j = read_json(eval_dir / "eval.json");
    CHECK(j["tp"] == 0);
    CHECK(j["fn"] == 1);
    CHECK(j["tn"] == 1);
    CHECK(j["fp"] == 0);
    CHECK(j["balanced_accuracy"] == 0.5);
    CHECK(e.out.find("balanced accuracy 0.5") != std::string::npos);
    fs::remove_all(out);
}

TEST_CASE("eval examples") {
    const fs::path out = scratch("eval");
    fs::create_directories(out);
    {
        std::ofstream(out / "a.txt") << "1 0 1 1 0\n";
        std::ofstream(out / "b.txt") << "1\n0\n1\n1\n0\n";
        std::ofstream(out / "short.txt") << "1 0\n";
    }
    const auto ok = cpolab_cli({"--out-dir", (out / "o").string(), "eval", "--predictions",
                                (out / "a.txt").string(), "--gold", (out / "b.txt").string()});
    REQUIRE(ok.code == cli::kOk);
    CHECK(read_json(out / "o" / "eval.json")["balanced_accuracy"] == 1.0);
    const auto bad = cpolab_cli({"--out-dir", (out / "o").string(), "eval", "--predictions",
                                 (out / "a.txt").string(), "--gold", (out / "short.txt").string()});
    CHECK(bad.code == cli::kUsage);
    fs::remove_all(out);
}

TEST_CASE("train dry run validates and reports default hyperparameters") {
    const fs::path out = scratch("dry");
    const fs::path syn = kFixtures / "synthetic";
    const auto r = cpolab_cli({"--out-dir", out.string(), "train", "--dry-run", "--data",
                               (syn / "lesson.jsonl").string(), "--probe", (syn / "probe_pairs.jsonl").string(),
                               "--model-config", (syn / "model.json").string()});
    INFO(r.err);
    REQUIRE(r.code == cli::kOk);
    CHECK_FALSE(fs::exists(out / "metrics.csv"));
    const auto cfg = read_json(out / "manifest.json")["config"]["train"];
    CHECK(cfg["batch_size"] == 8);
    CHECK(cfg["epochs"] == 5);
    CHECK(cfg["lr"] == 1e-5);
    CHECK(cfg["weight_decay"] == 3e-7);
    CHECK(cfg["warmup_ratio"] == 0.2);
    CHECK(cfg["alpha"] == 0.05);

    const auto bad = cpolab_cli({"--out-dir", out.string(), "train", "--dry-run", "--data",
                                 (syn / "lesson.jsonl").string(), "--probe", (syn / "probe_pairs.jsonl").string(),
                                 "--batch-size", "0", "--warmup-ratio", "2"});
    CHECK(bad.code == cli::kUsage);
    CHECK(bad.err.find("batch_size") != std::string::npos);
    CHECK(bad.err.find("warmup_ratio") != std::string::npos);
    fs::remove_all(out);
}

TEST_CASE("malformed data exits with 2 and a held lock refuses to run") {
    const fs::path out = scratch("data");
    fs::create_directories(out);
    std::ofstream(out / "bad.jsonl") << "{not json\n";
    const fs::path syn = kFixtures / "synthetic";
    CHECK(cpolab_cli({"--out-dir", (out / "o").string(), "train", "--data", (out / "bad.jsonl").string(), "--probe",
                      (syn / "probe_pairs.jsonl").string()})
              .code == cli::kData);
    fs::create_directories(out / "locked");
    std::ofstream(out / "locked" / ".cpolab.lock") << "1\n";
    const auto r = cpolab_cli({"--out-dir", (out / "locked").string(), "eval", "--predictions",
                               (kFixtures / "build_data" / "expected_labels.txt").string(), "--gold",
                               (kFixtures / "build_data" / "expected_labels.txt").string()});
    CHECK(r.code != cli::kOk);
    CHECK_FALSE(fs::exists(out / "locked" / "eval.json"));
    fs::remove_all(out);
}

TEST_CASE("train, probe and report end to end") {
    const fs::path out = scratch("e2e");
    const fs::path syn = kFixtures / "synthetic";
    const auto t = cpolab_cli({"--out-dir", (out / "run").string(), "--seed", "4", "train", "--data",
                               (syn / "lesson.jsonl").string(), "--probe", (syn / "probe_pairs.jsonl").string(),
                               "--config", (syn / "train.json").string(), "--model-config",
                               (syn / "model.json").string()});
    INFO(t.err);
    REQUIRE(t.code == cli::kOk);
    CHECK(fs::exists(out / "run" / "config.json"));
    CHECK(fs::exists(out / "run" / "epochs" / "epoch-2.json"));
    CHECK(read_json(out / "run" / "manifest.json")["config"]["train"]["seed"] == 4);

    const auto p = cpolab_cli({"--out-dir", (out / "probe").string(), "probe", "--probe",
                               (syn / "probe_pairs.jsonl").string(), "--checkpoint",
                               (out / "run" / "checkpoints" / "epoch-2").string(), "--k", "1", "--heads",
                               "--probe-epochs", "20"});
    REQUIRE(p.code == cli::kOk);
    CHECK(read_json(out / "probe" / "probe_report.json")["selected"].size() == 1);
    CHECK(fs::exists(out / "probe" / "probe_heads.csv"));

    const auto r1 = cpolab_cli({"--out-dir", (out / "rep1").string(), "report", "--run-dir", (out / "run").string()});
    const auto r2 = cpolab_cli({"--out-dir", (out / "rep2").string(), "report", "--run-dir", (out / "run").string()});
    REQUIRE(r1.code == cli::kOk);
    REQUIRE(r2.code == cli::kOk);
    for (const char* f : {"probe_layers.csv", "layer_heatmap.svg", "loss_curve.csv", "loss_curve.svg"}) {
        INFO(f);
        CHECK(slurp(out / "rep1" / f) == slurp(out / "rep2" / f));
        CHECK_FALSE(slurp(out / "rep1" / f).empty());
    }
    CHECK(count(slurp(out / "rep1" / "layer_heatmap.svg"), "class=\"cell\"") == 4); // 2 layers x 2 epochs
    fs::remove_all(out);
}

TEST_CASE("report on a 2-layer, 2-head run draws 4 head cells") {
    const fs::path run = scratch("fixture-run");
    EpochRecord e;
    e.epoch = 1;
    e.probe.epoch = 1;
    e.probe.layer_accuracy = {0.55, 0.7};
    e.probe.head_accuracy = std::vector<std::vector<double>>{{0.5, 0.6}, {0.65, 0.8}};
    e.probe.selected = {0};
    e.updated_layers = {0};
    e.steps = 2;
    e.checkpoint = "checkpoints/epoch-1";
    fs::create_directories(run / "epochs");
    std::ofstream(run / "epochs" / "epoch-1.json") << to_json(e).dump(2) << "\n";
    {
        std::ofstream m(run / "metrics.csv");
        m << metrics_csv_header();
        StepMetrics s;
        s.step = 1;
        s.loss.loss = 4.5;
        s.lr = 1e-3;
        m << metrics_csv_row(s);
        s.step = 2;
        s.loss.loss = 4.1;
        m << metrics_csv_row(s);
    }
    const auto r = cpolab_cli({"--out-dir", (run / "report").string(), "report", "--run-dir", run.string()});
    INFO(r.err);
    REQUIRE(r.code == cli::kOk);
    const std::string svg = slurp(run / "report" / "head_heatmap-epoch-1.svg");
    CHECK(count(svg, "class=\"cell\"") == 4);
    CHECK(svg.find("data-value=\"0.8000\"") != std::string::npos);
    CHECK(cli::read_metrics_csv(run / "metrics.csv").size() == 2);

    const fs::path empty = scratch("empty-run");
    fs::create_directories(empty);
    const auto miss = cpolab_cli({"--out-dir", (empty / "r").string(), "report", "--run-dir", empty.string()});
    CHECK(miss.code != cli::kOk);
    CHECK(miss.err.find("epochs/epoch-1.json") != std::string::npos);
    CHECK(miss.err.find("metrics.csv") != std::string::npos);
    fs::remove_all(run);
    fs::remove_all(empty);
}

TEST_CASE("read_labels") {
    const fs::path dir = scratch("labels");
    fs::create_directories(dir);
    std::ofstream(dir / "l.txt") << "1 0\n1\n";
    CHECK(cli::read_labels(dir / "l.txt") == std::vector<int>{1, 0, 1});
    std::ofstream(dir / "bad.txt") << "1 2\n";
    CHECK_THROWS_AS(cli::read_labels(dir / "bad.txt"), ParseError);
    fs::remove_all(dir);
}
