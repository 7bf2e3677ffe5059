// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "cpolab/checkpoint.hpp"
#include "cpolab/synthetic.hpp"
#include "cpolab/trainer.hpp"
#include "doctest.h"

using namespace cpolab;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny() {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    return c;
}

TrainConfig quick_config() {
    TrainConfig c;
    c.batch_size = 4;
    c.epochs = 2;
    c.lr = 3e-3;
    c.k = 1;
    c.seed = 3;
    c.probe.epochs = 20;
    return c;
}

struct Data {
    std::vector<CpoExample> train;
    std::vector<ProbeRecord> probe;
};

Data small_data() {
    Data d;
    const ByteTokenizer tok;
    for (const auto& r : synthetic_corpus({10, 0.5, 21})) {
        d.train.push_back(make_example(r, InstructionPair::defaults(), tok));
    }
    d.probe = expand_pairs(synthetic_probe_pairs(10, 21));
    return d;
}

std::map<std::string, std::uint64_t> hashes(const ModelParams<float>& p) {
    std::map<std::string, std::uint64_t> out;
    for (const auto& g : p.groups()) {
        out[g.name] = params_hash(p, g.name);
    }
    return out;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("cpolab-test-" + name);
    fs::remove_all(p);
    return p;
}

} // namespace

TEST_CASE("lr_schedule examples") {
    TrainConfig c;
    c.lr = 1e-3;
    c.warmup_ratio = 0.2;
    CHECK(lr_schedule(0, 100, c) == 0.0);
    CHECK(lr_schedule(20, 100, c) == 1e-3);
    CHECK(lr_schedule(10, 100, c) == doctest::Approx(5e-4).epsilon(1e-15));
    CHECK(lr_schedule(73, 100, c) == 1e-3);
    CHECK(lr_schedule(100, 100, c) == 1e-3);
    CHECK_THROWS_AS(lr_schedule(101, 100, c), ContractError);
    c.warmup_ratio = 0.0;
    CHECK(lr_schedule(1, 100, c) == 1e-3);
}

TEST_CASE("adamw step examples") {
    auto p = ModelParams<float>::init(tiny(), 1);
    set_all_trainable(p, true);
    for (auto& g : p.groups()) {
        for (auto& nt : g.tensors) {
            nt.tensor.node()->grad_buffer();
        }
    }
    const auto before = hashes(p);
    AdamW<float> opt;
    opt.step(p, 0.1, 0.0);
    CHECK(hashes(p) == before);

    Tensor<float>& w = p.tensor("head.proj");
    w.mutable_data()[0] = 1.0f;
    w.mutable_grad()[0] = 1.0f;
    AdamW<float> fresh;
    fresh.step(p, 0.1, 0.0);
    CHECK(w.data()[0] == doctest::Approx(0.9).epsilon(1e-6));
    CHECK(w.data()[1] == p.tensor("head.proj").data()[1]);

    w.mutable_grad()[0] = std::numeric_limits<float>::quiet_NaN();
    const auto frozen = hashes(p);
    CHECK_THROWS_AS(fresh.step(p, 0.1, 0.0), DivergenceError);
    CHECK(hashes(p) == frozen);
}

TEST_CASE("adamw decoupled decay shrinks weights without gradient signal") {
    auto p = ModelParams<double>::init(tiny(), 2);
    set_trainable_layers(p, {0});
    for (auto& g : p.groups()) {
        for (auto& nt : g.tensors) {
            nt.tensor.node()->grad_buffer();
        }
    }
    const double w0 = p.tensor("layer.0.attn.wq").data()[3];
    const double h0 = p.tensor("head.proj").data()[3];
    AdamW<double> opt;
    opt.step(p, 0.1, 0.5);
    CHECK(p.tensor("layer.0.attn.wq").data()[3] == doctest::Approx(w0 * (1.0 - 0.05)).epsilon(1e-12));
    CHECK(p.tensor("head.proj").data()[3] == h0);
}

TEST_CASE("batch_order is a deterministic permutation") {
    const auto a = batch_order(50, 7, 1);
    auto sorted = a;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < 50; ++i) {
        CHECK(sorted[i] == i);
    }
    CHECK(batch_order(50, 7, 1) == a);
    CHECK(batch_order(50, 7, 2) != a);
    CHECK(batch_order(50, 8, 1) != a);
}

TEST_CASE("train config validation and json") {
    TrainConfig c;
    CHECK(c.problems().empty());
    c.batch_size = 0;
    c.warmup_ratio = 1.5;
    c.alpha = -1.0;
    CHECK(c.problems().size() == 3);
    try {
        c.validate();
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("batch_size") != std::string::npos);
        CHECK(msg.find("warmup_ratio") != std::string::npos);
        CHECK(msg.find("alpha") != std::string::npos);
    }
    const TrainConfig d = quick_config();
    const TrainConfig back = train_config_from_json(to_json(d));
    CHECK(to_json(back) == to_json(d));
    CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"epochs", 2}, {"learning_rate", 1.0}}), ConfigError);
}

TEST_CASE("defaults follow the reference hyperparameters") {
    const TrainConfig c;
    CHECK(c.batch_size == 8);
    CHECK(c.epochs == 5);
    CHECK(c.lr == 1e-5);
    CHECK(c.weight_decay == 3e-7);
    CHECK(c.warmup_ratio == 0.2);
    CHECK(c.alpha == 0.05);
}

TEST_CASE("injected accuracies: only the worst layer changes") {
    const Data d = small_data();
    auto params = ModelParams<float>::init(tiny(), 4);
    TrainConfig c = quick_config();
    c.epochs = 1;
    TrainHooks hooks;
    hooks.accuracy_override = [](std::size_t) { return std::optional<std::vector<double>>({0.9, 0.1}); };
    const auto before = hashes(params);
    const auto res = train(d.train, d.probe, params, c, {}, hooks);
    const auto after = hashes(res.params);
    CHECK(after.at("layer.1") != before.at("layer.1"));
    CHECK(after.at("layer.0") == before.at("layer.0"));
    CHECK(after.at("embedding") == before.at("embedding"));
    CHECK(after.at("head") == before.at("head"));
    REQUIRE(res.epochs.size() == 1);
    CHECK(res.epochs[0].updated_layers == std::set<std::size_t>{1});
    CHECK(res.epochs[0].steps == 3);
    CHECK(res.steps.size() == 3);
}

TEST_CASE("k equal to the depth trains every block") {
    const Data d = small_data();
    auto params = ModelParams<float>::init(tiny(), 5);
    TrainConfig c = quick_config();
    c.epochs = 1;
    c.k = 2;
    const auto before = hashes(params);
    const auto res = train(d.train, d.probe, params, c);
    const auto after = hashes(res.params);
    CHECK(after.at("layer.0") != before.at("layer.0"));
    CHECK(after.at("layer.1") != before.at("layer.1"));
    CHECK(after.at("embedding") == before.at("embedding"));
    CHECK(after.at("head") == before.at("head"));
    CHECK(res.epochs[0].updated_layers == std::set<std::size_t>{0, 1});
}

TEST_CASE("run directory layout and records") {
    const Data d = small_data();
    const fs::path out = scratch("layout");
    TrainOptions o;
    o.out_dir = out;
    const auto res = train(d.train, d.probe, ModelParams<float>::init(tiny(), 6), quick_config(), o);
    CHECK(slurp(out / "metrics.csv").rfind(metrics_csv_header(), 0) == 0);
    for (std::size_t e = 1; e <= 2; ++e) {
        const fs::path rec = out / "epochs" / ("epoch-" + std::to_string(e) + ".json");
        REQUIRE(fs::exists(rec));
        const auto back = epoch_record_from_json(nlohmann::json::parse(slurp(rec)));
        CHECK(back.epoch == e);
        CHECK(back.updated_layers == res.epochs[e - 1].updated_layers);
        CHECK(back.probe.layer_accuracy == res.epochs[e - 1].probe.layer_accuracy);
        CHECK(back.checkpoint == "checkpoints/epoch-" + std::to_string(e));
        CHECK(fs::exists(out / back.checkpoint / "manifest.json"));
    }
    const auto ck = read_checkpoint(out / "checkpoints" / "epoch-2");
    CHECK(ck.metadata.at("step").get<std::size_t>() == 6);
    CHECK(ck.find("optim.m/layer.0.attn.wq") != nullptr);
    fs::remove_all(out);
}

TEST_CASE("resume matches an uninterrupted run") {
    const Data d = small_data();
    const TrainConfig c = quick_config();
    const fs::path full = scratch("full");
    const fs::path cut = scratch("cut");
    TrainOptions o;
    o.out_dir = full;
    train(d.train, d.probe, ModelParams<float>::init(tiny(), 7), c, o);

    o.out_dir = cut;
    TrainHooks stop;
    stop.on_epoch = [](const EpochRecord& r) {
        if (r.epoch == 1) {
            throw std::runtime_error("interrupted");
        }
    };
    CHECK_THROWS(train(d.train, d.probe, ModelParams<float>::init(tiny(), 7), c, o, stop));
    o.resume_from = cut / "checkpoints" / "epoch-1";
    const auto res = train(d.train, d.probe, ModelParams<float>::init(tiny(), 99), c, o);
    CHECK(res.epochs.size() == 1);
    CHECK(slurp(cut / "metrics.csv") == slurp(full / "metrics.csv"));
    CHECK(slurp(cut / "checkpoints/epoch-2/tensors.bin") == slurp(full / "checkpoints/epoch-2/tensors.bin"));
    CHECK(slurp(cut / "epochs/epoch-2.json") == slurp(full / "epochs/epoch-2.json"));
    fs::remove_all(full);
    fs::remove_all(cut);
}

TEST_CASE("divergence aborts with a diagnostic checkpoint") {
    const Data d = small_data();
    auto params = ModelParams<float>::init(tiny(), 8);
    params.tensor("head.proj").mutable_data()[0] = std::numeric_limits<float>::infinity();
    const fs::path out = scratch("diverge");
    TrainOptions o;
    o.out_dir = out;
    TrainHooks hooks;
    hooks.accuracy_override = [](std::size_t) { return std::optional<std::vector<double>>({0.5, 0.6}); };
    CHECK_THROWS_AS(train(d.train, d.probe, params, quick_config(), o, hooks), DivergenceError);
    CHECK(fs::exists(out / "checkpoints" / "diverged-step-1" / "manifest.json"));
    fs::remove_all(out);
}

TEST_CASE("train input errors") {
    const Data d = small_data();
    const auto p = ModelParams<float>::init(tiny(), 9);
    CHECK_THROWS_AS(train({}, d.probe, p, quick_config()), InputError);
    CHECK_THROWS_AS(train(d.train, {}, p, quick_config()), InputError);
    TrainConfig bad = quick_config();
    bad.epochs = 0;
    CHECK_THROWS_AS(train(d.train, d.probe, p, bad), ConfigError);
}
