// SPDX-License-Identifier: Apache-2.0
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <thread>

#include "cpolab/annotate.hpp"
#include "cpolab/errors.hpp"
#include "cpolab/judge.hpp"
#include "doctest.h"
#include "httplib.h"
#include "json.hpp"

using namespace cpolab;
namespace fs = std::filesystem;

namespace {

const fs::path kJudgeExample = fs::path(CPOLAB_FIXTURES) / "judge_example";

struct JudgeExample {
    std::string article;
    std::vector<std::string> sentences;
};

JudgeExample load_judge_example() {
    std::ifstream in(kJudgeExample / "example.json");
    const auto j = nlohmann::json::parse(in);
    return {j.at("article").get<std::string>(), j.at("sentences").get<std::vector<std::string>>()};
}

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

AnnotationVerdict random_verdict(std::mt19937_64& rng, std::size_t n) {
    AnnotationVerdict v;
    for (std::size_t i = 0; i < n; ++i) {
        switch (rng() % 3) {
        case 0: v.inconsistent.insert(i); break;
        case 1: v.consistent.insert(i); break;
        default: v.unlisted.insert(i); break;
        }
    }
    return v;
}

AnnotationVerdict from_labels(const std::vector<int>& labels) {
    AnnotationVerdict v;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        (labels[i] == 0 ? v.inconsistent : v.consistent).insert(i);
    }
    return v;
}

} // namespace

TEST_CASE("annotation prompt") {
    const auto t = load_judge_example();
    const std::string prompt = build_annotation_prompt(t.article, t.sentences);
    CHECK(prompt.find("(0) " + t.sentences[0]) != std::string::npos);
    CHECK(prompt.find("(1) " + t.sentences[1]) != std::string::npos);
    CHECK(prompt.find(std::string(kAnnotationInstruction)) == 0);
    CHECK(prompt == read_text(kJudgeExample / "golden_prompt.txt"));

    const std::string single = build_annotation_prompt("Article.", {"Only one."});
    CHECK(single.find("(0)") != std::string::npos);
    CHECK(single.find("(1)") == std::string::npos);
}

TEST_CASE("parse_verdict examples") {
    const auto chatgpt = parse_verdict(R"({"inconsistent_sentence":[0,1],"consistent_sentence":[]})", 2);
    CHECK(chatgpt.inconsistent == std::set<std::size_t>{0, 1});
    CHECK(chatgpt.consistent.empty());
    const auto gpt4 = parse_verdict(R"({"inconsistent_sentence":[1],"consistent_sentence":[0]})", 2);
    CHECK(gpt4.inconsistent == std::set<std::size_t>{1});
    CHECK(gpt4.consistent == std::set<std::size_t>{0});

    CHECK_THROWS_AS(parse_verdict(R"({"inconsistent_sentence":[5],"consistent_sentence":[]})", 2), RangeError);
    CHECK_THROWS_AS(parse_verdict(R"({"inconsistent_sentence":[0],"consistent_sentence":[0]})", 2),
                    ConsistencyError);
    CHECK_THROWS_AS(parse_verdict("no json at all", 2), ParseError);
    CHECK_THROWS_AS(parse_verdict(R"({"inconsistent_sentence":[0,)", 2), ParseError);
}

TEST_CASE("parse_verdict tolerates surrounding prose and reports unlisted sentences") {
    const auto v = parse_verdict("Sure. Here is the answer: {\"inconsistent_sentence\": [2], "
                                 "\"consistent_sentence\": [0]} Hope it helps {.",
                                 3);
    CHECK(v.inconsistent == std::set<std::size_t>{2});
    CHECK(v.unlisted == std::set<std::size_t>{1});
}

TEST_CASE("render then parse round trips") {
    std::mt19937_64 rng(2);
    for (int i = 0; i < 200; ++i) {
        const std::size_t n = 1 + rng() % 6;
        const auto v = random_verdict(rng, n);
        CHECK(parse_verdict(render_verdict(v), n) == v);
    }
}

TEST_CASE("merge_union examples") {
    const auto a = parse_verdict(R"({"inconsistent_sentence":[0,1],"consistent_sentence":[]})", 2);
    const auto b = parse_verdict(R"({"inconsistent_sentence":[1],"consistent_sentence":[0]})", 2);
    CHECK(merge_union(a, b, 2) == std::vector<int>{0, 0});
    CHECK(merge_union(AnnotationVerdict{}, AnnotationVerdict{}, 3) == std::vector<int>{1, 1, 1});
    AnnotationVerdict x, y;
    x.inconsistent = {0};
    y.inconsistent = {2};
    CHECK(merge_union(x, y, 3) == std::vector<int>{0, 1, 0});
}

TEST_CASE("merge_union is commutative, associative and idempotent") {
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng() % 8;
        const auto a = random_verdict(rng, n);
        const auto b = random_verdict(rng, n);
        const auto c = random_verdict(rng, n);
        CHECK(merge_union(a, b, n) == merge_union(b, a, n));
        CHECK(merge_union(from_labels(merge_union(a, b, n)), c, n) ==
              merge_union(a, from_labels(merge_union(b, c, n)), n));
        CHECK(merge_union(a, a, n) == merge_union(a, AnnotationVerdict{}, n));
    }
}

TEST_CASE("confusion examples") {
    CHECK(confusion({1, 1, 1, 0, 0}, {1, 1, 1, 0, 0}) == ConfusionCounts{3, 0, 2, 0});
    CHECK(confusion({1, 1, 1, 1}, {1, 0, 1, 0}) == ConfusionCounts{2, 2, 0, 0});
    // Hand-counted 20-label case.
    const std::vector<int> pred{1, 0, 1, 1, 0, 0, 1, 0, 1, 1, 0, 1, 0, 0, 1, 1, 1, 0, 0, 1};
    const std::vector<int> gold{1, 0, 0, 1, 1, 0, 1, 0, 1, 0, 0, 1, 1, 0, 1, 0, 1, 0, 1, 1};
    CHECK(confusion(pred, gold) == ConfusionCounts{8, 3, 6, 3});
    CHECK_THROWS_AS(confusion({1}, {1, 0}), ContractError);
}

TEST_CASE("balanced_accuracy examples") {
    CHECK(balanced_accuracy({5, 0, 4, 0}) == 1.0);
    CHECK(balanced_accuracy({3, 2, 2, 1}) == 0.625);
    CHECK(balanced_accuracy({7, 4, 0, 0}) == 0.5);
    CHECK_THROWS_AS(balanced_accuracy({0, 3, 2, 0}), UndefinedClassError);
    CHECK_THROWS_AS(balanced_accuracy({3, 0, 0, 2}), UndefinedClassError);
}

TEST_CASE("judge fixture replay") {
    const auto t = load_judge_example();
    const std::string prompt = build_annotation_prompt(t.article, t.sentences);
    auto chatgpt = JudgeClient::fixture("chatgpt", FixtureStore::load(kJudgeExample / "judges" / "chatgpt.jsonl"));
    auto gpt4 = JudgeClient::fixture("gpt4", FixtureStore::load(kJudgeExample / "judges" / "gpt4.jsonl"));
    const auto a = parse_verdict(chatgpt.request(prompt), 2);
    const auto b = parse_verdict(gpt4.request(prompt), 2);
    CHECK(a.inconsistent == std::set<std::size_t>{0, 1});
    CHECK(b.inconsistent == std::set<std::size_t>{1});
    CHECK(merge_union(a, b, 2) == std::vector<int>{0, 0});
    CHECK_THROWS_AS(chatgpt.request("a prompt nobody recorded"), FixtureMissError);
}

TEST_CASE("judge retries with backoff") {
    int calls = 0;
    std::vector<std::chrono::milliseconds> waits;
    JudgeClient client(
        "flaky",
        [&](const std::string&) -> std::string {
            if (++calls <= 3) {
                throw TransportError("connection reset");
            }
            return "ok";
        },
        RetryPolicy{3, std::chrono::milliseconds(100), 2.0}, [&](std::chrono::milliseconds d) { waits.push_back(d); });
    CHECK(client.request("p") == "ok");
    CHECK(client.retries() == 3);
    CHECK(waits == std::vector<std::chrono::milliseconds>{std::chrono::milliseconds(100),
                                                          std::chrono::milliseconds(200),
                                                          std::chrono::milliseconds(400)});
    std::size_t retry_lines = 0;
    for (const auto& l : client.log()) {
        retry_lines += l.find("failed") != std::string::npos ? 1 : 0;
    }
    CHECK(retry_lines == 3);

    calls = -10;
    JudgeClient hopeless(
        "down", [&](const std::string&) -> std::string { throw TransportError("down"); },
        RetryPolicy{2, std::chrono::milliseconds(1), 2.0}, [](std::chrono::milliseconds) {});
    CHECK_THROWS_AS(hopeless.request("p"), TransportError);
    CHECK(hopeless.retries() == 2);
}

TEST_CASE("request_all keeps input order under concurrency") {
    std::atomic<int> live{0};
    std::atomic<int> peak{0};
    JudgeClient client("echo", [&](const std::string& p) {
        const int now = ++live;
        int prev = peak.load();
        while (now > prev && !peak.compare_exchange_weak(prev, now)) {
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(2));
        --live;
        return "r:" + p;
    });
    std::vector<std::string> prompts;
    for (int i = 0; i < 20; ++i) {
        prompts.push_back(std::to_string(i));
    }
    const auto out = client.request_all(prompts, 3);
    REQUIRE(out.size() == 20);
    for (int i = 0; i < 20; ++i) {
        CHECK(out[i] == "r:" + std::to_string(i));
    }
    CHECK(peak.load() <= 3);
}

TEST_CASE("live judge talks to an OpenAI-compatible endpoint") {
    httplib::Server server;
    std::string seen_auth;
    std::string seen_model;
    server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        seen_auth = req.get_header_value("Authorization");
        const auto body = nlohmann::json::parse(req.body);
        seen_model = body.at("model").get<std::string>();
        nlohmann::json reply;
        reply["choices"] = {{{"message", {{"role", "assistant"}, {"content", "echo:" + body.at("messages").back()
                                                                                      .at("content")
                                                                                      .get<std::string>()}}}}};
        res.set_content(reply.dump(), "application/json");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread th([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    ::setenv("CPOLAB_TEST_JUDGE_KEY", "secret-token", 1);
    EndpointConfig ep;
    ep.base_url = "http://127.0.0.1:" + std::to_string(port);
    ep.model = "judge-model";
    ep.api_key_env = "CPOLAB_TEST_JUDGE_KEY";
    auto client = JudgeClient::live("live", ep, RetryPolicy{0, std::chrono::milliseconds(1), 2.0});
    CHECK(client.request("hello") == "echo:hello");
    CHECK(seen_auth == "Bearer secret-token");
    CHECK(seen_model == "judge-model");

    EndpointConfig wrong = ep;
    wrong.path = "/missing";
    auto broken = JudgeClient::live("live", wrong, RetryPolicy{1, std::chrono::milliseconds(1), 2.0});
    CHECK_THROWS_AS(broken.request("hello"), TransportError);

    server.stop();
    th.join();
}

TEST_CASE("fixture store round trip") {
    const fs::path p = fs::temp_directory_path() / "cpolab-test-store" / "s.jsonl";
    FixtureStore s;
    s.record("prompt one", "response one");
    s.record("prompt two", "response two");
    s.save(p);
    const auto back = FixtureStore::load(p);
    CHECK(back.size() == 2);
    CHECK(back.lookup("prompt two") == std::optional<std::string>("response two"));
    CHECK_FALSE(back.lookup("prompt three").has_value());
    {
        std::ofstream out(p, std::ios::app);
        out << "not json\n";
    }
    CHECK_THROWS_AS(FixtureStore::load(p), ParseError);
    fs::remove_all(p.parent_path());
}
