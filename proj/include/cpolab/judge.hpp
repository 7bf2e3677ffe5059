// SPDX-License-Identifier: Apache-2.0
//
// Client for LLM judges. Fixture mode replays responses from a
// content-addressed store (JSONL lines {"prompt_sha": <sha256 hex>,
// "response": <text>}); live mode calls an OpenAI-compatible chat completions
// endpoint with retries and exponential backoff.
#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cpolab {

class FixtureStore {
public:
    // ParseError with line number on malformed lines.
    static FixtureStore load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    void record(std::string_view prompt, std::string response);
    std::optional<std::string> lookup(std::string_view prompt) const;
    std::size_t size() const noexcept { return by_sha_.size(); }

private:
    std::map<std::string, std::string> by_sha_;
};

struct EndpointConfig {
    std::string base_url;                     // scheme://host[:port]
    std::string path = "/v1/chat/completions";
    std::string model;
    std::string api_key_env = "CPOLAB_JUDGE_API_KEY";
    int timeout_seconds = 60;
};

struct RetryPolicy {
    int max_retries = 3;
    std::chrono::milliseconds initial_backoff{500};
    double backoff_factor = 2.0;
};

class JudgeClient {
public:
    // Throws TransportError on failure.
    using Transport = std::function<std::string(const std::string& prompt)>;
    using Sleeper = std::function<void(std::chrono::milliseconds)>;

    JudgeClient(std::string name, Transport transport, RetryPolicy policy = {}, Sleeper sleeper = {});

    static JudgeClient fixture(std::string name, FixtureStore store);
    static JudgeClient live(std::string name, EndpointConfig endpoint, RetryPolicy policy = {});

    // Fixture misses raise FixtureMissError immediately; transport failures are
    // retried up to policy.max_retries times before the last TransportError
    // propagates.
    std::string request(const std::string& prompt);

    // Requests in parallel, at most max_concurrency at a time; results keep the
    // input order. The first failure is rethrown after all workers finish.
    std::vector<std::string> request_all(const std::vector<std::string>& prompts, std::size_t max_concurrency);

    const std::string& name() const noexcept { return name_; }
    std::size_t retries() const;
    std::vector<std::string> log() const;

private:
    void note(std::string line);

    std::string name_;
    Transport transport_;
    RetryPolicy policy_;
    Sleeper sleeper_;
    bool fixture_mode_ = false;
    std::unique_ptr<std::mutex> mutex_ = std::make_unique<std::mutex>();
    std::size_t retries_ = 0;
    std::vector<std::string> log_;
};

} // namespace cpolab
