// SPDX-License-Identifier: Apache-2.0
#include "httplib.h"

#include "cpolab/judge.hpp"

#include <atomic>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <thread>

#include "cpolab/errors.hpp"
#include "cpolab/hash.hpp"
#include "json.hpp"

namespace cpolab {

FixtureStore FixtureStore::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read fixture store " + path.string());
    }
    FixtureStore store;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            store.by_sha_[j.at("prompt_sha").get<std::string>()] = j.at("response").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path.string() + ": " + e.what(), line_no);
        }
    }
    return store;
}

void FixtureStore::save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot write fixture store " + path.string());
    }
    for (const auto& [sha, response] : by_sha_) {
        nlohmann::ordered_json j;
        j["prompt_sha"] = sha;
        j["response"] = response;
        out << j.dump() << '\n';
    }
}

void FixtureStore::record(std::string_view prompt, std::string response) {
    by_sha_[sha256_hex(prompt)] = std::move(response);
}

std::optional<std::string> FixtureStore::lookup(std::string_view prompt) const {
    const auto it = by_sha_.find(sha256_hex(prompt));
    if (it == by_sha_.end()) {
        return std::nullopt;
    }
    return it->second;
}

JudgeClient::JudgeClient(std::string name, Transport transport, RetryPolicy policy, Sleeper sleeper)
    : name_(std::move(name)), transport_(std::move(transport)), policy_(policy), sleeper_(std::move(sleeper)) {
    if (!sleeper_) {
        sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
    }
}

JudgeClient JudgeClient::fixture(std::string name, FixtureStore store) {
    auto shared = std::make_shared<FixtureStore>(std::move(store));
    JudgeClient client(
        name,
        [shared, name](const std::string& prompt) {
            auto hit = shared->lookup(prompt);
            if (!hit) {
                throw FixtureMissError("judge '" + name + "' has no recorded response for prompt sha " +
                                       sha256_hex(prompt));
            }
            return *hit;
        },
        RetryPolicy{0, std::chrono::milliseconds{0}, 1.0});
    client.fixture_mode_ = true;
    return client;
}

JudgeClient JudgeClient::live(std::string name, EndpointConfig endpoint, RetryPolicy policy) {
    if (endpoint.base_url.empty() || endpoint.model.empty()) {
        throw ConfigError("live judge needs a base URL and a model name");
    }
    auto transport = [endpoint](const std::string& prompt) -> std::string {
        httplib::Client http(endpoint.base_url);
        http.set_connection_timeout(endpoint.timeout_seconds, 0);
        http.set_read_timeout(endpoint.timeout_seconds, 0);
        httplib::Headers headers;
        if (const char* key = std::getenv(endpoint.api_key_env.c_str()); key != nullptr && *key != '\0') {
            headers.emplace("Authorization", std::string("Bearer ") + key);
        }
        nlohmann::ordered_json body;
        body["model"] = endpoint.model;
        body["temperature"] = 0;
        body["messages"] = nlohmann::ordered_json::array({{{"role", "user"}, {"content", prompt}}});
        auto res = http.Post(endpoint.path, headers, body.dump(), "application/json");
        if (!res) {
            throw TransportError("request to " + endpoint.base_url + " failed: " + httplib::to_string(res.error()));
        }
        if (res->status != 200) {
            throw TransportError("judge endpoint returned HTTP " + std::to_string(res->status));
        }
        try {
            const auto j = nlohmann::json::parse(res->body);
            return j.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw TransportError(std::string("unexpected judge payload: ") + e.what());
        }
    };
    return JudgeClient(std::move(name), std::move(transport), policy);
}

std::string JudgeClient::request(const std::string& prompt) {
    auto backoff = policy_.initial_backoff;
    for (int attempt = 0;; ++attempt) {
        try {
            std::string response = transport_(prompt);
            note("judge=" + name_ + " attempt=" + std::to_string(attempt + 1) + " ok response=" + response);
            return response;
        } catch (const TransportError& e) {
            note("judge=" + name_ + " attempt=" + std::to_string(attempt + 1) + " failed: " + e.what());
            if (fixture_mode_ || attempt >= policy_.max_retries) {
                throw;
            }
            {
                std::lock_guard lock(*mutex_);
                ++retries_;
            }
            sleeper_(backoff);
            backoff = std::chrono::milliseconds(
                static_cast<long long>(static_cast<double>(backoff.count()) * policy_.backoff_factor));
        }
    }
}

std::vector<std::string> JudgeClient::request_all(const std::vector<std::string>& prompts,
                                                  std::size_t max_concurrency) {
    std::vector<std::string> out(prompts.size());
    std::vector<std::exception_ptr> errors(prompts.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < prompts.size(); i = next++) {
            try {
                out[i] = request(prompts[i]);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t n_workers = std::max<std::size_t>(1, std::min(max_concurrency, prompts.size()));
    {
        std::vector<std::jthread> workers;
        for (std::size_t w = 0; w < n_workers; ++w) {
            workers.emplace_back(worker);
        }
    }
    for (const auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
    return out;
}

std::size_t JudgeClient::retries() const {
    std::lock_guard lock(*mutex_);
    return retries_;
}

std::vector<std::string> JudgeClient::log() const {
    std::lock_guard lock(*mutex_);
    return log_;
}

void JudgeClient::note(std::string line) {
    std::lock_guard lock(*mutex_);
    log_.push_back(std::move(line));
}

} // namespace cpolab
