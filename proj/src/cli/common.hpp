// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

namespace cpolab::cli {

// Raised for bad flag combinations the option parser cannot see.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Context {
    std::filesystem::path out_dir;
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::ostream& out;
    std::ostream& err;
};

// What a command reports back for the run manifest.
struct RunRecord {
    nlohmann::ordered_json config = nlohmann::ordered_json::object();
    std::vector<std::filesystem::path> inputs;
    std::vector<std::filesystem::path> outputs;
};

void write_file(const std::filesystem::path& path, const std::string& text);
std::string read_file(const std::filesystem::path& path);

// SHA-256 per input file; directories contribute every regular file inside.
nlohmann::ordered_json hash_inputs(const std::vector<std::filesystem::path>& inputs);

std::vector<std::string> split_list(const std::string& text);

} // namespace cpolab::cli
