// SPDX-License-Identifier: Apache-2.0
#include "cpolab/cli.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "common.hpp"
#include "commands.hpp"
#include "cpolab/errors.hpp"
#include "cpolab/hash.hpp"

namespace cpolab::cli {

namespace fs = std::filesystem;

void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read " + path.string());
    }
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

nlohmann::ordered_json hash_inputs(const std::vector<fs::path>& inputs) {
    nlohmann::ordered_json out = nlohmann::ordered_json::object();
    for (const auto& p : inputs) {
        if (fs::is_directory(p)) {
            std::vector<fs::path> files;
            for (const auto& e : fs::recursive_directory_iterator(p)) {
                if (e.is_regular_file()) {
                    files.push_back(e.path());
                }
            }
            std::sort(files.begin(), files.end());
            for (const auto& f : files) {
                out[f.string()] = sha256_file(f);
            }
        } else if (fs::is_regular_file(p)) {
            out[p.string()] = sha256_file(p);
        }
    }
    return out;
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream s(text);
    std::string item;
    while (std::getline(s, item, ',')) {
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

namespace {

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Exclusive lock file held for the lifetime of a command.
class OutDirLock {
public:
    explicit OutDirLock(const fs::path& dir) : path_(dir / ".cpolab.lock") {
        fs::create_directories(dir);
        const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0) {
            throw UsageError("output directory " + dir.string() + " is in use by another run (" + path_.string() +
                             " exists)");
        }
        const std::string pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
        ::close(fd);
    }
    ~OutDirLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    OutDirLock(const OutDirLock&) = delete;
    OutDirLock& operator=(const OutDirLock&) = delete;

private:
    fs::path path_;
};

int exit_code_for(std::exception_ptr e, std::ostream& err) {
    try {
        std::rethrow_exception(e);
    } catch (const UsageError& x) {
        err << "usage error: " << x.what() << "\n";
        return kUsage;
    } catch (const ConfigError& x) {
        err << "config error: " << x.what() << "\n";
        return kUsage;
    } catch (const DivergenceError& x) {
        err << "training diverged: " << x.what() << "\n";
        return kDivergence;
    } catch (const std::exception& x) {
        err << "error: " << x.what() << "\n";
        return kData;
    }
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Contrastive preference optimization with probing-guided layer selection"};
    app.require_subcommand(1);
    std::string out_dir = "cpolab-run";
    std::uint64_t seed = 0;
    app.add_option("--out-dir", out_dir, "Directory for every file a command writes")->capture_default_str();
    auto* seed_opt = app.add_option("--seed", seed, "Seed for initialization and data order")->capture_default_str();

    Context ctx{out_dir, 0, false, out, err};
    std::vector<Command> commands;
    register_data_commands(app, ctx, commands);
    register_train_commands(app, ctx, commands);
    register_eval_commands(app, ctx, commands);

    std::vector<std::string> argv_rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
    try {
        app.parse(argv_rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\n";
        for (const auto* sub : app.get_subcommands()) {
            err << sub->help();
        }
        return kUsage;
    }
    ctx.out_dir = out_dir;
    ctx.seed = seed;
    ctx.seed_given = seed_opt->count() > 0;

    const Command* chosen = nullptr;
    for (const auto& c : commands) {
        if (c.app->parsed()) {
            chosen = &c;
        }
    }
    if (chosen == nullptr) {
        err << app.help();
        return kUsage;
    }

    nlohmann::ordered_json manifest;
    manifest["command"] = chosen->app->get_name();
    manifest["argv"] = args;
    manifest["seed"] = seed;
    manifest["started_at"] = utc_now();
    int code = kOk;
    RunRecord record;
    std::optional<OutDirLock> lock;
    try {
        lock.emplace(ctx.out_dir);
        record = chosen->run();
    } catch (...) {
        code = exit_code_for(std::current_exception(), err);
    }
    if (!lock) {
        return code;
    }
    manifest["config"] = record.config;
    try {
        manifest["input_hashes"] = hash_inputs(record.inputs);
    } catch (const std::exception&) {
        manifest["input_hashes"] = nlohmann::ordered_json::object();
    }
    std::vector<std::string> outputs;
    for (const auto& p : record.outputs) {
        outputs.push_back(p.string());
    }
    manifest["outputs"] = outputs;
    manifest["finished_at"] = utc_now();
    manifest["exit_code"] = code;
    try {
        write_file(ctx.out_dir / "manifest.json", manifest.dump(2) + "\n");
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return code == kOk ? kData : code;
    }
    return code;
}

int run(int argc, const char* const* argv) {
    return run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}

} // namespace cpolab::cli
