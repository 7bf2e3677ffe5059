// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "CLI11.hpp"
#include "common.hpp"

namespace cpolab::cli {

struct Command {
    CLI::App* app = nullptr;
    std::function<RunRecord()> run;
};

void register_data_commands(CLI::App& app, Context& ctx, std::vector<Command>& commands);
void register_train_commands(CLI::App& app, Context& ctx, std::vector<Command>& commands);
void register_eval_commands(CLI::App& app, Context& ctx, std::vector<Command>& commands);

} // namespace cpolab::cli
