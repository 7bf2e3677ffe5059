// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: build-data, annotate, train, probe, eval, report.
// Every command takes the global --seed and --out-dir options, holds a lock
// file in the output directory while it runs, and writes manifest.json there.
#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "cpolab/trainer.hpp"

namespace cpolab::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kDivergence = 3 };

// args[0] is the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

// Label files: whitespace-separated 0/1 values, or a .jsonl dataset whose
// sentence labels are read in order. ParseError on anything else.
std::vector<int> read_labels(const std::filesystem::path& path);

// Heatmap with one <rect class="cell"> per grid value; greener is higher.
std::string heatmap_svg(const std::vector<std::vector<double>>& grid, const std::vector<std::string>& row_labels,
                        const std::vector<std::string>& col_labels, const std::string& title);
std::string loss_curve_svg(const std::vector<StepMetrics>& steps);
// Parses a metrics.csv body written by the trainer.
std::vector<StepMetrics> read_metrics_csv(const std::filesystem::path& path);

} // namespace cpolab::cli
