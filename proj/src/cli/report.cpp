// SPDX-License-Identifier: Apache-2.0
//
// eval and report.
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

#include "commands.hpp"
#include "cpolab/annotate.hpp"
#include "cpolab/cli.hpp"
#include "cpolab/corpus.hpp"
#include "cpolab/errors.hpp"

namespace cpolab::cli {

namespace fs = std::filesystem;

std::vector<int> read_labels(const fs::path& path) {
    std::vector<int> out;
    if (path.extension() == ".jsonl") {
        for (const auto& r : load_jsonl(path)) {
            for (const auto& s : r.sentences) {
                out.push_back(s.label);
            }
        }
        return out;
    }
    std::istringstream in(read_file(path));
    std::string tok;
    while (in >> tok) {
        if (tok != "0" && tok != "1") {
            throw ParseError(path.string() + ": label '" + tok + "' is not 0 or 1");
        }
        out.push_back(tok == "1" ? 1 : 0);
    }
    return out;
}

namespace {

std::string num(double v, int digits = 4) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string escape_xml(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '<':
            out += "&lt;";
            break;
        case '>':
            out += "&gt;";
            break;
        case '&':
            out += "&amp;";
            break;
        case '"':
            out += "&quot;";
            break;
        default:
            out += c;
        }
    }
    return out;
}

// White at 0, dark green at 1.
std::string green(double a) {
    const double t = std::clamp(a, 0.0, 1.0);
    const auto mix = [t](int lo, int hi) { return static_cast<int>(std::lround(lo + (hi - lo) * t)); };
    return "rgb(" + std::to_string(mix(247, 0)) + "," + std::to_string(mix(252, 109)) + "," +
           std::to_string(mix(245, 44)) + ")";
}

} // namespace

std::string heatmap_svg(const std::vector<std::vector<double>>& grid, const std::vector<std::string>& row_labels,
                        const std::vector<std::string>& col_labels, const std::string& title) {
    const int cell = 48;
    const int left = 90;
    const int top = 50;
    const std::size_t rows = grid.size();
    const std::size_t cols = rows == 0 ? 0 : grid.front().size();
    const int width = left + static_cast<int>(cols) * cell + 20;
    const int height = top + static_cast<int>(rows) * cell + 20;
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    s << "<text x=\"" << left << "\" y=\"18\" font-size=\"13\">" << escape_xml(title) << "</text>\n";
    for (std::size_t c = 0; c < cols; ++c) {
        s << "<text x=\"" << left + static_cast<int>(c) * cell + cell / 2 << "\" y=\"" << top - 6
          << "\" text-anchor=\"middle\">" << escape_xml(c < col_labels.size() ? col_labels[c] : std::to_string(c))
          << "</text>\n";
    }
    for (std::size_t r = 0; r < rows; ++r) {
        const int y = top + static_cast<int>(r) * cell;
        s << "<text x=\"" << left - 6 << "\" y=\"" << y + cell / 2 + 4 << "\" text-anchor=\"end\">"
          << escape_xml(r < row_labels.size() ? row_labels[r] : std::to_string(r)) << "</text>\n";
        for (std::size_t c = 0; c < grid[r].size(); ++c) {
            const double a = grid[r][c];
            const int x = left + static_cast<int>(c) * cell;
            s << "<rect class=\"cell\" data-row=\"" << r << "\" data-col=\"" << c << "\" data-value=\"" << num(a)
              << "\" x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\""
              << green(a) << "\" stroke=\"#ffffff\"/>\n";
            s << "<text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 4 << "\" text-anchor=\"middle\" fill=\""
              << (a > 0.6 ? "#ffffff" : "#000000") << "\">" << num(a, 2) << "</text>\n";
        }
    }
    s << "</svg>\n";
    return s.str();
}

std::string loss_curve_svg(const std::vector<StepMetrics>& steps) {
    const double w = 640;
    const double h = 320;
    const double pad = 50;
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    s << "<text x=\"" << pad << "\" y=\"20\" font-size=\"13\">training loss</text>\n";
    s << "<line x1=\"" << pad << "\" y1=\"" << h - pad << "\" x2=\"" << w - 20 << "\" y2=\"" << h - pad
      << "\" stroke=\"#333333\"/>\n";
    s << "<line x1=\"" << pad << "\" y1=\"30\" x2=\"" << pad << "\" y2=\"" << h - pad << "\" stroke=\"#333333\"/>\n";
    if (!steps.empty()) {
        double lo = steps.front().loss.loss;
        double hi = lo;
        for (const auto& m : steps) {
            lo = std::min(lo, m.loss.loss);
            hi = std::max(hi, m.loss.loss);
        }
        if (hi - lo < 1e-12) {
            hi = lo + 1.0;
        }
        const double first = static_cast<double>(steps.front().step);
        const double span = std::max(1.0, static_cast<double>(steps.back().step) - first);
        s << "<polyline class=\"loss\" fill=\"none\" stroke=\"#1b7837\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < steps.size(); ++i) {
            const double x = pad + (static_cast<double>(steps[i].step) - first) / span * (w - pad - 20);
            const double y = h - pad - (steps[i].loss.loss - lo) / (hi - lo) * (h - pad - 30);
            s << (i ? " " : "") << num(x, 2) << "," << num(y, 2);
        }
        s << "\"/>\n";
        s << "<text x=\"" << pad - 4 << "\" y=\"34\" text-anchor=\"end\">" << num(hi, 3) << "</text>\n";
        s << "<text x=\"" << pad - 4 << "\" y=\"" << h - pad << "\" text-anchor=\"end\">" << num(lo, 3)
          << "</text>\n";
        s << "<text x=\"" << w - 20 << "\" y=\"" << h - pad + 16 << "\" text-anchor=\"end\">step "
          << steps.back().step << "</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

std::vector<StepMetrics> read_metrics_csv(const fs::path& path) {
    std::istringstream in(read_file(path));
    std::string line;
    std::getline(in, line);
    if (line != "step,loss,incentive,penalty,lr") {
        throw ParseError(path.string() + ": unexpected metrics header '" + line + "'", 1);
    }
    std::vector<StepMetrics> out;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        std::istringstream row(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(row, cell, ',')) {
            cells.push_back(cell);
        }
        if (cells.size() != 5) {
            throw ParseError(path.string() + ": expected 5 columns", line_no);
        }
        try {
            StepMetrics m;
            m.step = std::stoull(cells[0]);
            m.loss.loss = std::stod(cells[1]);
            m.loss.incentive = std::stod(cells[2]);
            m.loss.penalty = std::stod(cells[3]);
            m.lr = std::stod(cells[4]);
            out.push_back(m);
        } catch (const std::exception&) {
            throw ParseError(path.string() + ": malformed number", line_no);
        }
    }
    return out;
}

void register_eval_commands(CLI::App& app, Context& ctx, std::vector<Command>& commands) {
    // eval
    {
        struct Opts {
            std::string predictions;
            std::string gold;
        };
        auto o = std::make_shared<Opts>();
        auto* sub = app.add_subcommand("eval", "Balanced accuracy of predicted sentence labels against gold labels");
        sub->add_option("--predictions", o->predictions, "Predicted labels (0/1 list or .jsonl dataset)")
            ->required()
            ->check(CLI::ExistingFile);
        sub->add_option("--gold", o->gold, "Gold labels (0/1 list or .jsonl dataset)")
            ->required()
            ->check(CLI::ExistingFile);
        commands.push_back({sub, [o, &ctx]() {
                                RunRecord rec;
                                rec.inputs = {o->predictions, o->gold};
                                const auto pred = read_labels(o->predictions);
                                const auto gold = read_labels(o->gold);
                                if (pred.size() != gold.size()) {
                                    throw UsageError(std::to_string(pred.size()) + " predictions for " +
                                                     std::to_string(gold.size()) + " gold labels");
                                }
                                const ConfusionCounts c = confusion(pred, gold);
                                const double ba = balanced_accuracy(c);
                                ctx.out << "            gold=1  gold=0\n";
                                ctx.out << "pred=1  " << std::string(8 - std::to_string(c.tp).size(), ' ') << c.tp
                                        << std::string(8 - std::to_string(c.fp).size(), ' ') << c.fp << "\n";
                                ctx.out << "pred=0  " << std::string(8 - std::to_string(c.fn).size(), ' ') << c.fn
                                        << std::string(8 - std::to_string(c.tn).size(), ' ') << c.tn << "\n";
                                ctx.out << "balanced accuracy " << num(ba, 6) << "\n";
                                nlohmann::ordered_json j;
                                j["tp"] = c.tp;
                                j["fp"] = c.fp;
                                j["tn"] = c.tn;
                                j["fn"] = c.fn;
                                j["balanced_accuracy"] = ba;
                                const fs::path path = ctx.out_dir / "eval.json";
                                write_file(path, j.dump(2) + "\n");
                                rec.outputs = {path};
                                return rec;
                            }});
    }
    // report
    {
        struct Opts {
            std::string run_dir;
        };
        auto o = std::make_shared<Opts>();
        auto* sub = app.add_subcommand("report", "Probe-accuracy heatmaps and loss curves for a training run");
        sub->add_option("--run-dir", o->run_dir, "Output directory of a train run")
            ->required()
            ->check(CLI::ExistingDirectory);
        commands.push_back({sub, [o, &ctx]() {
                                RunRecord rec;
                                const fs::path run = o->run_dir;
                                std::vector<EpochRecord> epochs;
                                for (std::size_t i = 1;; ++i) {
                                    const fs::path p = run / "epochs" / ("epoch-" + std::to_string(i) + ".json");
                                    if (!fs::exists(p)) {
                                        break;
                                    }
                                    rec.inputs.push_back(p);
                                    try {
                                        epochs.push_back(epoch_record_from_json(nlohmann::json::parse(read_file(p))));
                                    } catch (const nlohmann::json::exception& e) {
                                        throw ParseError(p.string() + ": " + e.what());
                                    }
                                }
                                const fs::path metrics = run / "metrics.csv";
                                if (epochs.empty() || !fs::exists(metrics)) {
                                    throw IoError("run directory " + run.string() +
                                                  " lacks training records; expected epochs/epoch-1.json, "
                                                  "epochs/epoch-2.json, ... and metrics.csv");
                                }
                                rec.inputs.push_back(metrics);
                                const auto steps = read_metrics_csv(metrics);

                                std::ostringstream layers;
                                layers.precision(17);
                                layers << "epoch,layer,accuracy,selected\n";
                                const std::size_t n_layers = epochs.front().probe.layer_accuracy.size();
                                std::vector<std::vector<double>> grid(n_layers);
                                std::vector<std::string> rows;
                                std::vector<std::string> cols;
                                for (std::size_t u = 0; u < n_layers; ++u) {
                                    rows.push_back("layer " + std::to_string(u));
                                }
                                for (const auto& e : epochs) {
                                    if (e.probe.layer_accuracy.size() != n_layers) {
                                        throw ConsistencyError("epoch records disagree on the layer count");
                                    }
                                    cols.push_back("epoch " + std::to_string(e.epoch));
                                    for (std::size_t u = 0; u < n_layers; ++u) {
                                        const double a = e.probe.layer_accuracy[u];
                                        grid[u].push_back(a);
                                        layers << e.epoch << ',' << u << ',' << a << ','
                                               << (e.probe.selected.contains(u) ? 1 : 0) << '\n';
                                    }
                                }
                                const fs::path out = ctx.out_dir;
                                auto emit = [&](const fs::path& p, const std::string& text) {
                                    write_file(p, text);
                                    rec.outputs.push_back(p);
                                };
                                emit(out / "probe_layers.csv", layers.str());
                                emit(out / "layer_heatmap.svg",
                                     heatmap_svg(grid, rows, cols, "layer probe accuracy by epoch"));
                                for (const auto& e : epochs) {
                                    if (!e.probe.head_accuracy) {
                                        continue;
                                    }
                                    const auto& ha = *e.probe.head_accuracy;
                                    std::vector<std::string> heads;
                                    for (std::size_t h = 0; h < (ha.empty() ? 0 : ha.front().size()); ++h) {
                                        heads.push_back("head " + std::to_string(h));
                                    }
                                    std::vector<std::string> hrows;
                                    for (std::size_t u = 0; u < ha.size(); ++u) {
                                        hrows.push_back("layer " + std::to_string(u));
                                    }
                                    const std::string tag = "epoch-" + std::to_string(e.epoch);
                                    emit(out / ("head_accuracy-" + tag + ".csv"), head_grid_csv(ha));
                                    emit(out / ("head_heatmap-" + tag + ".svg"),
                                         heatmap_svg(ha, hrows, heads,
                                                     "head probe accuracy, epoch " + std::to_string(e.epoch)));
                                }
                                std::string curve = metrics_csv_header();
                                for (const auto& m : steps) {
                                    curve += metrics_csv_row(m);
                                }
                                emit(out / "loss_curve.csv", curve);
                                emit(out / "loss_curve.svg", loss_curve_svg(steps));
                                ctx.out << "report for " << epochs.size() << " epochs and " << steps.size()
                                        << " steps written to " << out.string() << "\n";
                                rec.config = {{"run_dir", o->run_dir}};
                                return rec;
                            }});
    }
}

} // namespace cpolab::cli
