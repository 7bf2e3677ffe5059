// SPDX-License-Identifier: Apache-2.0
#include "cpolab/probe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "cpolab/errors.hpp"
#include "cpolab/hash.hpp"

namespace cpolab {

std::vector<ProbePair> load_probe_pairs(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read probe pairs " + path.string());
    }
    std::vector<ProbePair> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            ProbePair p;
            for (auto [key, field] : {std::pair{"doc_id", &p.doc_id}, std::pair{"article", &p.article},
                                      std::pair{"correct_summary", &p.correct_summary},
                                      std::pair{"incorrect_summary", &p.incorrect_summary}}) {
                if (!j.contains(key)) {
                    throw ParseError(std::string("missing field '") + key + "'", line_no);
                }
                *field = j.at(key).get<std::string>();
            }
            if (p.correct_summary.empty() || p.incorrect_summary.empty()) {
                throw ParseError("empty summary in probe pair '" + p.doc_id + "'", line_no);
            }
            out.push_back(std::move(p));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path.string() + ": " + e.what(), line_no);
        }
    }
    return out;
}

void save_probe_pairs(const std::filesystem::path& path, const std::vector<ProbePair>& pairs) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot write probe pairs " + path.string());
    }
    for (const auto& p : pairs) {
        nlohmann::ordered_json j;
        j["doc_id"] = p.doc_id;
        j["article"] = p.article;
        j["correct_summary"] = p.correct_summary;
        j["incorrect_summary"] = p.incorrect_summary;
        out << j.dump() << '\n';
    }
}

std::vector<ProbeRecord> expand_pairs(const std::vector<ProbePair>& pairs) {
    std::vector<ProbeRecord> out;
    out.reserve(pairs.size() * 2);
    for (const auto& p : pairs) {
        out.push_back({p.doc_id + "/correct", p.article, p.correct_summary, 1});
        out.push_back({p.doc_id + "/incorrect", p.article, p.incorrect_summary, 0});
    }
    return out;
}

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

double sigmoid(double z) {
    if (z >= 0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// -[y log s(z) + (1 - y) log(1 - s(z))], stable for large |z|.
double bce(double z, int y) {
    return std::log1p(std::exp(-std::abs(z))) + std::max(z, 0.0) - (y == 1 ? z : 0.0);
}

} // namespace

double LinearProbe::probability(std::span<const double> features) const {
    if (features.size() != weights.size()) {
        throw DimensionError("probe expects " + std::to_string(weights.size()) + " features, got " +
                             std::to_string(features.size()));
    }
    return sigmoid(dot(weights, features) + bias);
}

nlohmann::ordered_json to_json(const ProbeTrainConfig& config) {
    return {{"lr", config.lr}, {"epochs", config.epochs}, {"standardize", config.standardize}};
}

ProbeFit train_probe(std::span<const ProbeSample> samples, const ProbeTrainConfig& config) {
    if (samples.empty()) {
        throw InputError("probe training set is empty");
    }
    const std::size_t d = samples.front().features.size();
    std::size_t positives = 0;
    for (const auto& s : samples) {
        if (s.features.size() != d) {
            throw InputError("probe features have inconsistent widths");
        }
        if (s.y != 0 && s.y != 1) {
            throw InputError("probe labels must be 0 or 1");
        }
        positives += static_cast<std::size_t>(s.y);
    }
    if (positives == 0 || positives == samples.size()) {
        throw DegenerateDataError("probe training split holds a single class");
    }
    const double n = static_cast<double>(samples.size());

    std::vector<double> mean(d, 0.0);
    std::vector<double> inv_std(d, 1.0);
    if (config.standardize) {
        for (const auto& s : samples) {
            for (std::size_t j = 0; j < d; ++j) {
                mean[j] += s.features[j];
            }
        }
        for (auto& m : mean) {
            m /= n;
        }
        std::vector<double> var(d, 0.0);
        for (const auto& s : samples) {
            for (std::size_t j = 0; j < d; ++j) {
                const double c = s.features[j] - mean[j];
                var[j] += c * c;
            }
        }
        for (std::size_t j = 0; j < d; ++j) {
            const double sd = std::sqrt(var[j] / n);
            inv_std[j] = sd > 1e-12 ? 1.0 / sd : 0.0;
        }
    }
    std::vector<std::vector<double>> x(samples.size(), std::vector<double>(d));
    for (std::size_t i = 0; i < samples.size(); ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            x[i][j] = (samples[i].features[j] - mean[j]) * inv_std[j];
        }
    }

    std::vector<double> w(d, 0.0);
    double b = 0.0;
    ProbeFit fit;
    fit.loss_history.reserve(config.epochs + 1);
    std::vector<double> gw(d);
    for (std::size_t epoch = 0; epoch <= config.epochs; ++epoch) {
        std::fill(gw.begin(), gw.end(), 0.0);
        double gb = 0.0;
        double loss = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double z = dot(w, x[i]) + b;
            loss += bce(z, samples[i].y);
            const double r = sigmoid(z) - samples[i].y;
            for (std::size_t j = 0; j < d; ++j) {
                gw[j] += r * x[i][j];
            }
            gb += r;
        }
        fit.loss_history.push_back(loss / n);
        if (epoch == config.epochs) {
            break;
        }
        for (std::size_t j = 0; j < d; ++j) {
            w[j] -= config.lr * gw[j] / n;
        }
        b -= config.lr * gb / n;
    }

    fit.probe.weights.resize(d);
    fit.probe.bias = b;
    for (std::size_t j = 0; j < d; ++j) {
        fit.probe.weights[j] = w[j] * inv_std[j];
        fit.probe.bias -= fit.probe.weights[j] * mean[j];
    }
    return fit;
}

double probe_accuracy(const LinearProbe& probe, std::span<const ProbeSample> heldout) {
    if (heldout.empty()) {
        throw InputError("probe accuracy needs at least one held-out record");
    }
    std::size_t hits = 0;
    for (const auto& s : heldout) {
        hits += probe.classify(s.features) == s.y ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(heldout.size());
}

std::set<std::size_t> select_worst_layers(std::span<const double> accuracy, std::size_t k) {
    if (accuracy.empty()) {
        throw InputError("no layer accuracies to select from");
    }
    if (k == 0) {
        throw InputError("k must be at least 1");
    }
    std::vector<std::size_t> order(accuracy.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return accuracy[a] < accuracy[b]; });
    order.resize(std::min(k, order.size()));
    return {order.begin(), order.end()};
}

bool in_probe_train_split(const ProbeRecord& record) {
    return fnv1a64(record.summary, fnv1a64(record.id + '\x1f')) % 5 != 0;
}

template <typename T>
RecordFeatures extract_features(const ModelParams<T>& params, const InstructionPair& instructions,
                                const ByteTokenizer& tokenizer, const ProbeRecord& record, bool capture_heads) {
    if (record.summary.empty()) {
        throw InputError("probe record '" + record.id + "' has an empty summary");
    }
    std::vector<TokenId> tokens = tokenizer.encode_prompt(instructions.render(Instruction::contextual, record.article));
    const auto summary = tokenizer.encode(record.summary);
    tokens.insert(tokens.end(), summary.begin(), summary.end());
    if (tokens.size() > params.config().max_seq_len) {
        throw InputError("probe record '" + record.id + "' is " + std::to_string(tokens.size()) +
                         " tokens, over the limit of " + std::to_string(params.config().max_seq_len));
    }
    NoGradGuard no_grad;
    ForwardOptions opts;
    opts.logits_from = tokens.size();
    opts.capture_heads = capture_heads;
    const auto out = forward(params, tokens, opts);
    const std::size_t last = tokens.size() - 1;
    RecordFeatures f;
    for (std::size_t u = 0; u < out.hidden.layers; ++u) {
        const auto h = out.hidden.at(u, last);
        f.layers.emplace_back(h.begin(), h.end());
    }
    if (capture_heads) {
        const std::size_t n_heads = params.config().n_heads;
        const std::size_t d_head = params.config().head_dim();
        f.heads.resize(out.heads->layers);
        for (std::size_t u = 0; u < out.heads->layers; ++u) {
            const auto row = out.heads->at(u, last);
            for (std::size_t h = 0; h < n_heads; ++h) {
                const auto slice = row.subspan(h * d_head, d_head);
                f.heads[u].emplace_back(slice.begin(), slice.end());
            }
        }
    }
    return f;
}

HeadStats head_stats(const std::vector<std::vector<double>>& accuracy) {
    HeadStats s{0.0, -1.0, 2.0};
    std::size_t n = 0;
    for (const auto& row : accuracy) {
        for (double a : row) {
            s.mean += a;
            s.max = std::max(s.max, a);
            s.min = std::min(s.min, a);
            ++n;
        }
    }
    if (n == 0) {
        throw InputError("no head accuracies");
    }
    s.mean /= static_cast<double>(n);
    return s;
}

std::optional<HeadStats> ProbeReport::head_stats() const {
    if (!head_accuracy) {
        return std::nullopt;
    }
    return cpolab::head_stats(*head_accuracy);
}

nlohmann::ordered_json to_json(const ProbeReport& report) {
    nlohmann::ordered_json j;
    j["epoch"] = report.epoch;
    j["layer_accuracy"] = report.layer_accuracy;
    j["selected"] = std::vector<std::size_t>(report.selected.begin(), report.selected.end());
    if (report.head_accuracy) {
        j["head_accuracy"] = *report.head_accuracy;
        const auto s = *report.head_stats();
        j["head_stats"] = {{"mean", s.mean}, {"max", s.max}, {"min", s.min}};
    }
    return j;
}

ProbeReport probe_report_from_json(const nlohmann::json& j) {
    try {
        ProbeReport r;
        r.epoch = j.at("epoch").get<std::size_t>();
        r.layer_accuracy = j.at("layer_accuracy").get<std::vector<double>>();
        const auto sel = j.at("selected").get<std::vector<std::size_t>>();
        r.selected = {sel.begin(), sel.end()};
        if (j.contains("head_accuracy")) {
            r.head_accuracy = j.at("head_accuracy").get<std::vector<std::vector<double>>>();
        }
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("probe report: ") + e.what());
    }
}

namespace {

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> heldout;
};

Split split_records(const std::vector<ProbeRecord>& records) {
    Split s;
    for (std::size_t i = 0; i < records.size(); ++i) {
        (in_probe_train_split(records[i]) ? s.train : s.heldout).push_back(i);
    }
    if (s.train.empty() || s.heldout.empty()) {
        throw DegenerateDataError("probe set of " + std::to_string(records.size()) +
                                  " records leaves an empty train or held-out split");
    }
    return s;
}

template <typename Get>
double fit_and_score(const std::vector<ProbeRecord>& records, const Split& split, const ProbeTrainConfig& config,
                     Get features_of) {
    auto gather = [&](const std::vector<std::size_t>& idx) {
        std::vector<ProbeSample> out;
        out.reserve(idx.size());
        for (std::size_t i : idx) {
            out.push_back({features_of(i), records[i].y});
        }
        return out;
    };
    const auto train = gather(split.train);
    const auto heldout = gather(split.heldout);
    return probe_accuracy(train_probe(train, config).probe, heldout);
}

template <typename T>
std::vector<RecordFeatures> all_features(const ModelParams<T>& params, const std::vector<ProbeRecord>& records,
                                         const InstructionPair& instructions, const ByteTokenizer& tokenizer,
                                         bool capture_heads) {
    std::vector<RecordFeatures> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        out.push_back(extract_features(params, instructions, tokenizer, r, capture_heads));
    }
    return out;
}

std::vector<std::vector<double>> head_matrix(const std::vector<ProbeRecord>& records, const Split& split,
                                             const std::vector<RecordFeatures>& feats, const ProbeTrainConfig& config,
                                             std::size_t n_layers, std::size_t n_heads) {
    std::vector<std::vector<double>> acc(n_layers, std::vector<double>(n_heads));
    for (std::size_t u = 0; u < n_layers; ++u) {
        for (std::size_t h = 0; h < n_heads; ++h) {
            acc[u][h] = fit_and_score(records, split, config, [&](std::size_t i) { return feats[i].heads[u][h]; });
        }
    }
    return acc;
}

} // namespace

template <typename T>
ProbeReport probe_model(const ModelParams<T>& params, const std::vector<ProbeRecord>& records,
                        const InstructionPair& instructions, const ByteTokenizer& tokenizer,
                        const ProbeOptions& options, std::size_t epoch) {
    if (records.empty()) {
        throw InputError("probe set is empty");
    }
    const Split split = split_records(records);
    const auto feats = all_features(params, records, instructions, tokenizer, options.capture_heads);
    const std::size_t n_layers = params.config().n_layers;
    ProbeReport report;
    report.epoch = epoch;
    report.layer_accuracy.resize(n_layers);
    for (std::size_t u = 0; u < n_layers; ++u) {
        report.layer_accuracy[u] =
            fit_and_score(records, split, options.train, [&](std::size_t i) { return feats[i].layers[u]; });
    }
    if (options.capture_heads) {
        report.head_accuracy = head_matrix(records, split, feats, options.train, n_layers, params.config().n_heads);
    }
    report.selected = select_worst_layers(report.layer_accuracy, options.k);
    return report;
}

template <typename T>
HeadProbeReport head_probe_report(const ModelParams<T>& params, const std::vector<ProbeRecord>& records,
                                  const InstructionPair& instructions, const ByteTokenizer& tokenizer,
                                  const ProbeOptions& options) {
    if (!options.capture_heads) {
        throw ConfigError("head probing needs head activation capture enabled");
    }
    if (records.empty()) {
        throw InputError("probe set is empty");
    }
    const Split split = split_records(records);
    const auto feats = all_features(params, records, instructions, tokenizer, true);
    HeadProbeReport r;
    r.accuracy =
        head_matrix(records, split, feats, options.train, params.config().n_layers, params.config().n_heads);
    r.stats = head_stats(r.accuracy);
    return r;
}

std::string layer_report_csv(const ProbeReport& report) {
    std::ostringstream out;
    out.precision(17);
    out << "layer,accuracy,selected\n";
    for (std::size_t u = 0; u < report.layer_accuracy.size(); ++u) {
        out << u << ',' << report.layer_accuracy[u] << ',' << (report.selected.contains(u) ? 1 : 0) << '\n';
    }
    return out.str();
}

std::string head_grid_csv(const std::vector<std::vector<double>>& accuracy) {
    std::ostringstream out;
    out.precision(17);
    out << "layer";
    const std::size_t n_heads = accuracy.empty() ? 0 : accuracy.front().size();
    for (std::size_t h = 0; h < n_heads; ++h) {
        out << ",head" << h;
    }
    out << '\n';
    for (std::size_t u = 0; u < accuracy.size(); ++u) {
        out << u;
        for (double a : accuracy[u]) {
            out << ',' << a;
        }
        out << '\n';
    }
    return out.str();
}

#define CPOLAB_INSTANTIATE_PROBE(T)                                                                                 \
    template RecordFeatures extract_features<T>(const ModelParams<T>&, const InstructionPair&, const ByteTokenizer&, \
                                                const ProbeRecord&, bool);                                          \
    template ProbeReport probe_model<T>(const ModelParams<T>&, const std::vector<ProbeRecord>&,                     \
                                        const InstructionPair&, const ByteTokenizer&, const ProbeOptions&,          \
                                        std::size_t);                                                               \
    template HeadProbeReport head_probe_report<T>(const ModelParams<T>&, const std::vector<ProbeRecord>&,           \
                                                  const InstructionPair&, const ByteTokenizer&, const ProbeOptions&);

CPOLAB_INSTANTIATE_PROBE(float)
CPOLAB_INSTANTIATE_PROBE(double)

} // namespace cpolab
