// SPDX-License-Identifier: Apache-2.0
//
// Linear probes on hidden states. Each record is rendered as the contextual
// instruction followed by its summary, and the residual stream at the final
// summary token is read from every layer. A logistic classifier per layer
// (or per attention head) predicts whether the summary is faithful; layers
// with the worst held-out accuracy are selected for training.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cpolab/cpo.hpp"
#include "cpolab/model.hpp"
#include "cpolab/tokenizer.hpp"
#include "json.hpp"

namespace cpolab {

struct ProbeRecord {
    std::string id;
    std::string article;
    std::string summary;
    int y = 1;
};

// An article with one faithful and one unfaithful summary.
struct ProbePair {
    std::string doc_id;
    std::string article;
    std::string correct_summary;
    std::string incorrect_summary;
};

// JSONL lines {doc_id, article, correct_summary, incorrect_summary}.
// ParseError with line number on malformed lines.
std::vector<ProbePair> load_probe_pairs(const std::filesystem::path& path);
void save_probe_pairs(const std::filesystem::path& path, const std::vector<ProbePair>& pairs);
// Two records per pair: the correct summary with y = 1, then the incorrect one.
std::vector<ProbeRecord> expand_pairs(const std::vector<ProbePair>& pairs);

struct ProbeSample {
    std::vector<double> features;
    int y = 0;
};

struct LinearProbe {
    std::vector<double> weights;
    double bias = 0.0;

    double probability(std::span<const double> features) const;
    int classify(std::span<const double> features) const { return probability(features) > 0.5 ? 1 : 0; }
};

struct ProbeTrainConfig {
    double lr = 0.01;
    std::size_t epochs = 200;
    // Gradient descent runs on features standardized with training-set
    // statistics; the returned probe is mapped back to raw features.
    bool standardize = true;
};

nlohmann::ordered_json to_json(const ProbeTrainConfig& config);

struct ProbeFit {
    LinearProbe probe;
    std::vector<double> loss_history; // mean BCE before each epoch, then final
};

// Full-batch gradient descent on mean binary cross-entropy from a zero start.
// DegenerateDataError unless both classes are present; InputError on ragged
// or empty input.
ProbeFit train_probe(std::span<const ProbeSample> samples, const ProbeTrainConfig& config);

// Fraction with classify(features) == y. InputError when empty.
double probe_accuracy(const LinearProbe& probe, std::span<const ProbeSample> heldout);

// The min(k, N) lowest accuracies, ties to the lower index. InputError for
// empty A or k == 0.
std::set<std::size_t> select_worst_layers(std::span<const double> accuracy, std::size_t k);

// 80/20 split by record hash; true for the training side.
bool in_probe_train_split(const ProbeRecord& record);

struct RecordFeatures {
    std::vector<std::vector<double>> layers;             // N x d_model
    std::vector<std::vector<std::vector<double>>> heads; // N x n_heads x d_head, when captured
};

// InputError when the rendered record exceeds max_seq_len.
template <typename T>
RecordFeatures extract_features(const ModelParams<T>& params, const InstructionPair& instructions,
                                const ByteTokenizer& tokenizer, const ProbeRecord& record, bool capture_heads = false);

struct HeadStats {
    double mean = 0.0;
    double max = 0.0;
    double min = 0.0;
};

struct ProbeReport {
    std::size_t epoch = 0;
    std::vector<double> layer_accuracy;
    std::optional<std::vector<std::vector<double>>> head_accuracy; // N x n_heads
    std::set<std::size_t> selected;

    std::optional<HeadStats> head_stats() const;
};

nlohmann::ordered_json to_json(const ProbeReport& report);
ProbeReport probe_report_from_json(const nlohmann::json& j);

struct ProbeOptions {
    ProbeTrainConfig train;
    std::size_t k = 4;
    bool capture_heads = false;
};

// Extracts features for all records, fits one probe per layer (and per head
// when captured) on the training split and scores the held-out split.
template <typename T>
ProbeReport probe_model(const ModelParams<T>& params, const std::vector<ProbeRecord>& records,
                        const InstructionPair& instructions, const ByteTokenizer& tokenizer,
                        const ProbeOptions& options, std::size_t epoch = 0);

// Per-head diagnostic. ConfigError when head capture is disabled.
struct HeadProbeReport {
    std::vector<std::vector<double>> accuracy; // N x n_heads
    HeadStats stats;
};

template <typename T>
HeadProbeReport head_probe_report(const ModelParams<T>& params, const std::vector<ProbeRecord>& records,
                                  const InstructionPair& instructions, const ByteTokenizer& tokenizer,
                                  const ProbeOptions& options);

HeadStats head_stats(const std::vector<std::vector<double>>& accuracy);

// "layer,accuracy,selected" rows.
std::string layer_report_csv(const ProbeReport& report);
// One row per layer, one column per head.
std::string head_grid_csv(const std::vector<std::vector<double>>& accuracy);

} // namespace cpolab
