// SPDX-License-Identifier: Apache-2.0
//
// Probing-guided training loop. Every epoch probes the current model on the
// probe set, selects the k layers with the worst held-out accuracy, and runs
// one pass over the training set updating only those layers with the
// contrastive objective.
//
// Output directory layout (when an output directory is given):
//   metrics.csv                   step,loss,incentive,penalty,lr
//   epochs/epoch-<i>.json         one EpochRecord per epoch, 1-based
//   checkpoints/epoch-<i>/        parameters and optimizer state
//   checkpoints/diverged-step-<s>/  written before a DivergenceError
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cpolab/checkpoint.hpp"
#include "cpolab/cpo.hpp"
#include "cpolab/model.hpp"
#include "cpolab/probe.hpp"
#include "json.hpp"

namespace cpolab {

struct TrainConfig {
    std::size_t batch_size = 8;
    std::size_t epochs = 5;
    double lr = 1e-5;
    double weight_decay = 3e-7;
    double warmup_ratio = 0.2;
    double alpha = 0.05;
    std::size_t k = 4;
    std::uint64_t seed = 0;

    double eps = 1e-7;
    bool normalize_per_token = true;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    ProbeTrainConfig probe;
    bool probe_heads = false;

    CpoConfig cpo() const { return {alpha, eps, normalize_per_token}; }
    // Every violated constraint, empty when valid.
    std::vector<std::string> problems() const;
    // ConfigError listing every problem.
    void validate() const;
};

nlohmann::ordered_json to_json(const TrainConfig& config);
// Missing keys keep their defaults; unknown keys raise ConfigError.
TrainConfig train_config_from_json(const nlohmann::json& j);

// Linear warmup from 0 over warmup_ratio * total_steps, then constant lr.
// ContractError when step > total_steps.
double lr_schedule(std::size_t step, std::size_t total_steps, const TrainConfig& config);

// Permutation of [0, n) for one epoch; a pure function of (n, seed, epoch).
std::vector<std::size_t> batch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);

// Adam moments with decoupled weight decay. State is per tensor and only
// touched while the tensor is trainable.
template <typename T>
class AdamW {
public:
    struct Slot {
        std::vector<T> m;
        std::vector<T> v;
        std::uint64_t t = 0;
    };

    AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    // w <- w - lr * wd * w, then the Adam step, on every trainable tensor.
    // DivergenceError on a non-finite gradient, before anything is modified.
    void step(ModelParams<T>& params, double lr, double weight_decay);
    void reset_group(const ModelParams<T>& params, const std::string& group);
    const std::map<std::string, Slot>& state() const noexcept { return state_; }

    void save(Checkpoint& checkpoint) const;
    void load(const Checkpoint& checkpoint);

private:
    double beta1_, beta2_, eps_;
    std::map<std::string, Slot> state_;
};

struct StepMetrics {
    std::size_t step = 0; // 1-based, global
    LossBreakdown loss;
    double lr = 0.0;
};

struct EpochRecord {
    std::size_t epoch = 0; // 1-based
    ProbeReport probe;
    LossBreakdown mean_loss;
    std::set<std::size_t> updated_layers;
    std::string checkpoint;
    std::size_t steps = 0;
};

nlohmann::ordered_json to_json(const EpochRecord& record);
EpochRecord epoch_record_from_json(const nlohmann::json& j);

struct TrainHooks {
    // Replaces the probe accuracies of an epoch (1-based) when it returns a value.
    std::function<std::optional<std::vector<double>>(std::size_t epoch)> accuracy_override;
    std::function<void(const StepMetrics&)> on_step;
    std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainOptions {
    std::filesystem::path out_dir; // empty: nothing is written
    // Checkpoint directory written by an earlier run with the same config.
    std::optional<std::filesystem::path> resume_from;
    InstructionPair instructions = InstructionPair::defaults();
};

template <typename T>
struct TrainResult {
    ModelParams<T> params;
    std::vector<EpochRecord> epochs;
    std::vector<StepMetrics> steps;
};

// InputError for empty datasets; DivergenceError on a non-finite loss or
// gradient, after writing a diagnostic checkpoint when out_dir is set.
template <typename T>
TrainResult<T> train(const std::vector<CpoExample>& train_set, const std::vector<ProbeRecord>& probe_set,
                     const ModelParams<T>& params, const TrainConfig& config, const TrainOptions& options = {},
                     const TrainHooks& hooks = {});

std::string metrics_csv_header();
std::string metrics_csv_row(const StepMetrics& metrics);

} // namespace cpolab
