// SPDX-License-Identifier: Apache-2.0
//
// Tiny pre-norm decoder-only transformer.
//
// Parameter groups: "embedding" (token + learned position tables), one
// "layer.<u>" group per block, and "head" (final norm + output projection).
// Only block groups are ever selected for probing-based training.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cpolab/tensor.hpp"
#include "cpolab/token.hpp"
#include "json.hpp"

namespace cpolab {

struct ModelConfig {
    std::size_t n_layers = 2;
    std::size_t d_model = 64;
    std::size_t n_heads = 2;
    std::size_t vocab_size = 259;
    std::size_t max_seq_len = 256;
    std::size_t d_ff = 0; // 0 means 4 * d_model

    std::size_t ff_width() const noexcept { return d_ff == 0 ? 4 * d_model : d_ff; }
    std::size_t head_dim() const noexcept { return d_model / n_heads; }
    void validate() const; // ConfigError

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::ordered_json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

template <typename T>
struct ParamGroup {
    std::string name;
    std::vector<NamedTensor<T>> tensors;
    bool trainable = true;
};

template <typename T>
struct BlockWeights {
    Tensor<T> ln1_gain, ln1_bias;
    Tensor<T> wq, wk, wv, wo;
    Tensor<T> ln2_gain, ln2_bias;
    Tensor<T> w_in, b_in, w_out, b_out;
};

template <typename T>
class ModelParams {
public:
    static ModelParams init(const ModelConfig& config, std::uint64_t seed);
    // Assembles a parameter set from named tensors; every expected name must be
    // present with the right shape.
    static ModelParams from_tensors(const ModelConfig& config, std::vector<NamedTensor<T>> tensors);

    const ModelConfig& config() const noexcept { return config_; }
    std::vector<ParamGroup<T>>& groups() noexcept { return groups_; }
    const std::vector<ParamGroup<T>>& groups() const noexcept { return groups_; }
    const ParamGroup<T>& group(std::string_view name) const;
    Tensor<T>& tensor(std::string_view name);
    const Tensor<T>& tensor(std::string_view name) const;

    std::size_t parameter_count() const;
    void zero_grad();

    ModelParams clone() const;
    template <typename U>
    ModelParams<U> cast() const;

    const Tensor<T>& token_embedding() const { return token_embedding_; }
    const Tensor<T>& position_embedding() const { return position_embedding_; }
    const BlockWeights<T>& block(std::size_t u) const { return blocks_.at(u); }
    const Tensor<T>& final_gain() const { return final_gain_; }
    const Tensor<T>& final_bias() const { return final_bias_; }
    const Tensor<T>& lm_head() const { return lm_head_; }

    static std::string layer_group_name(std::size_t u) { return "layer." + std::to_string(u); }

private:
    void bind();

    ModelConfig config_;
    std::vector<ParamGroup<T>> groups_;
    Tensor<T> token_embedding_, position_embedding_;
    std::vector<BlockWeights<T>> blocks_;
    Tensor<T> final_gain_, final_bias_, lm_head_;
};

// Marks exactly the listed blocks trainable; embedding and head are frozen.
// Throws ContractError for an index >= n_layers.
template <typename T>
void set_trainable_layers(ModelParams<T>& params, const std::set<std::size_t>& layers);

// Marks every group (embedding and head included) trainable or frozen.
template <typename T>
void set_all_trainable(ModelParams<T>& params, bool trainable);

// (layers, steps, width) values in row-major order.
template <typename T>
struct ActivationTensor {
    std::size_t layers = 0;
    std::size_t steps = 0;
    std::size_t width = 0;
    std::vector<T> values;

    std::span<const T> at(std::size_t layer, std::size_t step) const {
        return std::span<const T>(values).subspan((layer * steps + step) * width, width);
    }
};

struct ForwardOptions {
    // Logits are computed for positions [logits_from, T). T means none.
    std::size_t logits_from = 0;
    bool capture_heads = false;
};

template <typename T>
struct ForwardOutput {
    Tensor<T> logits; // (T - logits_offset) x vocab
    std::size_t logits_offset = 0;
    ActivationTensor<T> hidden; // residual stream after each block, pre final norm
    // Per-head attention outputs before the output projection, (layers, T, d_model);
    // head h of layer u at step t is heads->at(u, t).subspan(h * d_head, d_head).
    std::optional<ActivationTensor<T>> heads;
};

// Throws InputError for empty, over-length or out-of-vocabulary input.
template <typename T>
ForwardOutput<T> forward(const ModelParams<T>& params, std::span<const TokenId> tokens,
                         const ForwardOptions& options = {});

// Entry i is log softmax(logits[i])[targets[i]]. ContractError when the target
// count differs from the logit rows.
template <typename T>
Tensor<T> token_logprobs(const ForwardOutput<T>& out, std::span<const TokenId> targets);

// Argmax continuation of `prompt`. Stops after max_new tokens, on end_token, or
// when the context reaches max_seq_len. Returns prompt + continuation.
template <typename T>
std::vector<TokenId> greedy_decode(const ModelParams<T>& params, std::span<const TokenId> prompt, std::size_t max_new,
                                   std::optional<TokenId> end_token = std::nullopt);

template <typename T>
std::uint64_t params_hash(const ModelParams<T>& params, std::string_view group);

} // namespace cpolab
