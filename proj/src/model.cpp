// SPDX-License-Identifier: Apache-2.0
#include "cpolab/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "cpolab/ops.hpp"

namespace cpolab {

void ModelConfig::validate() const {
    if (n_layers == 0 || d_model == 0 || n_heads == 0 || vocab_size == 0 || max_seq_len == 0) {
        throw ConfigError("model config: n_layers, d_model, n_heads, vocab_size and max_seq_len must be positive");
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("model config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                          std::to_string(n_heads));
    }
}

nlohmann::ordered_json to_json(const ModelConfig& config) {
    nlohmann::ordered_json j;
    j["n_layers"] = config.n_layers;
    j["d_model"] = config.d_model;
    j["n_heads"] = config.n_heads;
    j["vocab_size"] = config.vocab_size;
    j["max_seq_len"] = config.max_seq_len;
    j["d_ff"] = config.d_ff; // 0 means 4 * d_model
    return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) {
        throw ConfigError("model config must be a JSON object");
    }
    ModelConfig config;
    auto read = [&](const char* key, std::size_t& field) {
        if (!j.contains(key)) {
            return;
        }
        const auto& v = j.at(key);
        if (!v.is_number_integer() || v.get<long long>() < 0) {
            throw ConfigError(std::string("model config: '") + key + "' must be a non-negative integer");
        }
        field = v.get<std::size_t>();
    };
    read("n_layers", config.n_layers);
    read("d_model", config.d_model);
    read("n_heads", config.n_heads);
    read("vocab_size", config.vocab_size);
    read("max_seq_len", config.max_seq_len);
    read("d_ff", config.d_ff);
    for (const auto& [key, value] : j.items()) {
        static const std::set<std::string> known{"n_layers", "d_model", "n_heads", "vocab_size", "max_seq_len", "d_ff"};
        if (!known.contains(key)) {
            throw ConfigError("model config: unknown key '" + key + "'");
        }
    }
    config.validate();
    return config;
}

namespace {

struct TensorSpec {
    std::string group;
    std::string name;
    Shape shape;
    enum class Init { normal, residual, zeros, ones } init;
};

std::vector<TensorSpec> layout(const ModelConfig& c) {
    using I = TensorSpec::Init;
    const std::size_t d = c.d_model;
    const std::size_t f = c.ff_width();
    std::vector<TensorSpec> specs{
        {"embedding", "embedding.token", {c.vocab_size, d}, I::normal},
        {"embedding", "embedding.position", {c.max_seq_len, d}, I::normal},
    };
    for (std::size_t u = 0; u < c.n_layers; ++u) {
        const std::string g = "layer." + std::to_string(u);
        specs.push_back({g, g + ".ln1.gain", {d}, I::ones});
        specs.push_back({g, g + ".ln1.bias", {d}, I::zeros});
        specs.push_back({g, g + ".attn.wq", {d, d}, I::normal});
        specs.push_back({g, g + ".attn.wk", {d, d}, I::normal});
        specs.push_back({g, g + ".attn.wv", {d, d}, I::normal});
        specs.push_back({g, g + ".attn.wo", {d, d}, I::residual});
        specs.push_back({g, g + ".ln2.gain", {d}, I::ones});
        specs.push_back({g, g + ".ln2.bias", {d}, I::zeros});
        specs.push_back({g, g + ".mlp.w_in", {d, f}, I::normal});
        specs.push_back({g, g + ".mlp.b_in", {f}, I::zeros});
        specs.push_back({g, g + ".mlp.w_out", {f, d}, I::residual});
        specs.push_back({g, g + ".mlp.b_out", {d}, I::zeros});
    }
    specs.push_back({"head", "head.ln.gain", {d}, I::ones});
    specs.push_back({"head", "head.ln.bias", {d}, I::zeros});
    specs.push_back({"head", "head.proj", {d, c.vocab_size}, I::normal});
    return specs;
}

template <typename T>
std::vector<ParamGroup<T>> group_tensors(const ModelConfig& config, std::vector<NamedTensor<T>> tensors) {
    const auto specs = layout(config);
    if (tensors.size() != specs.size()) {
        throw InputError("parameter set has " + std::to_string(tensors.size()) + " tensors, expected " +
                         std::to_string(specs.size()));
    }
    std::vector<ParamGroup<T>> groups;
    for (const auto& spec : specs) {
        auto it = std::find_if(tensors.begin(), tensors.end(), [&](const auto& nt) { return nt.name == spec.name; });
        if (it == tensors.end()) {
            throw InputError("parameter set is missing '" + spec.name + "'");
        }
        if (it->tensor.shape() != spec.shape) {
            throw DimensionError("parameter '" + spec.name + "' has shape " + shape_str(it->tensor.shape()) +
                                 ", expected " + shape_str(spec.shape));
        }
        if (groups.empty() || groups.back().name != spec.group) {
            groups.push_back({spec.group, {}, true});
        }
        groups.back().tensors.push_back(*it);
    }
    return groups;
}

} // namespace

template <typename T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double std_base = 0.02;
    const double std_residual = 0.02 / std::sqrt(2.0 * static_cast<double>(config.n_layers));
    std::vector<NamedTensor<T>> tensors;
    for (const auto& spec : layout(config)) {
        std::vector<T> values(shape_numel(spec.shape));
        switch (spec.init) {
            case TensorSpec::Init::normal:
                for (auto& v : values) {
                    v = static_cast<T>(std_base * normal(rng));
                }
                break;
            case TensorSpec::Init::residual:
                for (auto& v : values) {
                    v = static_cast<T>(std_residual * normal(rng));
                }
                break;
            case TensorSpec::Init::zeros:
                break;
            case TensorSpec::Init::ones:
                std::fill(values.begin(), values.end(), T{1});
                break;
        }
        tensors.push_back({spec.name, Tensor<T>(spec.shape, std::move(values), true)});
    }
    return from_tensors(config, std::move(tensors));
}

template <typename T>
ModelParams<T> ModelParams<T>::from_tensors(const ModelConfig& config, std::vector<NamedTensor<T>> tensors) {
    config.validate();
    ModelParams params;
    params.config_ = config;
    params.groups_ = group_tensors(config, std::move(tensors));
    params.bind();
    return params;
}

template <typename T>
void ModelParams<T>::bind() {
    token_embedding_ = tensor("embedding.token");
    position_embedding_ = tensor("embedding.position");
    blocks_.clear();
    for (std::size_t u = 0; u < config_.n_layers; ++u) {
        const std::string g = layer_group_name(u);
        blocks_.push_back({tensor(g + ".ln1.gain"), tensor(g + ".ln1.bias"), tensor(g + ".attn.wq"),
                           tensor(g + ".attn.wk"), tensor(g + ".attn.wv"), tensor(g + ".attn.wo"),
                           tensor(g + ".ln2.gain"), tensor(g + ".ln2.bias"), tensor(g + ".mlp.w_in"),
                           tensor(g + ".mlp.b_in"), tensor(g + ".mlp.w_out"), tensor(g + ".mlp.b_out")});
    }
    final_gain_ = tensor("head.ln.gain");
    final_bias_ = tensor("head.ln.bias");
    lm_head_ = tensor("head.proj");
}

template <typename T>
const ParamGroup<T>& ModelParams<T>::group(std::string_view name) const {
    for (const auto& g : groups_) {
        if (g.name == name) {
            return g;
        }
    }
    throw InputError("no parameter group named '" + std::string(name) + "'");
}

template <typename T>
Tensor<T>& ModelParams<T>::tensor(std::string_view name) {
    for (auto& g : groups_) {
        for (auto& nt : g.tensors) {
            if (nt.name == name) {
                return nt.tensor;
            }
        }
    }
    throw InputError("no parameter named '" + std::string(name) + "'");
}

template <typename T>
const Tensor<T>& ModelParams<T>::tensor(std::string_view name) const {
    return const_cast<ModelParams*>(this)->tensor(name);
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& g : groups_) {
        for (const auto& nt : g.tensors) {
            n += nt.tensor.numel();
        }
    }
    return n;
}

template <typename T>
void ModelParams<T>::zero_grad() {
    for (auto& g : groups_) {
        for (auto& nt : g.tensors) {
            nt.tensor.zero_grad();
        }
    }
}

template <typename T>
ModelParams<T> ModelParams<T>::clone() const {
    return cast<T>();
}

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
    std::vector<NamedTensor<U>> tensors;
    for (const auto& g : groups_) {
        for (const auto& nt : g.tensors) {
            std::vector<U> values(nt.tensor.data().begin(), nt.tensor.data().end());
            tensors.push_back({nt.name, Tensor<U>(nt.tensor.shape(), std::move(values), nt.tensor.requires_grad())});
        }
    }
    auto out = ModelParams<U>::from_tensors(config_, std::move(tensors));
    for (std::size_t i = 0; i < groups_.size(); ++i) {
        out.groups()[i].trainable = groups_[i].trainable;
    }
    return out;
}

template <typename T>
void set_trainable_layers(ModelParams<T>& params, const std::set<std::size_t>& layers) {
    for (std::size_t u : layers) {
        if (u >= params.config().n_layers) {
            throw ContractError("layer index " + std::to_string(u) + " out of range for " +
                                std::to_string(params.config().n_layers) + " layers");
        }
    }
    for (auto& g : params.groups()) {
        bool on = false;
        for (std::size_t u : layers) {
            on = on || g.name == ModelParams<T>::layer_group_name(u);
        }
        g.trainable = on;
        for (auto& nt : g.tensors) {
            nt.tensor.set_requires_grad(on);
        }
    }
}

template <typename T>
void set_all_trainable(ModelParams<T>& params, bool trainable) {
    for (auto& g : params.groups()) {
        g.trainable = trainable;
        for (auto& nt : g.tensors) {
            nt.tensor.set_requires_grad(trainable);
        }
    }
}

template <typename T>
ForwardOutput<T> forward(const ModelParams<T>& params, std::span<const TokenId> tokens, const ForwardOptions& options) {
    const ModelConfig& c = params.config();
    const std::size_t len = tokens.size();
    if (len == 0) {
        throw InputError("forward: empty token sequence");
    }
    if (len > c.max_seq_len) {
        throw InputError("forward: sequence of " + std::to_string(len) + " tokens exceeds max_seq_len " +
                         std::to_string(c.max_seq_len));
    }
    if (options.logits_from > len) {
        throw ContractError("forward: logits_from beyond sequence end");
    }
    ForwardOutput<T> out;
    out.hidden = {c.n_layers, len, c.d_model, {}};
    out.hidden.values.reserve(c.n_layers * len * c.d_model);
    if (options.capture_heads) {
        out.heads = ActivationTensor<T>{c.n_layers, len, c.d_model, {}};
        out.heads->values.reserve(c.n_layers * len * c.d_model);
    }

    Tensor<T> x = ops::add(ops::embedding(params.token_embedding(), tokens),
                           ops::slice_rows(params.position_embedding(), 0, len));
    for (std::size_t u = 0; u < c.n_layers; ++u) {
        const BlockWeights<T>& b = params.block(u);
        Tensor<T> h = ops::layer_norm(x, b.ln1_gain, b.ln1_bias);
        Tensor<T> attn = ops::causal_attention(ops::matmul(h, b.wq), ops::matmul(h, b.wk), ops::matmul(h, b.wv),
                                               c.n_heads);
        if (out.heads) {
            out.heads->values.insert(out.heads->values.end(), attn.data().begin(), attn.data().end());
        }
        x = ops::add(x, ops::matmul(attn, b.wo));
        Tensor<T> h2 = ops::layer_norm(x, b.ln2_gain, b.ln2_bias);
        Tensor<T> mlp = ops::add_row(ops::matmul(ops::gelu(ops::add_row(ops::matmul(h2, b.w_in), b.b_in)), b.w_out),
                                     b.b_out);
        x = ops::add(x, mlp);
        out.hidden.values.insert(out.hidden.values.end(), x.data().begin(), x.data().end());
    }
    out.logits_offset = options.logits_from;
    Tensor<T> tail = ops::slice_rows(x, options.logits_from, len);
    out.logits = ops::matmul(ops::layer_norm(tail, params.final_gain(), params.final_bias()), params.lm_head());
    return out;
}

template <typename T>
Tensor<T> token_logprobs(const ForwardOutput<T>& out, std::span<const TokenId> targets) {
    if (out.logits.rank() != 2 || targets.size() != out.logits.dim(0)) {
        throw ContractError("token_logprobs: " + std::to_string(targets.size()) + " targets for logits of shape " +
                            shape_str(out.logits.shape()));
    }
    return ops::pick(ops::log_softmax(out.logits, 1), targets);
}

template <typename T>
std::vector<TokenId> greedy_decode(const ModelParams<T>& params, std::span<const TokenId> prompt, std::size_t max_new,
                                   std::optional<TokenId> end_token) {
    if (prompt.empty()) {
        throw InputError("greedy_decode: empty prompt");
    }
    NoGradGuard no_grad;
    std::vector<TokenId> seq(prompt.begin(), prompt.end());
    for (std::size_t step = 0; step < max_new && seq.size() < params.config().max_seq_len; ++step) {
        ForwardOptions opts;
        opts.logits_from = seq.size() - 1;
        const auto out = forward(params, seq, opts);
        const auto row = out.logits.data();
        const auto best = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
        seq.push_back(best);
        if (end_token && best == *end_token) {
            break;
        }
    }
    return seq;
}

template <typename T>
std::uint64_t params_hash(const ModelParams<T>& params, std::string_view group) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& nt : params.group(group).tensors) {
        h ^= tensor_hash(nt.tensor);
        h *= 1099511628211ULL;
    }
    return h;
}

template class ModelParams<float>;
template class ModelParams<double>;
template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<double>::cast<float>() const;

#define CPOLAB_INSTANTIATE_MODEL(T)                                                                               \
    template void set_trainable_layers(ModelParams<T>&, const std::set<std::size_t>&);                            \
    template void set_all_trainable(ModelParams<T>&, bool);                                                       \
    template ForwardOutput<T> forward(const ModelParams<T>&, std::span<const TokenId>, const ForwardOptions&);    \
    template Tensor<T> token_logprobs(const ForwardOutput<T>&, std::span<const TokenId>);                         \
    template std::vector<TokenId> greedy_decode(const ModelParams<T>&, std::span<const TokenId>, std::size_t,     \
                                                std::optional<TokenId>);                                          \
    template std::uint64_t params_hash(const ModelParams<T>&, std::string_view);

CPOLAB_INSTANTIATE_MODEL(float)
CPOLAB_INSTANTIATE_MODEL(double)

#undef CPOLAB_INSTANTIATE_MODEL

} // namespace cpolab
