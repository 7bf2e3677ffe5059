// SPDX-License-Identifier: Apache-2.0
#include "cpolab/cpo.hpp"

#include <algorithm>
#include <cmath>

#include "cpolab/errors.hpp"
#include "cpolab/ops.hpp"

namespace cpolab {

std::string to_string(Instruction instruction) {
    return instruction == Instruction::contextual ? "contextual" : "internal";
}

InstructionPair InstructionPair::defaults() {
    return {"Article: [ARTICLE]. Write a summary consistent with the above article in no more than 40 words:",
            "Article: [ARTICLE]. Write a summary inconsistent with the above article in no more than 40 words:"};
}

namespace {

std::size_t count_of(std::string_view text, std::string_view needle) {
    std::size_t n = 0;
    for (std::size_t pos = text.find(needle); pos != std::string_view::npos; pos = text.find(needle, pos + 1)) {
        ++n;
    }
    return n;
}

} // namespace

void InstructionPair::validate() const {
    for (const auto* t : {&contextual_template, &internal_template}) {
        if (count_of(*t, kArticlePlaceholder) != 1) {
            throw ConfigError("instruction template must contain exactly one " + std::string(kArticlePlaceholder) +
                              ": " + *t);
        }
    }
    const std::size_t at = internal_template.find("inconsistent");
    if (at == std::string::npos) {
        throw ConfigError("internal instruction must ask for an inconsistent summary");
    }
    std::string expected = internal_template;
    expected.replace(at, 12, "consistent");
    if (expected != contextual_template) {
        throw ConfigError("instructions must differ only in 'consistent' versus 'inconsistent'");
    }
}

std::string InstructionPair::render(Instruction which, std::string_view article) const {
    std::string out = which == Instruction::contextual ? contextual_template : internal_template;
    const std::size_t at = out.find(kArticlePlaceholder);
    if (at == std::string::npos) {
        throw ConfigError("instruction template has no " + std::string(kArticlePlaceholder));
    }
    out.replace(at, kArticlePlaceholder.size(), article);
    return out;
}

int compute_y(std::span<const int> sentence_labels) {
    if (sentence_labels.empty()) {
        throw InputError("Y is undefined for a summary without sentences");
    }
    return std::all_of(sentence_labels.begin(), sentence_labels.end(), [](int l) { return l != 0; }) ? 1 : 0;
}

std::size_t MaskSet::incentive_count() const {
    return static_cast<std::size_t>(std::count(incentive_mask.begin(), incentive_mask.end(), 1));
}

std::size_t MaskSet::penalty_count() const {
    return static_cast<std::size_t>(std::count(penalty_mask.begin(), penalty_mask.end(), 1));
}

MaskSet build_masks(const TokenizedSample& sample) {
    const std::size_t n = sample.summary_tokens.size();
    if (sample.token_label.size() != n) {
        throw ContractError("token labels do not cover the summary");
    }
    MaskSet m;
    if (sample.y == 1) {
        m.incentive_instruction = Instruction::contextual;
        m.penalty_instruction = Instruction::internal;
        m.incentive_mask.assign(n, 1);
        m.penalty_mask.assign(n, 1);
    } else {
        m.incentive_instruction = Instruction::internal;
        m.penalty_instruction = Instruction::contextual;
        m.incentive_mask.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            m.incentive_mask[i] = sample.token_label[i] == 0 ? 1 : 0;
        }
        m.penalty_mask = m.incentive_mask;
    }
    return m;
}

double incentive_loss(std::span<const double> logprobs, std::span<const std::uint8_t> mask) {
    if (logprobs.size() != mask.size()) {
        throw ContractError("incentive: " + std::to_string(logprobs.size()) + " log-probs for " +
                            std::to_string(mask.size()) + " mask entries");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i] != 0) {
            s += logprobs[i];
        }
    }
    return s;
}

double penalty_loss(std::span<const double> probs, std::span<const std::uint8_t> mask, double eps) {
    if (probs.size() != mask.size()) {
        throw ContractError("penalty: " + std::to_string(probs.size()) + " probabilities for " +
                            std::to_string(mask.size()) + " mask entries");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i] != 0) {
            s += std::log(std::max(1.0 - probs[i], eps));
        }
    }
    return s;
}

double total_objective(double incentive, double penalty, double alpha) {
    if (!(alpha >= 0.0)) {
        throw ContractError("alpha must be non-negative");
    }
    return -(incentive + alpha * penalty);
}

void CpoConfig::validate() const {
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) {
        throw ConfigError("alpha must be a finite non-negative number");
    }
    if (!(eps > 0.0 && eps < 1.0)) {
        throw ConfigError("eps must lie in (0, 1)");
    }
}

nlohmann::ordered_json to_json(const CpoConfig& config) {
    return {{"alpha", config.alpha}, {"eps", config.eps}, {"normalize_per_token", config.normalize_per_token}};
}

nlohmann::ordered_json to_json(const LossBreakdown& b) {
    return {{"incentive", b.incentive},         {"penalty", b.penalty},
            {"total", b.total},                 {"loss", b.loss},
            {"incentive_sum", b.incentive_sum}, {"penalty_sum", b.penalty_sum},
            {"incentive_tokens", b.incentive_tokens}, {"penalty_tokens", b.penalty_tokens},
            {"alpha", b.alpha}};
}

std::vector<TokenId> CpoExample::input(Instruction which) const {
    std::vector<TokenId> out = prompt(which);
    out.insert(out.end(), summary.begin(), summary.end() - (summary.empty() ? 0 : 1));
    return out;
}

CpoExample make_example(const AnnotatedSummary& record, const InstructionPair& instructions,
                        const ByteTokenizer& tokenizer) {
    const TokenizedSample c = align_tokens(record, tokenizer, instructions.render(Instruction::contextual, record.article));
    CpoExample ex;
    ex.contextual_prompt = c.prompt_tokens;
    ex.internal_prompt = tokenizer.encode_prompt(instructions.render(Instruction::internal, record.article));
    ex.summary = c.summary_tokens;
    ex.token_label = c.token_label;
    ex.y = c.y;
    ex.masks = build_masks(c);
    return ex;
}

template <typename T>
CpoTerms<T> cpo_terms_from_logits(const Tensor<T>& contextual_logits, const Tensor<T>& internal_logits,
                                  std::span<const TokenId> targets, const MaskSet& masks, double eps) {
    const std::size_t n = targets.size();
    if (masks.incentive_mask.size() != n || masks.penalty_mask.size() != n) {
        throw ContractError("masks do not match the summary length");
    }
    auto logprobs = [&](Instruction which) {
        const Tensor<T>& logits = which == Instruction::contextual ? contextual_logits : internal_logits;
        if (logits.rank() != 2 || logits.dim(0) != n) {
            throw ContractError("expected " + std::to_string(n) + " logit rows, got shape " +
                                shape_str(logits.shape()));
        }
        return ops::pick(ops::log_softmax(logits, 1), targets);
    };
    auto weights = [](const std::vector<std::uint8_t>& mask) {
        return std::vector<T>(mask.begin(), mask.end());
    };
    CpoTerms<T> terms;
    const auto inc_w = weights(masks.incentive_mask);
    const auto pen_w = weights(masks.penalty_mask);
    terms.incentive_sum = ops::weighted_sum(logprobs(masks.incentive_instruction), std::span<const T>(inc_w));
    terms.penalty_sum = ops::weighted_sum(ops::log1m_exp(logprobs(masks.penalty_instruction), static_cast<T>(eps)),
                                          std::span<const T>(pen_w));
    terms.incentive_tokens = masks.incentive_count();
    terms.penalty_tokens = masks.penalty_count();
    return terms;
}

template <typename T>
CpoTerms<T> cpo_terms(const ModelParams<T>& params, const CpoExample& example, double eps) {
    const std::size_t n = example.summary.size();
    if (n == 0) {
        throw InputError("example has an empty summary");
    }
    auto logits = [&](Instruction which) {
        const auto input = example.input(which);
        ForwardOptions opts;
        opts.logits_from = example.prompt(which).size() - 1;
        return forward(params, input, opts).logits;
    };
    // Only run the passes the masks use; with both masks empty nothing is needed.
    const bool any = example.masks.incentive_count() + example.masks.penalty_count() > 0;
    if (!any) {
        CpoTerms<T> terms;
        terms.incentive_sum = Tensor<T>::scalar(T(0));
        terms.penalty_sum = Tensor<T>::scalar(T(0));
        return terms;
    }
    const Tensor<T> c = logits(Instruction::contextual);
    const Tensor<T> i = logits(Instruction::internal);
    return cpo_terms_from_logits(c, i, example.summary, example.masks, eps);
}

template <typename T>
Tensor<T> cpo_sample_loss(const CpoTerms<T>& terms, std::size_t batch_incentive_tokens,
                          std::size_t batch_penalty_tokens, const CpoConfig& config) {
    double inc_scale = 1.0;
    double pen_scale = config.alpha;
    if (config.normalize_per_token) {
        inc_scale = batch_incentive_tokens > 0 ? 1.0 / static_cast<double>(batch_incentive_tokens) : 0.0;
        pen_scale = batch_penalty_tokens > 0 ? config.alpha / static_cast<double>(batch_penalty_tokens) : 0.0;
    }
    return ops::add(ops::scale(terms.incentive_sum, static_cast<T>(-inc_scale)),
                    ops::scale(terms.penalty_sum, static_cast<T>(-pen_scale)));
}

LossBreakdown summarize_losses(std::span<const double> incentive_sums, std::span<const double> penalty_sums,
                               std::size_t incentive_tokens, std::size_t penalty_tokens, const CpoConfig& config) {
    LossBreakdown b;
    b.alpha = config.alpha;
    b.incentive_tokens = incentive_tokens;
    b.penalty_tokens = penalty_tokens;
    for (double v : incentive_sums) {
        b.incentive_sum += v;
    }
    for (double v : penalty_sums) {
        b.penalty_sum += v;
    }
    b.incentive = b.incentive_sum;
    b.penalty = b.penalty_sum;
    if (config.normalize_per_token) {
        b.incentive = incentive_tokens > 0 ? b.incentive_sum / static_cast<double>(incentive_tokens) : 0.0;
        b.penalty = penalty_tokens > 0 ? b.penalty_sum / static_cast<double>(penalty_tokens) : 0.0;
    }
    b.total = b.incentive + config.alpha * b.penalty;
    b.loss = -b.total;
    return b;
}

#define CPOLAB_INSTANTIATE_CPO(T)                                                                                   \
    template CpoTerms<T> cpo_terms_from_logits<T>(const Tensor<T>&, const Tensor<T>&, std::span<const TokenId>,   \
                                                  const MaskSet&, double);                                         \
    template CpoTerms<T> cpo_terms<T>(const ModelParams<T>&, const CpoExample&, double);                          \
    template Tensor<T> cpo_sample_loss<T>(const CpoTerms<T>&, std::size_t, std::size_t, const CpoConfig&);

CPOLAB_INSTANTIATE_CPO(float)
CPOLAB_INSTANTIATE_CPO(double)

} // namespace cpolab
