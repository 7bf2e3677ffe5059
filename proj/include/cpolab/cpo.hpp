// SPDX-License-Identifier: Apache-2.0
//
// Contrastive preference objective.
//
// Two instructions differ only in asking for a "consistent" or an
// "inconsistent" summary. For a faithful summary (Y = 1) every token is
// rewarded under the contextual instruction and penalized under the internal
// one; for an unfaithful summary (Y = 0) only the tokens of inconsistent
// sentences take part, rewarded under the internal instruction and penalized
// under the contextual one. Consistent sentences of an unfaithful summary are
// left out of both terms.
//
//   incentive = sum over rewarded tokens of log P(w | instruction)
//   penalty   = sum over penalized tokens of log max(1 - P(w | instruction), eps)
//   L         = incentive + alpha * penalty        (maximized)
//   loss      = -L                                 (minimized)
//
// With normalize_per_token each term is divided by its token count over the
// batch before combining; raw sums are reported either way.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cpolab/corpus.hpp"
#include "cpolab/model.hpp"
#include "cpolab/tensor.hpp"
#include "cpolab/tokenizer.hpp"
#include "json.hpp"

namespace cpolab {

enum class Instruction { contextual, internal };

std::string to_string(Instruction instruction);

inline constexpr std::string_view kArticlePlaceholder = "[ARTICLE]";

struct InstructionPair {
    std::string contextual_template;
    std::string internal_template;

    static InstructionPair defaults();
    // Both templates hold exactly one placeholder and differ only in
    // "consistent" versus "inconsistent". Throws ConfigError.
    void validate() const;
    std::string render(Instruction which, std::string_view article) const;
};

// 1 iff no label is 0. InputError on an empty label list.
int compute_y(std::span<const int> sentence_labels);

struct MaskSet {
    Instruction incentive_instruction = Instruction::contextual;
    std::vector<std::uint8_t> incentive_mask;
    Instruction penalty_instruction = Instruction::internal;
    std::vector<std::uint8_t> penalty_mask;

    std::size_t incentive_count() const;
    std::size_t penalty_count() const;
};

MaskSet build_masks(const TokenizedSample& sample);

// Sum of masked log-probabilities. ContractError on length mismatch.
double incentive_loss(std::span<const double> logprobs, std::span<const std::uint8_t> mask);
// Sum of masked log(max(1 - p, eps)). ContractError on length mismatch.
double penalty_loss(std::span<const double> probs, std::span<const std::uint8_t> mask, double eps);
// -(incentive + alpha * penalty). ContractError for alpha < 0.
double total_objective(double incentive, double penalty, double alpha);

struct CpoConfig {
    double alpha = 0.05;
    double eps = 1e-7;
    bool normalize_per_token = true;

    void validate() const;
};

nlohmann::ordered_json to_json(const CpoConfig& config);

struct LossBreakdown {
    double incentive = 0.0;     // normalized when configured
    double penalty = 0.0;
    double total = 0.0;         // incentive + alpha * penalty
    double loss = 0.0;          // -total
    double incentive_sum = 0.0; // raw sums
    double penalty_sum = 0.0;
    std::size_t incentive_tokens = 0;
    std::size_t penalty_tokens = 0;
    double alpha = 0.0;
};

nlohmann::ordered_json to_json(const LossBreakdown& breakdown);

// A training sample rendered under both instructions.
struct CpoExample {
    std::vector<TokenId> contextual_prompt;
    std::vector<TokenId> internal_prompt;
    std::vector<TokenId> summary;
    std::vector<int> token_label;
    MaskSet masks;
    int y = 1;

    const std::vector<TokenId>& prompt(Instruction which) const {
        return which == Instruction::contextual ? contextual_prompt : internal_prompt;
    }
    // Model input for one instruction: prompt followed by all summary tokens
    // but the last; the logits of its final |summary| rows predict the summary.
    std::vector<TokenId> input(Instruction which) const;
};

CpoExample make_example(const AnnotatedSummary& record, const InstructionPair& instructions,
                        const ByteTokenizer& tokenizer);

// Differentiable raw sums for one example.
template <typename T>
struct CpoTerms {
    Tensor<T> incentive_sum;
    Tensor<T> penalty_sum;
    std::size_t incentive_tokens = 0;
    std::size_t penalty_tokens = 0;
};

// Terms from summary-position logits ([n, vocab] each) under both instructions.
template <typename T>
CpoTerms<T> cpo_terms_from_logits(const Tensor<T>& contextual_logits, const Tensor<T>& internal_logits,
                                  std::span<const TokenId> targets, const MaskSet& masks, double eps);

// Runs the two forward passes (one per instruction) and builds the terms.
template <typename T>
CpoTerms<T> cpo_terms(const ModelParams<T>& params, const CpoExample& example, double eps);

// Scalar loss contribution of one example inside a batch whose total token
// counts are given; summing it over the batch yields the batch loss.
template <typename T>
Tensor<T> cpo_sample_loss(const CpoTerms<T>& terms, std::size_t batch_incentive_tokens,
                          std::size_t batch_penalty_tokens, const CpoConfig& config);

// Batch breakdown from per-example raw sums.
LossBreakdown summarize_losses(std::span<const double> incentive_sums, std::span<const double> penalty_sums,
                               std::size_t incentive_tokens, std::size_t penalty_tokens, const CpoConfig& config);

} // namespace cpolab
