// SPDX-License-Identifier: Apache-2.0
//
// Sentence-level annotation with LLM judges: prompt construction, verdict
// parsing, union merge of two judges, and balanced-accuracy evaluation.
// Positive class is "consistent" (label 1).
#pragma once

#include <cstddef>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace cpolab {

struct AnnotationVerdict {
    std::set<std::size_t> inconsistent;
    std::set<std::size_t> consistent;
    // Indices named in neither list; they default to consistent.
    std::set<std::size_t> unlisted;

    friend bool operator==(const AnnotationVerdict&, const AnnotationVerdict&) = default;
};

struct ConfusionCounts {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t tn = 0;
    std::size_t fn = 0;

    ConfusionCounts scaled(std::size_t factor) const { return {tp * factor, fp * factor, tn * factor, fn * factor}; }
    friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

extern const std::string_view kAnnotationInstruction;

// Instruction line, then the article in <article> tags, then the sentences
// numbered from zero as "(i) text", one per line, in <summary> tags.
std::string build_annotation_prompt(std::string_view article, const std::vector<std::string>& sentences);

// Extracts the first balanced JSON object in the response. Throws ParseError
// for malformed JSON, RangeError for an index outside [0, n_sentences), and
// ConsistencyError when a sentence appears in both lists.
AnnotationVerdict parse_verdict(std::string_view response, std::size_t n_sentences);

// Renders a verdict as a judge would answer it.
std::string render_verdict(const AnnotationVerdict& verdict);

// Sentence i is labeled 0 iff either judge marks it inconsistent.
std::vector<int> merge_union(const AnnotationVerdict& a, const AnnotationVerdict& b, std::size_t n_sentences);

// Positive class = 1 (consistent). ContractError on length mismatch.
ConfusionCounts confusion(const std::vector<int>& predicted, const std::vector<int>& gold);

// (TP/(TP+FN) + TN/(TN+FP)) / 2. UndefinedClassError if either class is empty.
double balanced_accuracy(const ConfusionCounts& counts);

} // namespace cpolab
