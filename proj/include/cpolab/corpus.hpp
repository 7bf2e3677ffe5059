// SPDX-License-Identifier: Apache-2.0
//
// Sentence-annotated summary records: segmentation, quality filters, token
// alignment, JSONL persistence and corpus statistics.
//
// Label convention everywhere: 1 = consistent (positive class), 0 = inconsistent.
#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cpolab/tokenizer.hpp"
#include "json.hpp"

namespace cpolab {

enum class DataSource { xsum, cnndm, synthetic };

std::string to_string(DataSource source);
DataSource data_source_from_string(std::string_view name); // ParseError

struct LabeledSentence {
    std::string text;
    int label = 1;

    friend bool operator==(const LabeledSentence&, const LabeledSentence&) = default;
};

struct AnnotatedSummary {
    std::string article_id;
    std::string article;
    std::string summary;
    std::vector<LabeledSentence> sentences;
    std::string source_model;
    DataSource data_source = DataSource::synthetic;
    // Human reference summary, when the source dataset provides one.
    std::optional<std::string> reference;

    friend bool operator==(const AnnotatedSummary&, const AnnotatedSummary&) = default;
};

// 1 iff every sentence is labeled consistent.
int summary_flag(const AnnotatedSummary& record);

// Checks the record invariants: at least one sentence, binary labels, and the
// sentences reproduce the summary up to whitespace. Throws ConsistencyError.
void validate_record(const AnnotatedSummary& record);

struct TokenizedSample {
    std::vector<TokenId> prompt_tokens;
    std::vector<TokenId> summary_tokens;
    std::vector<std::size_t> sentence_of_token;
    std::vector<int> token_label;
    int y = 1;
};

struct CorpusStats {
    std::size_t count = 0;
    std::size_t positive = 0;
    std::size_t negative = 0;
    double mean_summary_words = 0.0;
    std::optional<double> mean_reference_words;
};

nlohmann::ordered_json to_json(const CorpusStats& stats);

// [begin, end) byte range of one sentence, without surrounding whitespace.
struct SentenceSpan {
    std::size_t begin = 0;
    std::size_t end = 0;

    friend bool operator==(const SentenceSpan&, const SentenceSpan&) = default;
};

// Splits after terminal punctuation (plus closing quotes/brackets) that is
// followed by whitespace, except after known abbreviations and initials or
// when the next word starts lowercase. Throws InputError for blank text.
std::vector<SentenceSpan> segment_sentences(std::string_view text);
std::vector<std::string> split_sentences(std::string_view text);

// Collapses whitespace runs to one space and trims.
std::string normalize_whitespace(std::string_view text);

enum class FilterRule { fragment, language, symbols, length };

std::string to_string(FilterRule rule);
FilterRule filter_rule_from_string(std::string_view name); // ConfigError

struct FilterOptions {
    std::vector<FilterRule> rules{FilterRule::fragment, FilterRule::language, FilterRule::symbols};
    // Largest fraction of non-Latin-script letters tolerated before a summary
    // counts as mixed-language.
    double max_foreign_letter_ratio = 0.0;
    // Replaces the script heuristic when set; returns true for English text.
    std::function<bool(std::string_view)> language_classifier;
    // Used by FilterRule::length; 0 disables the check.
    std::size_t max_summary_tokens = 0;
};

struct FilterVerdict {
    bool keep = true;
    std::optional<FilterRule> reason;
    std::string detail;
};

FilterVerdict filter_summary(std::string_view summary, const FilterOptions& options = {});

// Maps every summary token to a sentence. Whitespace between sentences goes to
// the following sentence; a token straddling a boundary belongs to the
// sentence holding its first byte. Throws AlignmentError when the sentences
// cannot be located in the summary.
TokenizedSample align_tokens(const AnnotatedSummary& record, const ByteTokenizer& tokenizer,
                             std::string_view rendered_instruction);

nlohmann::ordered_json to_json(const AnnotatedSummary& record);
// Throws ParseError naming the offending field.
AnnotatedSummary record_from_json(const nlohmann::json& j);

void save_jsonl(const std::filesystem::path& path, const std::vector<AnnotatedSummary>& records);
// ParseError carries the 1-based line number of the first bad record.
std::vector<AnnotatedSummary> load_jsonl(const std::filesystem::path& path);

// Throws InputError for an empty dataset.
CorpusStats compute_stats(const std::vector<AnnotatedSummary>& records);

std::size_t word_count(std::string_view text);

// 9:1 train/validation split keyed on a hash of article id and summary.
bool in_validation_split(const AnnotatedSummary& record);

struct DatasetSplit {
    std::vector<AnnotatedSummary> train;
    std::vector<AnnotatedSummary> validation;
};

DatasetSplit split_dataset(const std::vector<AnnotatedSummary>& records);

} // namespace cpolab
