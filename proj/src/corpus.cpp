// SPDX-License-Identifier: Apache-2.0
#include "cpolab/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <regex>
#include <set>

#include "cpolab/errors.hpp"
#include "cpolab/hash.hpp"

namespace cpolab {

namespace {

bool is_space(char c) {
    return std::isspace(static_cast<unsigned char>(c)) != 0;
}

bool is_terminal(char c) {
    return c == '.' || c == '!' || c == '?';
}

// Length of a closing mark (quote or bracket) starting at text[i], 0 if none.
std::size_t closing_mark_length(std::string_view text, std::size_t i) {
    const char c = text[i];
    if (c == '"' || c == '\'' || c == ')' || c == ']') {
        return 1;
    }
    // U+2019 and U+201D
    if (text.substr(i, 3) == "\xE2\x80\x99" || text.substr(i, 3) == "\xE2\x80\x9D") {
        return 3;
    }
    return 0;
}

// U+2026 horizontal ellipsis
bool ellipsis_at(std::string_view text, std::size_t i) {
    return text.substr(i, 3) == "\xE2\x80\xA6";
}

const std::set<std::string, std::less<>>& abbreviations() {
    static const std::set<std::string, std::less<>> list{
        "mr",  "mrs",  "ms",   "dr",  "prof", "st",  "jr",  "sr",  "vs",  "e.g", "i.e", "inc", "ltd", "co",
        "corp", "jan", "feb",  "mar", "apr",  "jun", "jul", "aug", "sep", "sept", "oct", "nov", "dec", "u.s",
        "u.k", "u.n", "mt",   "gen", "gov",  "sen", "rep", "col", "lt",  "capt", "sgt", "no",  "fig", "approx"};
    return list;
}

// Is the '.' at text[dot] part of an abbreviation or an initial?
bool abbreviation_before(std::string_view text, std::size_t dot) {
    std::size_t begin = dot;
    while (begin > 0 && !is_space(text[begin - 1]) && text[begin - 1] != '(' && text[begin - 1] != '"') {
        --begin;
    }
    std::string word(text.substr(begin, dot - begin));
    if (word.size() == 1 && std::isupper(static_cast<unsigned char>(word[0]))) {
        return true;
    }
    std::transform(word.begin(), word.end(), word.begin(), [](unsigned char c) { return std::tolower(c); });
    return abbreviations().contains(word);
}

struct CodePoint {
    char32_t value;
    std::size_t length; // 0 marks an invalid byte
};

CodePoint decode_utf8(std::string_view s, std::size_t i) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    if (b0 < 0x80) {
        return {b0, 1};
    }
    std::size_t n = 0;
    char32_t cp = 0;
    if ((b0 & 0xE0) == 0xC0) {
        n = 2;
        cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
        n = 3;
        cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
        n = 4;
        cp = b0 & 0x07;
    } else {
        return {0xFFFD, 0};
    }
    if (i + n > s.size()) {
        return {0xFFFD, 0};
    }
    for (std::size_t k = 1; k < n; ++k) {
        const auto b = static_cast<unsigned char>(s[i + k]);
        if ((b & 0xC0) != 0x80) {
            return {0xFFFD, 0};
        }
        cp = (cp << 6) | (b & 0x3F);
    }
    return {cp, n};
}

bool in(char32_t cp, char32_t lo, char32_t hi) {
    return cp >= lo && cp <= hi;
}

bool is_latin_letter(char32_t cp) {
    if (cp < 0x80) {
        return std::isalpha(static_cast<int>(cp)) != 0;
    }
    return (in(cp, 0xC0, 0x24F) && cp != 0xD7 && cp != 0xF7) || in(cp, 0x1E00, 0x1EFF);
}

bool is_foreign_letter(char32_t cp) {
    return in(cp, 0x370, 0x3FF) ||   // Greek
           in(cp, 0x400, 0x52F) ||   // Cyrillic
           in(cp, 0x530, 0x58F) ||   // Armenian
           in(cp, 0x590, 0x5FF) ||   // Hebrew
           in(cp, 0x600, 0x6FF) ||   // Arabic
           in(cp, 0x900, 0xDFF) ||   // Indic scripts
           in(cp, 0xE00, 0xE7F) ||   // Thai
           in(cp, 0x1100, 0x11FF) || // Hangul Jamo
           in(cp, 0x3040, 0x30FF) || // kana
           in(cp, 0x3400, 0x4DBF) || in(cp, 0x4E00, 0x9FFF) || in(cp, 0xF900, 0xFAFF) || // CJK
           in(cp, 0xAC00, 0xD7AF);   // Hangul syllables
}

bool is_emoji_or_format(char32_t cp) {
    return in(cp, 0x1F000, 0x1FAFF) || in(cp, 0x2600, 0x27BF) || in(cp, 0x2300, 0x23FF) ||
           in(cp, 0x2B00, 0x2BFF) || in(cp, 0xFE00, 0xFE0F) || cp == 0x200D || cp == 0x20E3 ||
           in(cp, 0xE0000, 0xE007F) || in(cp, 0x200B, 0x200F) || in(cp, 0x202A, 0x202E) ||
           in(cp, 0x2060, 0x206F) || cp == 0xFEFF || in(cp, 0x2500, 0x25FF) || cp == 0x2022 || cp == 0x2023 ||
           cp == 0x2043 || cp == 0xFFFD;
}

// Markdown-style markup and stray control characters.
const std::regex& format_symbol_regex() {
    static const std::regex re(R"([*#`|~^{}\\<>]|\[\[|\]\]|[\x00-\x08\x0B\x0C\x0E-\x1F\x7F]|(^|\n)\s*[-+]\s)");
    return re;
}

FilterVerdict check_fragment(std::string_view summary) {
    std::size_t end = summary.size();
    while (end > 0 && is_space(summary[end - 1])) {
        --end;
    }
    // Peel closing quotes/brackets off the end.
    bool peeled = true;
    while (peeled && end > 0) {
        peeled = false;
        const char c = summary[end - 1];
        if (c == '"' || c == '\'' || c == ')' || c == ']') {
            --end;
            peeled = true;
        } else if (end >= 3 && closing_mark_length(summary, end - 3) == 3) {
            end -= 3;
            peeled = true;
        }
    }
    if (end > 0 && is_terminal(summary[end - 1])) {
        return {};
    }
    if (end >= 3 && ellipsis_at(summary, end - 3)) {
        return {};
    }
    return {false, FilterRule::fragment, "final sentence does not end with terminal punctuation"};
}

FilterVerdict check_language(std::string_view summary, const FilterOptions& options) {
    if (options.language_classifier) {
        if (options.language_classifier(summary)) {
            return {};
        }
        return {false, FilterRule::language, "language classifier rejected the summary"};
    }
    std::size_t latin = 0;
    std::size_t foreign = 0;
    for (std::size_t i = 0; i < summary.size();) {
        const CodePoint cp = decode_utf8(summary, i);
        if (is_latin_letter(cp.value)) {
            ++latin;
        } else if (is_foreign_letter(cp.value)) {
            ++foreign;
        }
        i += std::max<std::size_t>(cp.length, 1);
    }
    if (latin + foreign == 0) {
        return {false, FilterRule::language, "no letters"};
    }
    const double ratio = static_cast<double>(foreign) / static_cast<double>(latin + foreign);
    if (latin == 0 || ratio > options.max_foreign_letter_ratio) {
        return {false, FilterRule::language,
                std::to_string(foreign) + " of " + std::to_string(latin + foreign) + " letters are non-Latin script"};
    }
    return {};
}

FilterVerdict check_symbols(std::string_view summary) {
    for (std::size_t i = 0; i < summary.size();) {
        const CodePoint cp = decode_utf8(summary, i);
        if (cp.length == 0) {
            return {false, FilterRule::symbols, "invalid UTF-8 at byte " + std::to_string(i)};
        }
        if (is_emoji_or_format(cp.value)) {
            return {false, FilterRule::symbols, "emoji or format symbol at byte " + std::to_string(i)};
        }
        i += cp.length;
    }
    const std::string text(summary);
    if (std::regex_search(text, format_symbol_regex())) {
        return {false, FilterRule::symbols, "markup or control symbol"};
    }
    return {};
}

[[noreturn]] void missing(const char* field) {
    throw ParseError(std::string("missing field '") + field + "'");
}

} // namespace

std::string to_string(DataSource source) {
    switch (source) {
        case DataSource::xsum:
            return "xsum";
        case DataSource::cnndm:
            return "cnndm";
        case DataSource::synthetic:
            return "synthetic";
    }
    return "synthetic";
}

DataSource data_source_from_string(std::string_view name) {
    if (name == "xsum") {
        return DataSource::xsum;
    }
    if (name == "cnndm") {
        return DataSource::cnndm;
    }
    if (name == "synthetic") {
        return DataSource::synthetic;
    }
    throw ParseError("unknown data_source '" + std::string(name) + "'");
}

int summary_flag(const AnnotatedSummary& record) {
    if (record.sentences.empty()) {
        throw InputError("record '" + record.article_id + "' has no sentences");
    }
    return std::all_of(record.sentences.begin(), record.sentences.end(), [](const auto& s) { return s.label == 1; })
               ? 1
               : 0;
}

std::string normalize_whitespace(std::string_view text) {
    std::string out;
    bool pending_space = false;
    for (char c : text) {
        if (is_space(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(c);
    }
    return out;
}

std::vector<SentenceSpan> segment_sentences(std::string_view text) {
    std::vector<SentenceSpan> spans;
    std::size_t i = 0;
    const std::size_t n = text.size();
    while (i < n) {
        while (i < n && is_space(text[i])) {
            ++i;
        }
        if (i == n) {
            break;
        }
        const std::size_t begin = i;
        std::size_t end = n;
        while (i < n) {
            const bool ellipsis = ellipsis_at(text, i);
            if (!is_terminal(text[i]) && !ellipsis) {
                ++i;
                continue;
            }
            const std::size_t mark = i;
            i += ellipsis ? 3 : 1;
            while (i < n && (is_terminal(text[i]) || ellipsis_at(text, i))) {
                i += ellipsis_at(text, i) ? 3 : 1;
            }
            while (i < n && closing_mark_length(text, i) > 0) {
                i += closing_mark_length(text, i);
            }
            if (i == n) {
                end = n;
                break;
            }
            if (!is_space(text[i])) {
                continue; // "1.5", "U.S.A", "e.g.,"
            }
            std::size_t next = i;
            while (next < n && is_space(text[next])) {
                ++next;
            }
            const bool lowercase_next = next < n && std::islower(static_cast<unsigned char>(text[next]));
            const bool abbreviation = text[mark] == '.' && i == mark + 1 && abbreviation_before(text, mark);
            if (lowercase_next || abbreviation) {
                continue;
            }
            end = i;
            break;
        }
        while (end > begin && is_space(text[end - 1])) {
            --end;
        }
        spans.push_back({begin, end});
        i = std::max(i, end);
    }
    if (spans.empty()) {
        throw InputError("cannot segment blank text");
    }
    return spans;
}

std::vector<std::string> split_sentences(std::string_view text) {
    std::vector<std::string> out;
    for (const auto& span : segment_sentences(text)) {
        out.emplace_back(text.substr(span.begin, span.end - span.begin));
    }
    return out;
}

std::string to_string(FilterRule rule) {
    switch (rule) {
        case FilterRule::fragment:
            return "fragment";
        case FilterRule::language:
            return "language";
        case FilterRule::symbols:
            return "symbols";
        case FilterRule::length:
            return "length";
    }
    return "fragment";
}

FilterRule filter_rule_from_string(std::string_view name) {
    for (FilterRule r : {FilterRule::fragment, FilterRule::language, FilterRule::symbols, FilterRule::length}) {
        if (to_string(r) == name) {
            return r;
        }
    }
    throw ConfigError("unknown filter '" + std::string(name) + "' (expected fragment, language, symbols, length)");
}

FilterVerdict filter_summary(std::string_view summary, const FilterOptions& options) {
    for (FilterRule rule : options.rules) {
        FilterVerdict verdict;
        switch (rule) {
            case FilterRule::fragment:
                verdict = check_fragment(summary);
                break;
            case FilterRule::language:
                verdict = check_language(summary, options);
                break;
            case FilterRule::symbols:
                verdict = check_symbols(summary);
                break;
            case FilterRule::length:
                if (options.max_summary_tokens > 0 && summary.size() > options.max_summary_tokens) {
                    verdict = {false, FilterRule::length,
                               std::to_string(summary.size()) + " tokens exceed the limit of " +
                                   std::to_string(options.max_summary_tokens)};
                }
                break;
        }
        if (!verdict.keep) {
            return verdict;
        }
    }
    return {};
}

namespace {

// End offset (exclusive) of each sentence inside the summary.
std::vector<std::size_t> locate_sentences(const AnnotatedSummary& record) {
    const std::string_view s = record.summary;
    std::vector<std::size_t> ends;
    std::size_t pos = 0;
    for (std::size_t k = 0; k < record.sentences.size(); ++k) {
        const std::string_view sentence = record.sentences[k].text;
        while (pos < s.size() && is_space(s[pos])) {
            ++pos;
        }
        std::size_t j = 0;
        while (j < sentence.size() && is_space(sentence[j])) {
            ++j;
        }
        std::size_t last = sentence.size();
        while (last > j && is_space(sentence[last - 1])) {
            --last;
        }
        if (j == last) {
            throw AlignmentError("sentence " + std::to_string(k) + " of '" + record.article_id + "' is blank");
        }
        while (j < last) {
            if (is_space(sentence[j])) {
                if (pos >= s.size() || !is_space(s[pos])) {
                    throw AlignmentError("sentence " + std::to_string(k) + " of '" + record.article_id +
                                         "' does not match the summary text");
                }
                while (j < last && is_space(sentence[j])) {
                    ++j;
                }
                while (pos < s.size() && is_space(s[pos])) {
                    ++pos;
                }
                continue;
            }
            if (pos >= s.size() || s[pos] != sentence[j]) {
                throw AlignmentError("sentence " + std::to_string(k) + " of '" + record.article_id +
                                     "' does not match the summary text at byte " + std::to_string(pos));
            }
            ++pos;
            ++j;
        }
        ends.push_back(pos);
    }
    for (std::size_t rest = pos; rest < s.size(); ++rest) {
        if (!is_space(s[rest])) {
            throw AlignmentError("summary of '" + record.article_id + "' has text after the last sentence");
        }
    }
    return ends;
}

} // namespace

void validate_record(const AnnotatedSummary& record) {
    if (record.sentences.empty()) {
        throw ConsistencyError("record '" + record.article_id + "' has no sentences");
    }
    for (const auto& s : record.sentences) {
        if (s.label != 0 && s.label != 1) {
            throw ConsistencyError("record '" + record.article_id + "' has non-binary label " +
                                   std::to_string(s.label));
        }
    }
    try {
        locate_sentences(record);
    } catch (const AlignmentError& e) {
        throw ConsistencyError(e.what());
    }
}

TokenizedSample align_tokens(const AnnotatedSummary& record, const ByteTokenizer& tokenizer,
                             std::string_view rendered_instruction) {
    if (record.sentences.empty()) {
        throw AlignmentError("record '" + record.article_id + "' has no sentences");
    }
    TokenizedSample sample;
    sample.summary_tokens = tokenizer.encode(record.summary);
    if (tokenizer.decode(sample.summary_tokens) != record.summary) {
        throw AlignmentError("tokenizer does not round-trip the summary of '" + record.article_id + "'");
    }
    sample.prompt_tokens = tokenizer.encode_prompt(rendered_instruction);
    const auto ends = locate_sentences(record);
    const auto offsets = tokenizer.offsets(record.summary);
    sample.sentence_of_token.reserve(offsets.size());
    sample.token_label.reserve(offsets.size());
    std::size_t k = 0;
    for (std::size_t offset : offsets) {
        // Region of sentence k is [ends[k-1], ends[k]); the last region runs to the end.
        while (k + 1 < ends.size() && offset >= ends[k]) {
            ++k;
        }
        sample.sentence_of_token.push_back(k);
        sample.token_label.push_back(record.sentences[k].label);
    }
    sample.y = summary_flag(record);
    return sample;
}

nlohmann::ordered_json to_json(const AnnotatedSummary& record) {
    nlohmann::ordered_json j;
    j["article_id"] = record.article_id;
    j["article"] = record.article;
    j["summary"] = record.summary;
    j["sentences"] = nlohmann::ordered_json::array();
    for (const auto& s : record.sentences) {
        j["sentences"].push_back({{"text", s.text}, {"label", s.label}});
    }
    j["source_model"] = record.source_model;
    j["data_source"] = to_string(record.data_source);
    if (record.reference) {
        j["reference"] = *record.reference;
    }
    return j;
}

AnnotatedSummary record_from_json(const nlohmann::json& j) {
    if (!j.is_object()) {
        throw ParseError("record is not a JSON object");
    }
    auto text_field = [&](const char* key) -> std::string {
        if (!j.contains(key)) {
            missing(key);
        }
        if (!j.at(key).is_string()) {
            throw ParseError(std::string("field '") + key + "' must be a string");
        }
        return j.at(key).get<std::string>();
    };
    AnnotatedSummary r;
    r.article_id = text_field("article_id");
    r.article = text_field("article");
    r.summary = text_field("summary");
    if (!j.contains("sentences")) {
        missing("sentences");
    }
    const auto& sentences = j.at("sentences");
    if (!sentences.is_array()) {
        throw ParseError("field 'sentences' must be an array");
    }
    for (const auto& s : sentences) {
        if (!s.is_object() || !s.contains("text") || !s.contains("label") || !s.at("text").is_string() ||
            !s.at("label").is_number_integer()) {
            throw ParseError("field 'sentences' entries need a string 'text' and an integer 'label'");
        }
        r.sentences.push_back({s.at("text").get<std::string>(), s.at("label").get<int>()});
    }
    r.source_model = text_field("source_model");
    r.data_source = data_source_from_string(text_field("data_source"));
    if (j.contains("reference") && !j.at("reference").is_null()) {
        r.reference = text_field("reference");
    }
    try {
        validate_record(r);
    } catch (const ConsistencyError& e) {
        throw ParseError(e.what());
    }
    return r;
}

void save_jsonl(const std::filesystem::path& path, const std::vector<AnnotatedSummary>& records) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    for (const auto& r : records) {
        out << to_json(r).dump() << '\n';
    }
    if (!out) {
        throw IoError("failed writing " + path.string());
    }
}

std::vector<AnnotatedSummary> load_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read " + path.string());
    }
    std::vector<AnnotatedSummary> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (normalize_whitespace(line).empty()) {
            continue;
        }
        try {
            records.push_back(record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path.string() + ": " + e.what(), line_no);
        } catch (const ParseError& e) {
            throw ParseError(path.string() + ": " + e.what(), line_no);
        }
    }
    return records;
}

std::size_t word_count(std::string_view text) {
    std::size_t words = 0;
    bool in_word = false;
    for (char c : text) {
        if (is_space(c)) {
            in_word = false;
        } else if (!in_word) {
            in_word = true;
            ++words;
        }
    }
    return words;
}

CorpusStats compute_stats(const std::vector<AnnotatedSummary>& records) {
    if (records.empty()) {
        throw InputError("cannot compute statistics of an empty dataset");
    }
    CorpusStats stats;
    double summary_words = 0.0;
    double reference_words = 0.0;
    std::size_t with_reference = 0;
    for (const auto& r : records) {
        ++stats.count;
        if (summary_flag(r) == 1) {
            ++stats.positive;
        } else {
            ++stats.negative;
        }
        summary_words += static_cast<double>(word_count(r.summary));
        if (r.reference) {
            reference_words += static_cast<double>(word_count(*r.reference));
            ++with_reference;
        }
    }
    stats.mean_summary_words = summary_words / static_cast<double>(stats.count);
    if (with_reference > 0) {
        stats.mean_reference_words = reference_words / static_cast<double>(with_reference);
    }
    return stats;
}

nlohmann::ordered_json to_json(const CorpusStats& stats) {
    nlohmann::ordered_json j;
    j["count"] = stats.count;
    j["positive"] = stats.positive;
    j["negative"] = stats.negative;
    j["mean_summary_words"] = stats.mean_summary_words;
    j["mean_reference_words"] =
        stats.mean_reference_words ? nlohmann::ordered_json(*stats.mean_reference_words) : nlohmann::ordered_json();
    return j;
}

bool in_validation_split(const AnnotatedSummary& record) {
    const std::uint64_t h = fnv1a64(record.summary, fnv1a64(record.article_id + '\x1f'));
    return h % 10 == 0;
}

DatasetSplit split_dataset(const std::vector<AnnotatedSummary>& records) {
    DatasetSplit split;
    for (const auto& r : records) {
        (in_validation_split(r) ? split.validation : split.train).push_back(r);
    }
    return split;
}

} // namespace cpolab
