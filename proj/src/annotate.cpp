// SPDX-License-Identifier: Apache-2.0
#include "cpolab/annotate.hpp"

#include "cpolab/errors.hpp"
#include "json.hpp"

namespace cpolab {

const std::string_view kAnnotationInstruction =
    "Answer which sentences in the summary are not consistent with the corresponding article. Provide the answer "
    "in JSON format like this: {\"inconsistent_sentence\": [indexes of inconsistent sentences], "
    "\"consistent_sentence\": [indexes of consistent sentence]}";

std::string build_annotation_prompt(std::string_view article, const std::vector<std::string>& sentences) {
    if (sentences.empty()) {
        throw InputError("annotation prompt needs at least one sentence");
    }
    std::string prompt(kAnnotationInstruction);
    prompt += "\n<article>\n";
    prompt += article;
    prompt += "\n</article>\n<summary>\n";
    for (std::size_t i = 0; i < sentences.size(); ++i) {
        prompt += "(" + std::to_string(i) + ") " + sentences[i] + "\n";
    }
    prompt += "</summary>";
    return prompt;
}

namespace {

// [begin, end) of the first balanced {...} outside string literals.
std::string_view first_json_object(std::string_view text) {
    const std::size_t begin = text.find('{');
    if (begin == std::string_view::npos) {
        throw ParseError("judge response contains no JSON object");
    }
    int depth = 0;
    bool in_string = false;
    bool escaped = false;
    for (std::size_t i = begin; i < text.size(); ++i) {
        const char c = text[i];
        if (in_string) {
            if (escaped) {
                escaped = false;
            } else if (c == '\\') {
                escaped = true;
            } else if (c == '"') {
                in_string = false;
            }
            continue;
        }
        if (c == '"') {
            in_string = true;
        } else if (c == '{') {
            ++depth;
        } else if (c == '}' && --depth == 0) {
            return text.substr(begin, i - begin + 1);
        }
    }
    throw ParseError("judge response has an unterminated JSON object");
}

std::set<std::size_t> read_indices(const nlohmann::json& obj, const char* key, std::size_t n) {
    std::set<std::size_t> out;
    if (!obj.contains(key) || obj.at(key).is_null()) {
        return out;
    }
    const auto& arr = obj.at(key);
    if (!arr.is_array()) {
        throw ParseError(std::string("'") + key + "' must be an array of sentence indexes");
    }
    for (const auto& v : arr) {
        long long idx = 0;
        if (v.is_number_integer()) {
            idx = v.get<long long>();
        } else if (v.is_string()) {
            try {
                std::size_t used = 0;
                const std::string s = v.get<std::string>();
                idx = std::stoll(s, &used);
                if (used != s.size()) {
                    throw ParseError("bad index");
                }
            } catch (const std::exception&) {
                throw ParseError(std::string("'") + key + "' holds a non-integer index");
            }
        } else {
            throw ParseError(std::string("'") + key + "' holds a non-integer index");
        }
        if (idx < 0 || static_cast<std::size_t>(idx) >= n) {
            throw RangeError("sentence index " + std::to_string(idx) + " outside [0, " + std::to_string(n) + ")");
        }
        out.insert(static_cast<std::size_t>(idx));
    }
    return out;
}

} // namespace

AnnotationVerdict parse_verdict(std::string_view response, std::size_t n_sentences) {
    const std::string_view body = first_json_object(response);
    nlohmann::json obj;
    try {
        obj = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("judge response is not valid JSON: ") + e.what());
    }
    if (!obj.contains("inconsistent_sentence") && !obj.contains("consistent_sentence")) {
        throw ParseError("judge response has neither 'inconsistent_sentence' nor 'consistent_sentence'");
    }
    AnnotationVerdict verdict;
    verdict.inconsistent = read_indices(obj, "inconsistent_sentence", n_sentences);
    verdict.consistent = read_indices(obj, "consistent_sentence", n_sentences);
    for (std::size_t i : verdict.inconsistent) {
        if (verdict.consistent.contains(i)) {
            throw ConsistencyError("sentence " + std::to_string(i) + " is listed as both consistent and inconsistent");
        }
    }
    for (std::size_t i = 0; i < n_sentences; ++i) {
        if (!verdict.inconsistent.contains(i) && !verdict.consistent.contains(i)) {
            verdict.unlisted.insert(i);
        }
    }
    return verdict;
}

std::string render_verdict(const AnnotationVerdict& verdict) {
    nlohmann::ordered_json j;
    j["inconsistent_sentence"] = std::vector<std::size_t>(verdict.inconsistent.begin(), verdict.inconsistent.end());
    j["consistent_sentence"] = std::vector<std::size_t>(verdict.consistent.begin(), verdict.consistent.end());
    return j.dump();
}

std::vector<int> merge_union(const AnnotationVerdict& a, const AnnotationVerdict& b, std::size_t n_sentences) {
    std::vector<int> labels(n_sentences, 1);
    for (const auto* v : {&a, &b}) {
        for (std::size_t i : v->inconsistent) {
            if (i >= n_sentences) {
                throw RangeError("verdict index " + std::to_string(i) + " outside [0, " + std::to_string(n_sentences) +
                                 ")");
            }
            labels[i] = 0;
        }
    }
    return labels;
}

ConfusionCounts confusion(const std::vector<int>& predicted, const std::vector<int>& gold) {
    if (predicted.size() != gold.size()) {
        throw ContractError("confusion: " + std::to_string(predicted.size()) + " predictions for " +
                            std::to_string(gold.size()) + " gold labels");
    }
    ConfusionCounts c;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        const bool p = predicted[i] == 1;
        const bool g = gold[i] == 1;
        if (p && g) {
            ++c.tp;
        } else if (p && !g) {
            ++c.fp;
        } else if (!p && !g) {
            ++c.tn;
        } else {
            ++c.fn;
        }
    }
    return c;
}

double balanced_accuracy(const ConfusionCounts& c) {
    if (c.tp + c.fn == 0 || c.tn + c.fp == 0) {
        throw UndefinedClassError("balanced accuracy needs both positive and negative gold labels");
    }
    const double tpr = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    const double tnr = static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
    return (tpr + tnr) / 2.0;
}

} // namespace cpolab
