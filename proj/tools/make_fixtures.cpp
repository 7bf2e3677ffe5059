// SPDX-License-Identifier: Apache-2.0
//
// Regenerates the files under tests/fixtures. Run from the repository root:
//   build/tools/make_fixtures tests/fixtures
// Expected outputs (stats, labels) come from how each record is constructed,
// not from running the pipeline.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "cpolab/annotate.hpp"
#include "cpolab/corpus.hpp"
#include "cpolab/judge.hpp"
#include "cpolab/model.hpp"
#include "cpolab/synthetic.hpp"
#include "cpolab/tokenizer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace cpolab;

namespace {

void write(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << text;
}

std::string verdict(const std::vector<int>& inconsistent, const std::vector<int>& consistent) {
    nlohmann::ordered_json j;
    j["inconsistent_sentence"] = inconsistent;
    j["consistent_sentence"] = consistent;
    return j.dump();
}

const char* kExampleArticle =
    "Like last year big-spending Mazembe drop into the Confederation Cup after exiting the Champions League before "
    "the group stage. The Congolese, who have are five-time African champions, will be hoping to appoint a new "
    "coach before the two matches in April to decide who advances group stage. This after the club announced that "
    "Frenchman Thierry Froger had left by mutual consent after just over one month in charge. Mazembe said he had "
    "not achieved his goal of reaching the Champions League quarter-finals after they Mazembe lost to Zimbabwe's "
    "CAPS United on the away goals rule in the round of 32. Two-time African champions Kabylie beat Congo's Etoile "
    "to reach the play-offs. Tuesday's draw for pits losers from Champions League against second-round winners from "
    "the Confederation Cup to decide who reaches the expanded group stage. This year's tournament will feature 16 "
    "teams in four pools up from eight sides in previous years.";

const std::vector<std::string> kJudgeExampleSentences = {
    "The Confederation Cup draw has taken place, with 16 teams split into four groups.",
    "The Congolense will face off against the second-round winners of the Confederation Cup."};

void judge_example(const fs::path& root) {
    const fs::path dir = root / "judge_example";
    nlohmann::ordered_json j;
    j["article_id"] = "judge_example";
    j["article"] = kExampleArticle;
    j["summary"] = kJudgeExampleSentences[0] + " " + kJudgeExampleSentences[1];
    j["sentences"] = kJudgeExampleSentences;
    write(dir / "example.json", j.dump(2) + "\n");
    write(dir / "raw.jsonl", nlohmann::ordered_json{{"article_id", "judge_example"},
                                                    {"article", kExampleArticle},
                                                    {"summary", j["summary"]},
                                                    {"source_model", "unknown"},
                                                    {"data_source", "xsum"}}
                                     .dump() +
                                 "\n");
    const std::string prompt = build_annotation_prompt(kExampleArticle, kJudgeExampleSentences);
    write(dir / "golden_prompt.txt", prompt);
    FixtureStore chatgpt;
    chatgpt.record(prompt, R"({"inconsistent_sentence": [0, 1],"consistent_sentence": []})");
    chatgpt.save(dir / "judges" / "chatgpt.jsonl");
    FixtureStore gpt4;
    gpt4.record(prompt, R"({"inconsistent_sentence": [1],"consistent_sentence": [0]})");
    gpt4.save(dir / "judges" / "gpt4.jsonl");
}

struct RawSpec {
    std::string id;
    std::string article;
    std::string summary;
    std::vector<int> chatgpt_inconsistent;
    std::vector<int> gpt4_inconsistent;
    std::string drop_reason; // empty when the default filters keep it
    bool gpt4_leaves_last_unlisted = false;
};

void build_data(const fs::path& root) {
    const fs::path dir = root / "build_data";
    std::string long_summary;
    for (int i = 0; i < 12; ++i) {
        long_summary += "The committee met again to review the long list of proposals. ";
    }
    long_summary.pop_back();
    const std::vector<RawSpec> specs = {
        {"r01", "The city opened a new bridge on Monday. It cost 40 million dollars.",
         "The city opened a new bridge. It cost 40 million dollars.", {}, {}, ""},
        {"r02", "A local bakery won a national award for its rye bread.",
         "A local bakery won an award. The prize was for its cakes.", {1}, {}, ""},
        {"r03", "Heavy rain closed three schools in the valley on Friday.", "Rain closed three schools on Friday.", {},
         {}, ""},
        {"r04", "The orchestra played two concerts in Vienna and sold every ticket.",
         "The orchestra played in Berlin. It gave two concerts. Some tickets went unsold.", {0}, {2}, ""},
        {"r05", "The museum extended its opening hours during the summer.", "The museum closed for the summer.", {},
         {0}, ""},
        {"r06", "The council approved the budget after a long debate.", "The council approved the budget", {}, {},
         "fragment"},
        {"r07", "The council approved the budget after a long debate.", "Le conseil a approuvé le 预算 budget.", {}, {},
         "language"},
        {"r08", "The team won the cup final on Sunday evening.", "The team won the final \xF0\x9F\x8F\x86.", {}, {},
         "symbols"},
        {"r09", "The committee reviewed the proposals over several meetings.", long_summary, {}, {}, "length"},
        {"r10", "The mayor announced a new park and a cycling lane downtown.",
         "The mayor announced a new stadium. A cycling lane is planned downtown.", {0}, {0}, "", true},
    };

    std::string raw;
    FixtureStore chatgpt;
    FixtureStore gpt4;
    std::size_t kept = 0, positive = 0, all_positive = 0;
    nlohmann::ordered_json dropped = nlohmann::ordered_json::object();
    std::vector<int> gold;
    for (const auto& s : specs) {
        raw += nlohmann::ordered_json{{"article_id", s.id},
                                      {"article", s.article},
                                      {"summary", s.summary},
                                      {"source_model", "fixture-writer"},
                                      {"data_source", "xsum"}}
                   .dump() +
               "\n";
        const auto sentences = split_sentences(s.summary);
        const std::string prompt = build_annotation_prompt(s.article, sentences);
        auto rest = [&](const std::vector<int>& bad, bool leave_last) {
            std::vector<int> good;
            for (int i = 0; i < static_cast<int>(sentences.size()); ++i) {
                if (std::find(bad.begin(), bad.end(), i) == bad.end() &&
                    !(leave_last && i + 1 == static_cast<int>(sentences.size()))) {
                    good.push_back(i);
                }
            }
            return good;
        };
        chatgpt.record(prompt, verdict(s.chatgpt_inconsistent, rest(s.chatgpt_inconsistent, false)));
        gpt4.record(prompt, "Here is the answer: " +
                                verdict(s.gpt4_inconsistent, rest(s.gpt4_inconsistent, s.gpt4_leaves_last_unlisted)));
        const bool y = s.chatgpt_inconsistent.empty() && s.gpt4_inconsistent.empty();
        all_positive += y ? 1 : 0;
        if (s.drop_reason.empty()) {
            ++kept;
            positive += y ? 1 : 0;
            for (std::size_t i = 0; i < sentences.size(); ++i) {
                const int idx = static_cast<int>(i);
                const bool bad = std::find(s.chatgpt_inconsistent.begin(), s.chatgpt_inconsistent.end(), idx) !=
                                     s.chatgpt_inconsistent.end() ||
                                 std::find(s.gpt4_inconsistent.begin(), s.gpt4_inconsistent.end(), idx) !=
                                     s.gpt4_inconsistent.end();
                gold.push_back(bad ? 0 : 1);
            }
        } else {
            dropped[s.drop_reason] = dropped.value(s.drop_reason, 0) + 1;
        }
    }
    write(dir / "raw.jsonl", raw);
    chatgpt.save(dir / "judges" / "chatgpt.jsonl");
    gpt4.save(dir / "judges" / "gpt4.jsonl");
    nlohmann::ordered_json expected;
    expected["input_records"] = specs.size();
    expected["kept_records"] = kept;
    expected["positive"] = positive;
    expected["negative"] = kept - positive;
    expected["dropped"] = dropped;
    expected["unfiltered"] = {{"kept_records", specs.size()},
                              {"positive", all_positive},
                              {"negative", specs.size() - all_positive}};
    write(dir / "expected_stats.json", expected.dump(2) + "\n");
    std::string labels;
    for (int g : gold) {
        labels += std::to_string(g) + "\n";
    }
    write(dir / "expected_labels.txt", labels);
}

void synthetic(const fs::path& root) {
    const fs::path dir = root / "synthetic";
    fs::create_directories(dir);
    SyntheticOptions o;
    o.count = 40;
    o.seed = 11;
    save_jsonl(dir / "lesson.jsonl", synthetic_corpus(o));
    save_probe_pairs(dir / "probe_pairs.jsonl", synthetic_probe_pairs(16, 11));
    write(dir / "model.json", nlohmann::ordered_json{{"n_layers", 2},
                                                     {"d_model", 16},
                                                     {"n_heads", 2},
                                                     {"vocab_size", 259},
                                                     {"max_seq_len", 256},
                                                     {"d_ff", 0}}
                                      .dump(2) +
                                  "\n");
    write(dir / "train.json", nlohmann::ordered_json{{"batch_size", 4},
                                                     {"epochs", 2},
                                                     {"lr", 0.003},
                                                     {"k", 1},
                                                     {"probe", {{"epochs", 50}}}}
                                      .dump(2) +
                                  "\n");
}

void golden_logits(const fs::path& root) {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.max_seq_len = 32;
    const auto params = ModelParams<double>::init(c, 7);
    const auto tokens = ByteTokenizer{}.encode_prompt("golden");
    ForwardOptions opts;
    opts.logits_from = tokens.size() - 1;
    const auto out = forward(params, tokens, opts);
    nlohmann::ordered_json j;
    j["model"] = to_json(c);
    j["seed"] = 7;
    j["tokens"] = tokens;
    std::vector<std::string> values;
    for (double v : out.logits.data()) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        values.emplace_back(buf);
    }
    j["last_logits"] = values;
    write(root / "golden_logits.json", j.dump(1) + "\n");
}

} // namespace

int main(int argc, char** argv) {
    if (argc != 2) {
        std::cerr << "usage: make_fixtures <fixtures-dir>\n";
        return 1;
    }
    const fs::path root = argv[1];
    judge_example(root);
    build_data(root);
    synthetic(root);
    golden_logits(root);
    std::cout << "fixtures written to " << root.string() << "\n";
    return 0;
}
