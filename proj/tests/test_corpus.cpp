// SPDX-License-Identifier: Apache-2.0
#include <filesystem>
#include <fstream>
#include <random>

#include "cpolab/corpus.hpp"
#include "cpolab/cpo.hpp"
#include "cpolab/synthetic.hpp"
#include "doctest.h"

using namespace cpolab;
namespace fs = std::filesystem;

namespace {

const char* kExampleSummary =
    "The Confederation Cup draw has taken place, with 16 teams split into four groups. The Congolense will face off "
    "against the second-round winners of the Confederation Cup.";

AnnotatedSummary make_record(std::string id, std::vector<LabeledSentence> sentences) {
    AnnotatedSummary r;
    r.article_id = std::move(id);
    r.article = "Some article text.";
    for (const auto& s : sentences) {
        r.summary += (r.summary.empty() ? "" : " ") + s.text;
    }
    r.sentences = std::move(sentences);
    r.source_model = "test";
    return r;
}

} // namespace

TEST_CASE("segment_sentences examples") {
    CHECK(segment_sentences("A cat. A dog.").size() == 2);
    CHECK(segment_sentences("One sentence only.").size() == 1);
    const auto parts = split_sentences(kExampleSummary);
    REQUIRE(parts.size() == 2);
    CHECK(parts[0] == "The Confederation Cup draw has taken place, with 16 teams split into four groups.");
    CHECK(parts[1] == "The Congolense will face off against the second-round winners of the Confederation Cup.");
    CHECK_THROWS_AS(segment_sentences("   "), InputError);
}

TEST_CASE("segment_sentences keeps abbreviations and initials together") {
    CHECK(split_sentences("Dr. Smith arrived at 5 p.m. on Monday. He left.").size() == 2);
    CHECK(split_sentences("J. R. Tolkien wrote it. Fans loved it.").size() == 2);
    CHECK(split_sentences("\"It works!\" she said. Then she left.").size() == 2);
    CHECK(split_sentences("Version 2.5 shipped. Users upgraded.").size() == 2);
}

TEST_CASE("segmentation then concatenation is the identity on normalized text") {
    const std::vector<std::string> texts = {
        kExampleSummary, "A cat.  A dog.\nA bird?", "Wait! Really? Yes.", "No terminal mark here",
        "Mr. Brown met Mrs. Green at 3 p.m. today. They talked."};
    for (const auto& t : texts) {
        std::string joined;
        for (const auto& s : split_sentences(t)) {
            joined += (joined.empty() ? "" : " ") + s;
        }
        CHECK(joined == normalize_whitespace(t));
    }
}

TEST_CASE("filter_summary examples") {
    const auto frag = filter_summary("The plan was announced");
    CHECK_FALSE(frag.keep);
    CHECK(frag.reason == FilterRule::fragment);
    const auto lang = filter_summary("Résumé 新闻 summary.");
    CHECK_FALSE(lang.keep);
    CHECK(lang.reason == FilterRule::language);
    CHECK(filter_summary("The plan was announced.").keep);
    const auto sym = filter_summary("The team won \xF0\x9F\x8F\x86.");
    CHECK_FALSE(sym.keep);
    CHECK(sym.reason == FilterRule::symbols);
}

TEST_CASE("filter_summary length rule") {
    FilterOptions o;
    o.rules = {FilterRule::length};
    o.max_summary_tokens = 10;
    CHECK(filter_summary("Short one.", o).keep);
    const auto v = filter_summary("This summary is clearly longer than ten bytes.", o);
    CHECK_FALSE(v.keep);
    CHECK(v.reason == FilterRule::length);
}

TEST_CASE("filter_summary is idempotent and order-independent") {
    const std::vector<std::string> inputs = {"The plan was announced", "Résumé 新闻 summary.",
                                             "The team won \xF0\x9F\x8F\x86", "Fine text.", "新闻"};
    std::vector<FilterRule> rules{FilterRule::fragment, FilterRule::language, FilterRule::symbols};
    for (const auto& s : inputs) {
        FilterOptions base;
        base.rules = rules;
        const bool keep = filter_summary(s, base).keep;
        CHECK(filter_summary(s, base).keep == keep);
        std::sort(rules.begin(), rules.end());
        do {
            FilterOptions o;
            o.rules = rules;
            CHECK(filter_summary(s, o).keep == keep);
        } while (std::next_permutation(rules.begin(), rules.end()));
    }
}

TEST_CASE("align_tokens maps sentences to tokens") {
    AnnotatedSummary r = make_record("x", {{"Abcd.", 1}, {"Ef.", 0}});
    // "Abcd." is 5 tokens; " Ef." is 4 with the leading space, so use a
    // summary without the separator to get the 5 + 3 layout.
    r.summary = "Abcd.Ef.";
    const auto s = align_tokens(r, ByteTokenizer{}, "instr");
    CHECK(s.token_label == std::vector<int>{1, 1, 1, 1, 1, 0, 0, 0});
    CHECK(s.y == 0);
    CHECK(s.prompt_tokens == ByteTokenizer{}.encode_prompt("instr"));

    const auto all_good = align_tokens(make_record("y", {{"One.", 1}, {"Two.", 1}}), ByteTokenizer{}, "i");
    CHECK(all_good.y == 1);

    AnnotatedSummary broken = make_record("z", {{"One.", 1}});
    broken.summary = "Something else.";
    CHECK_THROWS_AS(align_tokens(broken, ByteTokenizer{}, "i"), AlignmentError);
}

TEST_CASE("whitespace between sentences goes to the following sentence") {
    const auto s = align_tokens(make_record("w", {{"Ab.", 1}, {"Cd.", 0}}), ByteTokenizer{}, "i");
    CHECK(s.token_label == std::vector<int>{1, 1, 1, 0, 0, 0, 0});
    CHECK(s.sentence_of_token == std::vector<std::size_t>{0, 0, 0, 1, 1, 1, 1});
}

TEST_CASE("Y equals the product of token labels") {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<LabeledSentence> sents;
        const int n = 1 + static_cast<int>(rng() % 4);
        for (int i = 0; i < n; ++i) {
            sents.push_back({"Sentence number " + std::to_string(i) + ".", static_cast<int>(rng() % 3 != 0)});
        }
        const auto s = align_tokens(make_record("p", sents), ByteTokenizer{}, "i");
        int prod = 1;
        for (int l : s.token_label) {
            prod *= l;
        }
        CHECK(s.y == prod);
        CHECK(s.y == summary_flag(make_record("p", sents)));
    }
}

TEST_CASE("jsonl round trip and parse errors") {
    const fs::path dir = fs::temp_directory_path() / "cpolab-test-corpus";
    fs::create_directories(dir);
    auto records = synthetic_corpus({10, 0.5, 3});
    records[0].reference = "A reference summary.";
    records[1].data_source = DataSource::cnndm;
    save_jsonl(dir / "d.jsonl", records);
    const auto back = load_jsonl(dir / "d.jsonl");
    CHECK(back == records);
    CHECK(compute_stats(back).count == 10);

    {
        std::ofstream out(dir / "bad.jsonl");
        auto j = to_json(records[0]);
        out << j.dump() << "\n";
        j.erase("sentences");
        out << j.dump() << "\n";
    }
    try {
        load_jsonl(dir / "bad.jsonl");
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
        CHECK(std::string(e.what()).find("sentences") != std::string::npos);
    }
    fs::remove_all(dir);
}

TEST_CASE("compute_stats") {
    CHECK_THROWS_AS(compute_stats({}), InputError);
    const auto one = compute_stats({make_record("a", {{"Four words are here.", 1}})});
    CHECK(one.count == 1);
    CHECK(one.positive == 1);
    CHECK(one.negative == 0);
    CHECK(one.mean_summary_words == 4.0);
    CHECK_FALSE(one.mean_reference_words.has_value());

    std::vector<AnnotatedSummary> four = {
        make_record("a", {{"One two.", 1}}),
        make_record("b", {{"One.", 1}, {"Two three.", 0}}),
        make_record("c", {{"One two three four.", 0}}),
        make_record("d", {{"A b c.", 1}, {"D e f.", 1}}),
    };
    four[0].reference = "r r";
    four[2].reference = "r r r r";
    const auto s = compute_stats(four);
    CHECK(s.count == 4);
    CHECK(s.positive == 2);
    CHECK(s.negative == 2);
    CHECK(s.mean_summary_words == doctest::Approx((2 + 3 + 4 + 6) / 4.0));
    REQUIRE(s.mean_reference_words.has_value());
    CHECK(*s.mean_reference_words == doctest::Approx(3.0));
}

TEST_CASE("a corpus shaped like the XSum portion of LESSON has its header counts") {
    SyntheticOptions o;
    o.count = 6166;
    o.positive_fraction = 3521.0 / 6166.0;
    o.seed = 2;
    const auto s = compute_stats(synthetic_corpus(o));
    CHECK(s.count == 6166);
    CHECK(s.positive == 3521);
    CHECK(s.negative == 2645);
}

TEST_CASE("record validation") {
    auto r = make_record("v", {{"One.", 1}});
    CHECK_NOTHROW(validate_record(r));
    r.sentences[0].label = 2;
    CHECK_THROWS_AS(validate_record(r), ConsistencyError);
    r.sentences.clear();
    CHECK_THROWS_AS(validate_record(r), ConsistencyError);
}

TEST_CASE("dataset split is 9:1 and stable") {
    const auto records = synthetic_corpus({2000, 0.5, 4});
    const auto split = split_dataset(records);
    CHECK(split.train.size() + split.validation.size() == 2000);
    const double frac = static_cast<double>(split.validation.size()) / 2000.0;
    CHECK(frac > 0.07);
    CHECK(frac < 0.13);
    CHECK(split_dataset(records).validation == split.validation);
}

TEST_CASE("synthetic corpus is deterministic and balanced") {
    const auto a = synthetic_corpus({40, 0.5, 11});
    CHECK(a == synthetic_corpus({40, 0.5, 11}));
    CHECK(a != synthetic_corpus({40, 0.5, 12}));
    std::size_t pos = 0;
    for (const auto& r : a) {
        CHECK_NOTHROW(validate_record(r));
        pos += static_cast<std::size_t>(summary_flag(r));
    }
    CHECK(pos == 20);
}
