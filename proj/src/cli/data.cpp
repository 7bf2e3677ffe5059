// SPDX-License-Identifier: Apache-2.0
//
// build-data and annotate.
#include <fstream>
#include <map>
#include <memory>

#include "commands.hpp"
#include "cpolab/annotate.hpp"
#include "cpolab/corpus.hpp"
#include "cpolab/cpo.hpp"
#include "cpolab/errors.hpp"
#include "cpolab/judge.hpp"

namespace cpolab::cli {

namespace fs = std::filesystem;

namespace {

struct RawRecord {
    std::string article_id;
    std::string article;
    std::string summary;
    std::string source_model = "unknown";
    DataSource data_source = DataSource::synthetic;
    std::optional<std::string> reference;
};

// JSONL with article_id, article and summary; source_model, data_source and
// reference are optional. Labeled records are accepted too.
std::vector<RawRecord> load_raw(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read " + path.string());
    }
    std::vector<RawRecord> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            RawRecord r;
            for (auto [key, field] : {std::pair{"article_id", &r.article_id}, std::pair{"article", &r.article},
                                      std::pair{"summary", &r.summary}}) {
                if (!j.contains(key)) {
                    throw ParseError(std::string("missing field '") + key + "'", line_no);
                }
                *field = j.at(key).get<std::string>();
            }
            r.source_model = j.value("source_model", r.source_model);
            if (j.contains("data_source")) {
                r.data_source = data_source_from_string(j.at("data_source").get<std::string>());
            }
            if (j.contains("reference") && !j.at("reference").is_null()) {
                r.reference = j.at("reference").get<std::string>();
            }
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path.string() + ": " + e.what(), line_no);
        } catch (const ParseError& e) {
            if (e.line() != 0) {
                throw;
            }
            throw ParseError(path.string() + ": " + e.what(), line_no);
        }
    }
    return out;
}

// Re-raises a library error with the record id in front, keeping its type.
template <typename F>
auto for_record(const std::string& id, F&& f) {
    const std::string p = "record '" + id + "': ";
    try {
        return f();
    } catch (const ParseError& e) {
        throw ParseError(p + e.what());
    } catch (const RangeError& e) {
        throw RangeError(p + e.what());
    } catch (const ConsistencyError& e) {
        throw ConsistencyError(p + e.what());
    } catch (const AlignmentError& e) {
        throw AlignmentError(p + e.what());
    } catch (const FixtureMissError& e) {
        throw FixtureMissError(p + e.what());
    } catch (const TransportError& e) {
        throw TransportError(p + e.what());
    } catch (const InputError& e) {
        throw InputError(p + e.what());
    }
}

struct JudgeOptions {
    std::string fixtures;
    bool live = false;
    std::string base_url;
    std::string path = "/v1/chat/completions";
    std::string names = "chatgpt,gpt4";
    std::string api_key_env = "CPOLAB_JUDGE_API_KEY";
    std::size_t concurrency = 4;
    int retries = 3;

    void add_to(CLI::App* sub) {
        sub->add_option("--fixtures", fixtures, "Directory of recorded responses, one <judge>.jsonl per judge");
        sub->add_flag("--live", live, "Query live judge endpoints instead of fixtures");
        sub->add_option("--base-url", base_url, "Judge endpoint base URL (live mode)");
        sub->add_option("--endpoint-path", path, "Chat completions path (live mode)")->capture_default_str();
        sub->add_option("--judges", names, "Comma-separated judge names; model names in live mode")
            ->capture_default_str();
        sub->add_option("--api-key-env", api_key_env, "Environment variable holding the judge API key")
            ->capture_default_str();
        sub->add_option("--concurrency", concurrency, "Concurrent live requests per judge")->capture_default_str();
        sub->add_option("--retries", retries, "Retries per live request")->capture_default_str();
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["mode"] = live ? "live" : "fixtures";
        j["judges"] = split_list(names);
        if (live) {
            j["base_url"] = base_url;
            j["endpoint_path"] = path;
            j["api_key_env"] = api_key_env;
            j["concurrency"] = concurrency;
            j["retries"] = retries;
        } else {
            j["fixtures"] = fixtures;
        }
        return j;
    }

    std::vector<JudgeClient> make() const {
        const auto list = split_list(names);
        if (list.empty()) {
            throw UsageError("at least one judge is required");
        }
        if (live == !fixtures.empty()) {
            throw UsageError("give exactly one of --fixtures DIR or --live");
        }
        std::vector<JudgeClient> out;
        for (const auto& name : list) {
            if (live) {
                EndpointConfig ep;
                ep.base_url = base_url;
                ep.path = path;
                ep.model = name;
                ep.api_key_env = api_key_env;
                if (base_url.empty()) {
                    throw UsageError("--live needs --base-url");
                }
                RetryPolicy policy;
                policy.max_retries = retries;
                out.push_back(JudgeClient::live(name, ep, policy));
            } else {
                const fs::path store = fs::path(fixtures) / (name + ".jsonl");
                if (!fs::exists(store)) {
                    throw UsageError("no fixture store for judge '" + name + "' at " + store.string());
                }
                out.push_back(JudgeClient::fixture(name, FixtureStore::load(store)));
            }
        }
        return out;
    }
};

struct Segmented {
    RawRecord raw;
    std::vector<std::string> sentences;
};

// Queries every judge, merges their verdicts by union and returns the labeled
// records plus one audit line per record with the raw responses.
std::vector<AnnotatedSummary> annotate_all(const std::vector<Segmented>& items, std::vector<JudgeClient>& judges,
                                           const JudgeOptions& options, std::ostream& err,
                                           std::vector<nlohmann::ordered_json>& audit) {
    std::vector<std::string> prompts;
    prompts.reserve(items.size());
    for (const auto& it : items) {
        prompts.push_back(build_annotation_prompt(it.raw.article, it.sentences));
    }
    std::vector<std::vector<std::string>> responses;
    for (auto& judge : judges) {
        if (options.live) {
            responses.push_back(judge.request_all(prompts, options.concurrency));
        } else {
            std::vector<std::string> r;
            for (std::size_t i = 0; i < items.size(); ++i) {
                r.push_back(for_record(items[i].raw.article_id, [&] { return judge.request(prompts[i]); }));
            }
            responses.push_back(std::move(r));
        }
    }
    std::vector<AnnotatedSummary> out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto& it = items[i];
        const std::size_t n = it.sentences.size();
        nlohmann::ordered_json a;
        a["article_id"] = it.raw.article_id;
        a["sentences"] = it.sentences;
        a["judges"] = nlohmann::ordered_json::object();
        std::vector<AnnotationVerdict> verdicts;
        for (std::size_t j = 0; j < judges.size(); ++j) {
            const AnnotationVerdict v =
                for_record(it.raw.article_id, [&] { return parse_verdict(responses[j][i], n); });
            if (!v.unlisted.empty()) {
                err << "warning: record '" << it.raw.article_id << "': judge '" << judges[j].name() << "' left "
                    << v.unlisted.size() << " sentence(s) unlisted; treating them as consistent\n";
            }
            a["judges"][judges[j].name()] = {{"response", responses[j][i]},
                                             {"verdict", nlohmann::ordered_json::parse(render_verdict(v))}};
            verdicts.push_back(v);
        }
        std::vector<int> labels = merge_union(verdicts.front(), verdicts.back(), n);
        for (std::size_t j = 1; j + 1 < verdicts.size(); ++j) {
            const auto more = merge_union(verdicts[j], verdicts[j], n);
            for (std::size_t s = 0; s < n; ++s) {
                labels[s] = std::min(labels[s], more[s]);
            }
        }
        a["labels"] = labels;
        AnnotatedSummary rec;
        rec.article_id = it.raw.article_id;
        rec.article = it.raw.article;
        rec.summary = it.raw.summary;
        rec.source_model = it.raw.source_model;
        rec.data_source = it.raw.data_source;
        rec.reference = it.raw.reference;
        for (std::size_t s = 0; s < n; ++s) {
            rec.sentences.push_back({it.sentences[s], labels[s]});
        }
        for_record(rec.article_id, [&] {
            validate_record(rec);
            return 0;
        });
        audit.push_back(std::move(a));
        out.push_back(std::move(rec));
    }
    return out;
}

std::string jsonl(const std::vector<nlohmann::ordered_json>& lines) {
    std::string s;
    for (const auto& l : lines) {
        s += l.dump() + "\n";
    }
    return s;
}

} // namespace

void register_data_commands(CLI::App& app, Context& ctx, std::vector<Command>& commands) {
    // build-data
    {
        struct Opts {
            std::string input;
            std::string filters = "fragment,language,symbols,length";
            std::size_t min_sentences = 1;
            std::size_t max_seq_len = 256;
            JudgeOptions judges;
        };
        auto o = std::make_shared<Opts>();
        auto* sub = app.add_subcommand("build-data", "Filter, segment and annotate raw summaries into a dataset");
        sub->add_option("--input", o->input, "Raw JSONL with article_id, article and summary")
            ->required()
            ->check(CLI::ExistingFile);
        sub->add_option("--filters", o->filters, "Comma-separated filters, or 'none'")->capture_default_str();
        sub->add_option("--min-sentences", o->min_sentences, "Drop summaries with fewer sentences")
            ->capture_default_str();
        sub->add_option("--max-seq-len", o->max_seq_len, "Longest instruction + summary sequence kept, in tokens")
            ->capture_default_str();
        o->judges.add_to(sub);
        commands.push_back({sub, [o, &ctx]() {
                                RunRecord rec;
                                FilterOptions fopts;
                                fopts.rules.clear();
                                if (o->filters != "none") {
                                    for (const auto& name : split_list(o->filters)) {
                                        fopts.rules.push_back(filter_rule_from_string(name));
                                    }
                                }
                                auto judges = o->judges.make();
                                const auto raw = load_raw(o->input);
                                const ByteTokenizer tokenizer;
                                const InstructionPair instructions = InstructionPair::defaults();
                                std::map<std::string, std::size_t> dropped;
                                std::vector<Segmented> kept;
                                for (const auto& r : raw) {
                                    FilterOptions f = fopts;
                                    const std::size_t prompt_len =
                                        tokenizer
                                            .encode_prompt(instructions.render(Instruction::internal, r.article))
                                            .size();
                                    f.max_summary_tokens = o->max_seq_len > prompt_len ? o->max_seq_len - prompt_len
                                                                                       : 0;
                                    FilterVerdict v = filter_summary(r.summary, f);
                                    const bool length_on = std::find(f.rules.begin(), f.rules.end(),
                                                                     FilterRule::length) != f.rules.end();
                                    if (v.keep && length_on && o->max_seq_len <= prompt_len) {
                                        v = {false, FilterRule::length, "instruction alone exceeds the limit"};
                                    }
                                    if (!v.keep) {
                                        ++dropped[to_string(*v.reason)];
                                        continue;
                                    }
                                    auto sentences =
                                        for_record(r.article_id, [&] { return split_sentences(r.summary); });
                                    if (sentences.size() < o->min_sentences) {
                                        ++dropped["min_sentences"];
                                        continue;
                                    }
                                    kept.push_back({r, std::move(sentences)});
                                }
                                std::vector<nlohmann::ordered_json> audit;
                                const auto records = annotate_all(kept, judges, o->judges, ctx.err, audit);

                                const fs::path dataset = ctx.out_dir / "lesson.jsonl";
                                const fs::path audit_path = ctx.out_dir / "annotations.jsonl";
                                const fs::path stats_path = ctx.out_dir / "stats.json";
                                save_jsonl(dataset, records);
                                write_file(audit_path, jsonl(audit));
                                nlohmann::ordered_json stats;
                                stats["input_records"] = raw.size();
                                stats["kept_records"] = records.size();
                                stats["dropped"] = dropped;
                                stats["stats"] = records.empty() ? nlohmann::ordered_json()
                                                                 : to_json(compute_stats(records));
                                write_file(stats_path, stats.dump(2) + "\n");
                                ctx.out << "kept " << records.size() << " of " << raw.size() << " records\n";
                                if (!records.empty()) {
                                    const auto s = compute_stats(records);
                                    ctx.out << "positive " << s.positive << ", negative " << s.negative << "\n";
                                }

                                rec.config = {{"filters", o->filters},
                                              {"min_sentences", o->min_sentences},
                                              {"max_seq_len", o->max_seq_len},
                                              {"judges", o->judges.to_json()}};
                                rec.inputs = {o->input};
                                if (!o->judges.live) {
                                    rec.inputs.push_back(o->judges.fixtures);
                                }
                                rec.outputs = {dataset, audit_path, stats_path};
                                return rec;
                            }});
    }
    // annotate
    {
        struct Opts {
            std::string input;
            JudgeOptions judges;
        };
        auto o = std::make_shared<Opts>();
        auto* sub = app.add_subcommand("annotate", "Annotate summaries sentence by sentence with LLM judges");
        sub->add_option("--input", o->input, "JSONL with article_id, article and summary")
            ->required()
            ->check(CLI::ExistingFile);
        o->judges.add_to(sub);
        commands.push_back({sub, [o, &ctx]() {
                                RunRecord rec;
                                auto judges = o->judges.make();
                                std::vector<Segmented> items;
                                for (const auto& r : load_raw(o->input)) {
                                    items.push_back(
                                        {r, for_record(r.article_id, [&] { return split_sentences(r.summary); })});
                                }
                                std::vector<nlohmann::ordered_json> audit;
                                const auto records = annotate_all(items, judges, o->judges, ctx.err, audit);
                                const fs::path dataset = ctx.out_dir / "annotated.jsonl";
                                const fs::path audit_path = ctx.out_dir / "annotations.jsonl";
                                save_jsonl(dataset, records);
                                write_file(audit_path, jsonl(audit));
                                for (const auto& a : audit) {
                                    ctx.out << a.at("article_id").get<std::string>() << " labels "
                                            << a.at("labels").dump() << "\n";
                                }
                                rec.config = {{"judges", o->judges.to_json()}};
                                rec.inputs = {o->input};
                                if (!o->judges.live) {
                                    rec.inputs.push_back(o->judges.fixtures);
                                }
                                rec.outputs = {dataset, audit_path};
                                return rec;
                            }});
    }
}

} // namespace cpolab::cli
