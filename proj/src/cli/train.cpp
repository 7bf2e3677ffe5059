// SPDX-License-Identifier: Apache-2.0
//
// train and probe.
#include <memory>
#include <optional>

#include "commands.hpp"
#include "cpolab/checkpoint.hpp"
#include "cpolab/errors.hpp"
#include "cpolab/probe.hpp"
#include "cpolab/trainer.hpp"

namespace cpolab::cli {

namespace fs = std::filesystem;

namespace {

nlohmann::json load_json(const fs::path& path) {
    try {
        return nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

ModelConfig model_config(const std::string& path) {
    ModelConfig c;
    if (!path.empty()) {
        c = model_config_from_json(load_json(path));
    }
    c.validate();
    return c;
}

std::vector<ProbeRecord> load_probe_set(const fs::path& path) {
    auto records = expand_pairs(load_probe_pairs(path));
    if (records.empty()) {
        throw InputError("probe set " + path.string() + " is empty");
    }
    return records;
}

} // namespace

void register_train_commands(CLI::App& app, Context& ctx, std::vector<Command>& commands) {
    // train
    {
        struct Opts {
            std::string data;
            std::string probe;
            std::string config;
            std::string model_config;
            std::string resume;
            bool dry_run = false;
            bool no_split = false;
            std::optional<std::size_t> k, epochs, batch_size;
            std::optional<double> lr, alpha, weight_decay, warmup_ratio;
        };
        auto o = std::make_shared<Opts>();
        auto* sub = app.add_subcommand("train", "Probe, select the worst layers and train them, epoch by epoch");
        sub->add_option("--data", o->data, "Annotated dataset (JSONL)")->required()->check(CLI::ExistingFile);
        sub->add_option("--probe", o->probe, "Probe pairs (JSONL with doc_id, article, correct_summary, "
                                             "incorrect_summary)")
            ->required()
            ->check(CLI::ExistingFile);
        sub->add_option("--config", o->config, "Training config JSON; flags override it")->check(CLI::ExistingFile);
        sub->add_option("--model-config", o->model_config, "Model config JSON")->check(CLI::ExistingFile);
        sub->add_option("--resume", o->resume, "Checkpoint directory to resume from")->check(CLI::ExistingDirectory);
        sub->add_flag("--dry-run", o->dry_run, "Validate config and data, then exit");
        sub->add_flag("--no-split", o->no_split, "Train on every record instead of the 9:1 training split");
        sub->add_option("--k", o->k, "Layers trained per epoch");
        sub->add_option("--epochs", o->epochs, "Epochs");
        sub->add_option("--batch-size", o->batch_size, "Logical batch size");
        sub->add_option("--lr", o->lr, "Peak learning rate");
        sub->add_option("--alpha", o->alpha, "Penalty weight");
        sub->add_option("--weight-decay", o->weight_decay, "Decoupled weight decay");
        sub->add_option("--warmup-ratio", o->warmup_ratio, "Fraction of steps spent warming up");
        commands.push_back({sub, [o, &ctx]() {
                                RunRecord rec;
                                TrainConfig config;
                                if (!o->config.empty()) {
                                    config = train_config_from_json(load_json(o->config));
                                }
                                if (o->k) config.k = *o->k;
                                if (o->epochs) config.epochs = *o->epochs;
                                if (o->batch_size) config.batch_size = *o->batch_size;
                                if (o->lr) config.lr = *o->lr;
                                if (o->alpha) config.alpha = *o->alpha;
                                if (o->weight_decay) config.weight_decay = *o->weight_decay;
                                if (o->warmup_ratio) config.warmup_ratio = *o->warmup_ratio;
                                if (ctx.seed_given || o->config.empty()) {
                                    config.seed = ctx.seed;
                                }
                                config.validate();
                                const ModelConfig mc = model_config(o->model_config);

                                rec.config = {{"train", to_json(config)}, {"model", to_json(mc)},
                                              {"no_split", o->no_split}, {"dry_run", o->dry_run}};
                                if (!o->resume.empty()) {
                                    rec.config["resume"] = o->resume;
                                }
                                rec.inputs = {o->data, o->probe};
                                for (const auto& p : {o->config, o->model_config, o->resume}) {
                                    if (!p.empty()) {
                                        rec.inputs.emplace_back(p);
                                    }
                                }

                                const auto all = load_jsonl(o->data);
                                const auto records = o->no_split ? all : split_dataset(all).train;
                                if (records.empty()) {
                                    throw InputError("no training records in " + o->data);
                                }
                                const ByteTokenizer tokenizer;
                                const InstructionPair instructions = InstructionPair::defaults();
                                std::vector<CpoExample> examples;
                                for (const auto& r : records) {
                                    CpoExample ex = make_example(r, instructions, tokenizer);
                                    const std::size_t len =
                                        std::max(ex.input(Instruction::contextual).size(),
                                                 ex.input(Instruction::internal).size());
                                    if (len > mc.max_seq_len) {
                                        throw InputError("record '" + r.article_id + "' needs " +
                                                         std::to_string(len) + " tokens, over max_seq_len " +
                                                         std::to_string(mc.max_seq_len));
                                    }
                                    examples.push_back(std::move(ex));
                                }
                                const auto probe = load_probe_set(o->probe);
                                ctx.out << "training records " << examples.size() << ", probe records "
                                        << probe.size() << "\n";
                                if (o->dry_run) {
                                    ctx.out << "dry run: config valid\n";
                                    return rec;
                                }
                                write_file(ctx.out_dir / "config.json", rec.config.dump(2) + "\n");

                                TrainOptions topts;
                                topts.out_dir = ctx.out_dir;
                                if (!o->resume.empty()) {
                                    topts.resume_from = o->resume;
                                }
                                TrainHooks hooks;
                                hooks.on_epoch = [&](const EpochRecord& e) {
                                    ctx.out << "epoch " << e.epoch << " layers";
                                    for (std::size_t u : e.updated_layers) {
                                        ctx.out << ' ' << u;
                                    }
                                    ctx.out << " loss " << e.mean_loss.loss << "\n";
                                };
                                const auto result = train(examples, probe, ModelParams<float>::init(mc, config.seed),
                                                          config, topts, hooks);
                                rec.outputs = {ctx.out_dir / "config.json", ctx.out_dir / "metrics.csv"};
                                for (const auto& e : result.epochs) {
                                    rec.outputs.push_back(ctx.out_dir / "epochs" /
                                                          ("epoch-" + std::to_string(e.epoch) + ".json"));
                                    rec.outputs.push_back(ctx.out_dir / e.checkpoint);
                                }
                                return rec;
                            }});
    }
    // probe
    {
        struct Opts {
            std::string probe;
            std::string checkpoint;
            std::string model_config;
            std::size_t k = 4;
            bool heads = false;
            double lr = 0.01;
            std::size_t epochs = 200;
        };
        auto o = std::make_shared<Opts>();
        auto* sub = app.add_subcommand("probe", "Fit per-layer (and per-head) probes and report accuracies");
        sub->add_option("--probe", o->probe, "Probe pairs (JSONL)")->required()->check(CLI::ExistingFile);
        sub->add_option("--checkpoint", o->checkpoint, "Checkpoint directory; a fresh model when omitted")
            ->check(CLI::ExistingDirectory);
        sub->add_option("--model-config", o->model_config, "Model config JSON for a fresh model")
            ->check(CLI::ExistingFile);
        sub->add_option("--k", o->k, "Worst layers to select")->capture_default_str();
        sub->add_flag("--heads", o->heads, "Also probe every attention head");
        sub->add_option("--probe-lr", o->lr, "Probe learning rate")->capture_default_str();
        sub->add_option("--probe-epochs", o->epochs, "Probe gradient-descent epochs")->capture_default_str();
        commands.push_back({sub, [o, &ctx]() {
                                RunRecord rec;
                                if (o->k == 0) {
                                    throw ConfigError("k must be at least 1");
                                }
                                ModelParams<float> params =
                                    o->checkpoint.empty() ? ModelParams<float>::init(model_config(o->model_config),
                                                                                     ctx.seed)
                                                          : params_from_checkpoint(read_checkpoint(o->checkpoint));
                                ProbeOptions popts;
                                popts.k = o->k;
                                popts.capture_heads = o->heads;
                                popts.train.lr = o->lr;
                                popts.train.epochs = o->epochs;
                                rec.config = {{"k", o->k},
                                              {"heads", o->heads},
                                              {"probe", to_json(popts.train)},
                                              {"model", to_json(params.config())}};
                                rec.inputs = {o->probe};
                                if (!o->checkpoint.empty()) {
                                    rec.inputs.emplace_back(o->checkpoint);
                                }
                                const auto records = load_probe_set(o->probe);
                                const ProbeReport report = probe_model(params, records, InstructionPair::defaults(),
                                                                       ByteTokenizer{}, popts);
                                const fs::path json_path = ctx.out_dir / "probe_report.json";
                                const fs::path layers_path = ctx.out_dir / "probe_layers.csv";
                                write_file(json_path, to_json(report).dump(2) + "\n");
                                write_file(layers_path, layer_report_csv(report));
                                rec.outputs = {json_path, layers_path};
                                ctx.out << layer_report_csv(report);
                                if (report.head_accuracy) {
                                    const fs::path heads_path = ctx.out_dir / "probe_heads.csv";
                                    write_file(heads_path, head_grid_csv(*report.head_accuracy));
                                    rec.outputs.push_back(heads_path);
                                    const auto s = *report.head_stats();
                                    ctx.out << "head accuracy mean " << s.mean << " max " << s.max << " min "
                                            << s.min << "\n";
                                }
                                return rec;
                            }});
    }
}

} // namespace cpolab::cli
