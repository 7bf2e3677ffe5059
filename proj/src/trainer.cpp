// SPDX-License-Identifier: Apache-2.0
#include "cpolab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "cpolab/errors.hpp"

namespace cpolab {

namespace fs = std::filesystem;

std::vector<std::string> TrainConfig::problems() const {
    std::vector<std::string> out;
    auto positive = [&](double v, const char* name) {
        if (!(v > 0.0) || !std::isfinite(v)) {
            out.push_back(std::string(name) + " must be positive");
        }
    };
    positive(static_cast<double>(batch_size), "batch_size");
    positive(static_cast<double>(epochs), "epochs");
    positive(lr, "lr");
    positive(static_cast<double>(k), "k");
    positive(eps, "eps");
    positive(adam_eps, "adam_eps");
    positive(probe.lr, "probe.lr");
    positive(static_cast<double>(probe.epochs), "probe.epochs");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
        out.push_back("weight_decay must be non-negative");
    }
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) {
        out.push_back("alpha must be non-negative");
    }
    if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0)) {
        out.push_back("warmup_ratio must lie in [0, 1]");
    }
    if (!(eps < 1.0)) {
        out.push_back("eps must be below 1");
    }
    for (auto [v, name] : {std::pair{beta1, "beta1"}, std::pair{beta2, "beta2"}}) {
        if (!(v >= 0.0 && v < 1.0)) {
            out.push_back(std::string(name) + " must lie in [0, 1)");
        }
    }
    return out;
}

void TrainConfig::validate() const {
    const auto p = problems();
    if (p.empty()) {
        return;
    }
    std::string msg = "invalid training config:";
    for (const auto& s : p) {
        msg += "\n  - " + s;
    }
    throw ConfigError(msg);
}

nlohmann::ordered_json to_json(const TrainConfig& c) {
    nlohmann::ordered_json j;
    j["batch_size"] = c.batch_size;
    j["epochs"] = c.epochs;
    j["lr"] = c.lr;
    j["weight_decay"] = c.weight_decay;
    j["warmup_ratio"] = c.warmup_ratio;
    j["alpha"] = c.alpha;
    j["k"] = c.k;
    j["seed"] = c.seed;
    j["eps"] = c.eps;
    j["normalize_per_token"] = c.normalize_per_token;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["adam_eps"] = c.adam_eps;
    j["probe"] = to_json(c.probe);
    j["probe_heads"] = c.probe_heads;
    return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) {
        throw ConfigError("training config must be a JSON object");
    }
    TrainConfig c;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "batch_size") {
                c.batch_size = value.get<std::size_t>();
            } else if (key == "epochs") {
                c.epochs = value.get<std::size_t>();
            } else if (key == "lr") {
                c.lr = value.get<double>();
            } else if (key == "weight_decay") {
                c.weight_decay = value.get<double>();
            } else if (key == "warmup_ratio") {
                c.warmup_ratio = value.get<double>();
            } else if (key == "alpha") {
                c.alpha = value.get<double>();
            } else if (key == "k") {
                c.k = value.get<std::size_t>();
            } else if (key == "seed") {
                c.seed = value.get<std::uint64_t>();
            } else if (key == "eps") {
                c.eps = value.get<double>();
            } else if (key == "normalize_per_token") {
                c.normalize_per_token = value.get<bool>();
            } else if (key == "beta1") {
                c.beta1 = value.get<double>();
            } else if (key == "beta2") {
                c.beta2 = value.get<double>();
            } else if (key == "adam_eps") {
                c.adam_eps = value.get<double>();
            } else if (key == "probe_heads") {
                c.probe_heads = value.get<bool>();
            } else if (key == "probe") {
                for (const auto& [pk, pv] : value.items()) {
                    if (pk == "lr") {
                        c.probe.lr = pv.get<double>();
                    } else if (pk == "epochs") {
                        c.probe.epochs = pv.get<std::size_t>();
                    } else if (pk == "standardize") {
                        c.probe.standardize = pv.get<bool>();
                    } else {
                        throw ConfigError("unknown probe config key '" + pk + "'");
                    }
                }
            } else {
                throw ConfigError("unknown training config key '" + key + "'");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("training config: ") + e.what());
    }
    return c;
}

double lr_schedule(std::size_t step, std::size_t total_steps, const TrainConfig& config) {
    if (step > total_steps) {
        throw ContractError("step " + std::to_string(step) + " beyond " + std::to_string(total_steps) + " steps");
    }
    const double warmup = config.warmup_ratio * static_cast<double>(total_steps);
    const double s = static_cast<double>(step);
    if (warmup <= 0.0 || s >= warmup) {
        return config.lr;
    }
    return config.lr * s / warmup;
}

std::vector<std::size_t> batch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        order[i] = i;
    }
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(epoch), 0x5eedu};
    std::mt19937_64 rng(seq);
    // Fisher-Yates with a plain modulo draw, so the order does not depend on
    // the standard library's distribution implementation.
    for (std::size_t i = n; i > 1; --i) {
        std::swap(order[i - 1], order[rng() % i]);
    }
    return order;
}

template <typename T>
void AdamW<T>::step(ModelParams<T>& params, double lr, double weight_decay) {
    for (auto& g : params.groups()) {
        if (!g.trainable) {
            continue;
        }
        for (auto& nt : g.tensors) {
            for (T v : nt.tensor.grad()) {
                if (!std::isfinite(static_cast<double>(v))) {
                    throw DivergenceError("non-finite gradient in '" + nt.name + "'");
                }
            }
        }
    }
    const T b1 = static_cast<T>(beta1_);
    const T b2 = static_cast<T>(beta2_);
    for (auto& g : params.groups()) {
        if (!g.trainable) {
            continue;
        }
        for (auto& nt : g.tensors) {
            auto w = nt.tensor.mutable_data();
            Slot& s = state_[nt.name];
            if (s.m.size() != w.size()) {
                s.m.assign(w.size(), T{0});
                s.v.assign(w.size(), T{0});
                s.t = 0;
            }
            ++s.t;
            const auto grad = nt.tensor.grad();
            const T decay = static_cast<T>(lr * weight_decay);
            const T c1 = static_cast<T>(1.0 - std::pow(beta1_, static_cast<double>(s.t)));
            const T c2 = static_cast<T>(1.0 - std::pow(beta2_, static_cast<double>(s.t)));
            const T step_lr = static_cast<T>(lr);
            const T eps = static_cast<T>(eps_);
            for (std::size_t i = 0; i < w.size(); ++i) {
                const T gi = grad.empty() ? T{0} : grad[i];
                w[i] -= decay * w[i];
                s.m[i] = b1 * s.m[i] + (T{1} - b1) * gi;
                s.v[i] = b2 * s.v[i] + (T{1} - b2) * gi * gi;
                const T mhat = s.m[i] / c1;
                const T vhat = s.v[i] / c2;
                w[i] -= step_lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }
}

template <typename T>
void AdamW<T>::reset_group(const ModelParams<T>& params, const std::string& group) {
    for (const auto& nt : params.group(group).tensors) {
        state_.erase(nt.name);
    }
}

template <typename T>
void AdamW<T>::save(Checkpoint& checkpoint) const {
    nlohmann::ordered_json steps = nlohmann::ordered_json::object();
    for (const auto& [name, s] : state_) {
        steps[name] = s.t;
        const Shape shape{s.m.size()};
        checkpoint.entries.push_back({"optim.m/" + name, shape, std::vector<float>(s.m.begin(), s.m.end())});
        checkpoint.entries.push_back({"optim.v/" + name, shape, std::vector<float>(s.v.begin(), s.v.end())});
    }
    checkpoint.metadata["optimizer"] = {{"beta1", beta1_}, {"beta2", beta2_}, {"eps", eps_}, {"steps", steps}};
}

template <typename T>
void AdamW<T>::load(const Checkpoint& checkpoint) {
    state_.clear();
    if (!checkpoint.metadata.contains("optimizer")) {
        throw ParseError("checkpoint holds no optimizer state");
    }
    for (const auto& [name, t] : checkpoint.metadata.at("optimizer").at("steps").items()) {
        const auto* m = checkpoint.find("optim.m/" + name);
        const auto* v = checkpoint.find("optim.v/" + name);
        if (m == nullptr || v == nullptr) {
            throw ParseError("checkpoint optimizer state for '" + name + "' is incomplete");
        }
        Slot s;
        s.m.assign(m->values.begin(), m->values.end());
        s.v.assign(v->values.begin(), v->values.end());
        s.t = t.template get<std::uint64_t>();
        state_[name] = std::move(s);
    }
}

nlohmann::ordered_json to_json(const EpochRecord& r) {
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["probe"] = to_json(r.probe);
    j["mean_loss"] = to_json(r.mean_loss);
    j["updated_layers"] = std::vector<std::size_t>(r.updated_layers.begin(), r.updated_layers.end());
    j["checkpoint"] = r.checkpoint;
    j["steps"] = r.steps;
    return j;
}

EpochRecord epoch_record_from_json(const nlohmann::json& j) {
    try {
        EpochRecord r;
        r.epoch = j.at("epoch").get<std::size_t>();
        r.probe = probe_report_from_json(j.at("probe"));
        const auto& l = j.at("mean_loss");
        r.mean_loss.incentive = l.at("incentive").get<double>();
        r.mean_loss.penalty = l.at("penalty").get<double>();
        r.mean_loss.total = l.at("total").get<double>();
        r.mean_loss.loss = l.at("loss").get<double>();
        r.mean_loss.incentive_sum = l.at("incentive_sum").get<double>();
        r.mean_loss.penalty_sum = l.at("penalty_sum").get<double>();
        r.mean_loss.incentive_tokens = l.at("incentive_tokens").get<std::size_t>();
        r.mean_loss.penalty_tokens = l.at("penalty_tokens").get<std::size_t>();
        r.mean_loss.alpha = l.at("alpha").get<double>();
        const auto layers = j.at("updated_layers").get<std::vector<std::size_t>>();
        r.updated_layers = {layers.begin(), layers.end()};
        r.checkpoint = j.at("checkpoint").get<std::string>();
        r.steps = j.at("steps").get<std::size_t>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("epoch record: ") + e.what());
    }
}

namespace {

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

std::string metrics_csv_header() {
    return "step,loss,incentive,penalty,lr\n";
}

std::string metrics_csv_row(const StepMetrics& m) {
    return std::to_string(m.step) + ',' + fmt_double(m.loss.loss) + ',' + fmt_double(m.loss.incentive) + ',' +
           fmt_double(m.loss.penalty) + ',' + fmt_double(m.lr) + '\n';
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
}

LossBreakdown mean_breakdown(const std::vector<LossBreakdown>& steps) {
    LossBreakdown m;
    if (steps.empty()) {
        return m;
    }
    const double n = static_cast<double>(steps.size());
    for (const auto& s : steps) {
        m.incentive += s.incentive / n;
        m.penalty += s.penalty / n;
        m.total += s.total / n;
        m.loss += s.loss / n;
        m.incentive_sum += s.incentive_sum / n;
        m.penalty_sum += s.penalty_sum / n;
        m.incentive_tokens += s.incentive_tokens;
        m.penalty_tokens += s.penalty_tokens;
        m.alpha = s.alpha;
    }
    return m;
}

template <typename T>
void save_state(const fs::path& dir, const ModelParams<T>& params, const AdamW<T>& optimizer,
                const TrainConfig& config, std::size_t epoch, std::size_t step,
                const std::set<std::size_t>& selected) {
    Checkpoint ck;
    append_params(ck, params);
    optimizer.save(ck);
    ck.metadata["epoch"] = epoch;
    ck.metadata["step"] = step;
    ck.metadata["selected"] = std::vector<std::size_t>(selected.begin(), selected.end());
    ck.metadata["train_config"] = to_json(config);
    write_checkpoint(dir, ck);
}

} // namespace

template <typename T>
TrainResult<T> train(const std::vector<CpoExample>& train_set, const std::vector<ProbeRecord>& probe_set,
                     const ModelParams<T>& params, const TrainConfig& config, const TrainOptions& options,
                     const TrainHooks& hooks) {
    if (train_set.empty()) {
        throw InputError("training set is empty");
    }
    if (probe_set.empty()) {
        throw InputError("probe set is empty");
    }
    config.validate();
    options.instructions.validate();
    const CpoConfig cpo = config.cpo();
    const ByteTokenizer tokenizer;
    const bool write = !options.out_dir.empty();

    const std::size_t steps_per_epoch = (train_set.size() + config.batch_size - 1) / config.batch_size;
    const std::size_t total_steps = steps_per_epoch * config.epochs;

    AdamW<T> optimizer(config.beta1, config.beta2, config.adam_eps);
    // Tensors are shared handles; the caller's weights must survive training.
    TrainResult<T> result{params.clone(), {}, {}};
    ModelParams<T>& model = result.params;
    std::size_t first_epoch = 1;
    std::size_t step = 0;
    std::set<std::size_t> previous;

    if (options.resume_from) {
        const Checkpoint ck = read_checkpoint(*options.resume_from);
        const auto loaded = params_from_checkpoint(ck).template cast<T>();
        if (!(loaded.config() == model.config())) {
            throw ConfigError("resume checkpoint holds a different model config");
        }
        model = loaded;
        optimizer.load(ck);
        first_epoch = ck.metadata.at("epoch").get<std::size_t>() + 1;
        step = ck.metadata.at("step").get<std::size_t>();
        const auto sel = ck.metadata.at("selected").get<std::vector<std::size_t>>();
        previous = {sel.begin(), sel.end()};
    }

    if (write) {
        const fs::path metrics = options.out_dir / "metrics.csv";
        std::string kept = metrics_csv_header();
        if (options.resume_from && fs::exists(metrics)) {
            // Keep rows up to the resumed step so the file matches an uninterrupted run.
            std::ifstream in(metrics);
            std::string line;
            std::getline(in, line);
            while (std::getline(in, line)) {
                if (std::stoull(line.substr(0, line.find(','))) <= step) {
                    kept += line + '\n';
                }
            }
        }
        write_text(metrics, kept);
    }

    ProbeOptions probe_options;
    probe_options.train = config.probe;
    probe_options.k = config.k;
    probe_options.capture_heads = config.probe_heads;

    for (std::size_t epoch = first_epoch; epoch <= config.epochs; ++epoch) {
        ProbeReport report = probe_model(model, probe_set, options.instructions, tokenizer, probe_options, epoch);
        if (hooks.accuracy_override) {
            if (auto a = hooks.accuracy_override(epoch)) {
                if (a->size() != model.config().n_layers) {
                    throw ContractError("injected accuracies do not cover every layer");
                }
                report.layer_accuracy = *a;
                report.selected = select_worst_layers(report.layer_accuracy, config.k);
            }
        }
        const std::set<std::size_t> selected = report.selected;
        for (std::size_t u : selected) {
            if (!previous.contains(u)) {
                optimizer.reset_group(model, ModelParams<T>::layer_group_name(u));
            }
        }
        set_trainable_layers(model, selected);
        previous = selected;

        std::vector<LossBreakdown> epoch_losses;
        const auto order = batch_order(train_set.size(), config.seed, epoch);
        for (std::size_t b = 0; b < steps_per_epoch; ++b) {
            ++step;
            const std::size_t begin = b * config.batch_size;
            const std::size_t end = std::min(begin + config.batch_size, order.size());
            std::size_t n_inc = 0;
            std::size_t n_pen = 0;
            for (std::size_t i = begin; i < end; ++i) {
                n_inc += train_set[order[i]].masks.incentive_count();
                n_pen += train_set[order[i]].masks.penalty_count();
            }
            model.zero_grad();
            std::vector<double> inc_sums;
            std::vector<double> pen_sums;
            for (std::size_t i = begin; i < end; ++i) {
                const CpoTerms<T> terms = cpo_terms(model, train_set[order[i]], cpo.eps);
                inc_sums.push_back(static_cast<double>(terms.incentive_sum.item()));
                pen_sums.push_back(static_cast<double>(terms.penalty_sum.item()));
                const Tensor<T> loss = cpo_sample_loss(terms, n_inc, n_pen, cpo);
                if (loss.requires_grad()) {
                    backward(loss);
                }
            }
            StepMetrics metrics;
            metrics.step = step;
            metrics.lr = lr_schedule(step, total_steps, config);
            metrics.loss = summarize_losses(inc_sums, pen_sums, n_inc, n_pen, cpo);
            try {
                if (!std::isfinite(metrics.loss.loss)) {
                    throw DivergenceError("non-finite loss at step " + std::to_string(step));
                }
                optimizer.step(model, metrics.lr, config.weight_decay);
            } catch (const DivergenceError&) {
                if (write) {
                    save_state(options.out_dir / "checkpoints" / ("diverged-step-" + std::to_string(step)), model,
                               optimizer, config, epoch, step, selected);
                }
                throw;
            }
            if (write) {
                std::ofstream out(options.out_dir / "metrics.csv", std::ios::app | std::ios::binary);
                out << metrics_csv_row(metrics);
            }
            if (hooks.on_step) {
                hooks.on_step(metrics);
            }
            epoch_losses.push_back(metrics.loss);
            result.steps.push_back(metrics);
        }
        model.zero_grad();

        EpochRecord record;
        record.epoch = epoch;
        record.probe = std::move(report);
        record.mean_loss = mean_breakdown(epoch_losses);
        record.updated_layers = selected;
        record.steps = epoch_losses.size();
        if (write) {
            const fs::path dir = options.out_dir / "checkpoints" / ("epoch-" + std::to_string(epoch));
            save_state(dir, model, optimizer, config, epoch, step, selected);
            record.checkpoint = (fs::path("checkpoints") / ("epoch-" + std::to_string(epoch))).string();
            write_text(options.out_dir / "epochs" / ("epoch-" + std::to_string(epoch) + ".json"),
                       to_json(record).dump(2) + "\n");
        }
        if (hooks.on_epoch) {
            hooks.on_epoch(record);
        }
        result.epochs.push_back(std::move(record));
    }
    return result;
}

template class AdamW<float>;
template class AdamW<double>;

template TrainResult<float> train<float>(const std::vector<CpoExample>&, const std::vector<ProbeRecord>&,
                                         const ModelParams<float>&, const TrainConfig&, const TrainOptions&,
                                         const TrainHooks&);
template TrainResult<double> train<double>(const std::vector<CpoExample>&, const std::vector<ProbeRecord>&,
                                           const ModelParams<double>&, const TrainConfig&, const TrainOptions&,
                                           const TrainHooks&);

} // namespace cpolab
