#include "loraedge/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "loraedge/errors.hpp"
#include "loraedge/rng.hpp"

namespace loraedge::harness {

using nn::Mode;
using nn::Model;

double macro_f1(const ConfusionMatrix& confusion) {
    const std::size_t n = confusion.size();
    if (n == 0) throw ShapeError("confusion matrix must be non-empty");
    for (const auto& row : confusion) {
        if (row.size() != n) throw ShapeError("confusion matrix must be square");
        for (auto v : row)
            if (v < 0) throw ShapeError("confusion matrix entries must be non-negative");
    }
    double sum = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
        std::int64_t tp = confusion[c][c], fn = 0, fp = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (j != c) {
                fn += confusion[c][j];
                fp += confusion[j][c];
            }
        }
        const std::int64_t denom = 2 * tp + fp + fn;
        if (denom > 0) sum += 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
        // zero support and zero predictions: contributes 0
    }
    return sum / static_cast<double>(n);
}

std::string method_name(Method m) {
    switch (m) {
    case Method::LoraEdge: return "lora-edge";
    case Method::LoraC: return "lora-c";
    case Method::LoraLinear: return "lora-linear";
    case Method::Bias: return "bias";
    case Method::Bn: return "bn";
    case Method::Full: return "full";
    }
    throw StateError("method_name: unknown method");
}

Method method_from_name(const std::string& name) {
    for (Method m : {Method::LoraEdge, Method::LoraC, Method::LoraLinear, Method::Bias,
                     Method::Bn, Method::Full})
        if (method_name(m) == name) return m;
    throw IoError("unknown method: " + name);
}

double effective_lr(const ExperimentConfig& cfg) {
    if (cfg.lr) return *cfg.lr;
    return cfg.method == Method::Full ? 0.001 : 0.01;
}

namespace {

// rows of a [N, C, L] dataset, reshaped to the model's per-sample input
Tensor assemble_batch(const data::WindowDataset& d, const std::vector<std::int64_t>& rows,
                      const Shape& input_shape) {
    std::int64_t per_sample = 1;
    for (auto e : input_shape) per_sample *= e;
    if (input_shape.empty() || input_shape[0] != d.channels() ||
        per_sample != d.channels() * d.length())
        throw ShapeError("dataset windows do not fit the model input shape");
    Shape shape = input_shape;
    shape.insert(shape.begin(), static_cast<std::int64_t>(rows.size()));
    Tensor x(shape);
    const std::int64_t stride = d.channels() * d.length();
    for (std::size_t b = 0; b < rows.size(); ++b) {
        const std::int64_t row = rows[b];
        if (row < 0 || row >= d.size()) throw ShapeError("batch row out of range");
        for (std::int64_t i = 0; i < stride; ++i)
            x[static_cast<std::int64_t>(b) * stride + i] = d.windows[row * stride + i];
    }
    return x;
}

std::vector<std::int64_t> labels_for(const data::WindowDataset& d,
                                     const std::vector<std::int64_t>& rows) {
    std::vector<std::int64_t> out(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i)
        out[i] = d.labels[static_cast<std::size_t>(rows[i])];
    return out;
}

void verify_prepared(const Model& m, const ExperimentConfig& cfg) {
    const auto adapter_method = [&]() -> std::optional<nn::AdapterMethod> {
        switch (cfg.method) {
        case Method::LoraEdge: return nn::AdapterMethod::LoraEdge;
        case Method::LoraC: return nn::AdapterMethod::LoraConv;
        case Method::LoraLinear: return nn::AdapterMethod::LoraLinear;
        default: return std::nullopt;
        }
    }();
    const std::string want = method_name(cfg.method);
    if (adapter_method) {
        if (m.adapters.empty())
            throw StateError("method " + want + " is not attached; call prepare_method first");
        for (const auto& a : m.adapters)
            if (a.method != *adapter_method)
                throw StateError("model is prepared for " + nn::adapter_method_name(a.method) +
                                 ", not " + want);
        return;
    }
    if (!m.adapters.empty())
        throw StateError("model carries adapters but the configured method is " + want);
    if (m.trainable_count() == 0)
        throw StateError("method " + want + " is not prepared: nothing is trainable");
    for (const auto& [key, flag] : m.trainable) {
        if (!flag) continue;
        const bool ok = cfg.method == Method::Full
                            ? nn::is_backbone_slot(key.name)
                            : (cfg.method == Method::Bias
                                   ? key.name == "bias"
                                   : key.name == "bn-gamma" || key.name == "bn-beta");
        if (!ok)
            throw StateError("trainable slot " + key.name + " does not match method " + want);
    }
    if (cfg.method == Method::Full && m.trainable_count() != m.backbone_param_count())
        throw StateError("full fine-tuning expects every backbone slot trainable");
}

ConfusionMatrix blank_confusion(std::int64_t classes) {
    return ConfusionMatrix(static_cast<std::size_t>(classes),
                           std::vector<std::int64_t>(static_cast<std::size_t>(classes), 0));
}

} // namespace

EvalResult evaluate(const Model& m, const data::WindowDataset& d, std::int64_t batch) {
    d.validate();
    if (batch < 1) throw ShapeError("evaluate needs batch >= 1");
    EvalResult result;
    result.confusion = blank_confusion(d.class_count);
    for (std::int64_t start = 0; start < d.size(); start += batch) {
        const std::int64_t stop = std::min(d.size(), start + batch);
        std::vector<std::int64_t> rows(static_cast<std::size_t>(stop - start));
        for (std::int64_t i = start; i < stop; ++i) rows[static_cast<std::size_t>(i - start)] = i;
        const Tensor logits = nn::predict(m, assemble_batch(d, rows, m.input_shape));
        for (std::int64_t b = 0; b < stop - start; ++b) {
            std::int64_t best = 0;
            for (std::int64_t c = 1; c < logits.extent(1); ++c)
                if (logits.at(b, c) > logits.at(b, best)) best = c;
            const auto truth = static_cast<std::size_t>(d.labels[static_cast<std::size_t>(start + b)]);
            ++result.confusion[truth][static_cast<std::size_t>(best)];
        }
    }
    result.f1 = macro_f1(result.confusion);
    return result;
}

void prepare_method(Model& m, const ExperimentConfig& cfg) {
    switch (cfg.method) {
    case Method::LoraEdge:
        peft::attach_lora_edge(m, {cfg.rank, cfg.trainable_cores, cfg.zero_init_core1,
                                   cfg.train_head});
        return;
    case Method::LoraC:
        peft::attach_lora_c(m, {cfg.rank, cfg.sigma2, /*kernel_scaled=*/false, cfg.seed,
                                cfg.train_head});
        return;
    case Method::LoraLinear:
        peft::attach_lora_linear(m, {cfg.rank, cfg.sigma2, cfg.seed});
        return;
    case Method::Bias: peft::apply_bias_tuning(m); return;
    case Method::Bn: peft::apply_bn_tuning(m); return;
    case Method::Full: m.set_full_ft_mask(); return;
    }
    throw StateError("prepare_method: unknown method");
}

double pretrain(Model& m, const data::WindowDataset& source, std::int64_t steps, double lr,
                std::uint64_t seed, std::int64_t batch, double train_fraction) {
    if (steps < 0 || batch < 1) throw ShapeError("pretrain needs steps >= 0 and batch >= 1");
    const data::SplitResult split = data::split_dataset(source, train_fraction);
    m.set_full_ft_mask();
    Rng rng(seed);
    nn::AdamState opt;
    for (std::int64_t step = 0; step < steps; ++step) {
        std::vector<std::int64_t> rows(static_cast<std::size_t>(batch));
        for (auto& r : rows)
            r = static_cast<std::int64_t>(rng.bounded(static_cast<std::uint64_t>(split.train.size())));
        auto [logits, cache] = nn::forward(m, assemble_batch(split.train, rows, m.input_shape),
                                           Mode::Train);
        const nn::LossResult loss =
            nn::softmax_cross_entropy(logits, labels_for(split.train, rows));
        nn::adam_step(m, nn::backward(m, cache, loss.grad_logits), opt, lr);
    }
    return evaluate(m, split.test, batch).f1;
}

RunResult finetune(Model& m, const data::WindowDataset& target, const ExperimentConfig& cfg) {
    target.validate();
    verify_prepared(m, cfg);
    if (cfg.steps < 0 || cfg.batch < 1 || cfg.eval_interval < 1)
        throw ShapeError("finetune needs steps >= 0, batch >= 1, eval_interval >= 1");
    const data::SplitResult split = data::split_dataset(target, cfg.train_fraction);
    const Mode mode = cfg.method == Method::Full ? Mode::Train : Mode::Eval;
    const double lr = effective_lr(cfg);
    const auto t0 = std::chrono::steady_clock::now();

    RunResult result;
    result.curve.push_back({0, evaluate(m, split.test, cfg.batch).f1});
    Rng rng(cfg.seed);
    nn::AdamState opt;
    for (std::int64_t step = 1; step <= cfg.steps; ++step) {
        std::vector<std::int64_t> rows(static_cast<std::size_t>(cfg.batch));
        for (auto& r : rows)
            r = static_cast<std::int64_t>(rng.bounded(static_cast<std::uint64_t>(split.train.size())));
        auto [logits, cache] =
            nn::forward(m, assemble_batch(split.train, rows, m.input_shape), mode);
        const nn::LossResult loss =
            nn::softmax_cross_entropy(logits, labels_for(split.train, rows));
        nn::adam_step(m, nn::backward(m, cache, loss.grad_logits), opt, lr);
        result.loss.push_back(loss.loss);
        if (step % cfg.eval_interval == 0 || step == cfg.steps)
            result.curve.push_back({step, evaluate(m, split.test, cfg.batch).f1});
    }
    const EvalResult last = evaluate(m, split.test, cfg.batch);
    result.confusion = last.confusion;
    result.zero_shot_f1 = result.curve.front().f1;
    result.final_f1 = result.curve.back().f1;
    result.params = peft::param_report(m);
    result.train_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

std::optional<std::int64_t> steps_to_threshold(const RunResult& r, double target_f1) {
    for (const auto& p : r.curve)
        if (p.f1 >= target_f1) return p.step;
    return std::nullopt;
}

Fixture make_fixture(const FixtureConfig& cfg) {
    Fixture f{nn::build_backbone(cfg.backbone, cfg.channels, cfg.length, cfg.classes,
                                 cfg.pretrain_seed),
              data::gen_synthetic(cfg.classes, cfg.channels, cfg.length, cfg.per_class,
                                  cfg.source_seed),
              data::gen_synthetic(cfg.classes, cfg.channels, cfg.length, cfg.per_class,
                                  cfg.target_seed),
              0.0, 0.0};
    const auto [shift, active] = data::parse_shift_spec(cfg.shift);
    if (active) f.target = data::apply_shift(f.target, shift);
    f.source_f1 = pretrain(f.model, f.source, cfg.pretrain_steps, cfg.pretrain_lr,
                           cfg.pretrain_seed, cfg.batch);
    f.zero_shot_f1 = evaluate(f.model, data::split_dataset(f.target, 0.8).test, cfg.batch).f1;
    return f;
}

AblationResult run_ablation_cores(const AblationConfig& cfg) {
    const Fixture fixture = make_fixture(cfg.fixture);
    struct ArmSpec {
        const char* name;
        std::vector<int> cores;
        std::optional<bool> zero;
    };
    const std::vector<ArmSpec> specs{
        {"g1-only", {1}, std::nullopt},         // standard recipe: zero init
        {"g2-only", {2}, std::nullopt},         // TT-SVD values stay in place
        {"g3-only", {3}, std::nullopt},
        {"g4-only", {4}, std::nullopt},
        {"all", {1, 2, 3, 4}, false},           // every core trains from TT-SVD init
        {"all-zero-g1", {1, 2, 3, 4}, true},    // every core trains, core 1 zeroed
    };
    AblationResult result;
    for (const auto& spec : specs) {
        ExperimentConfig run = cfg.run;
        run.method = Method::LoraEdge;
        run.trainable_cores = spec.cores;
        run.zero_init_core1 = spec.zero;
        Model arm_model = fixture.model;
        prepare_method(arm_model, run);
        AblationArm arm{spec.name, arm_model.trainable_count(), {}};
        arm.run = finetune(arm_model, fixture.target, run);
        result.arms.push_back(std::move(arm));
    }
    return result;
}

SweepResult run_init_sweep(const SweepConfig& cfg) {
    if (cfg.lrs.empty() || cfg.sigma2s.empty() || cfg.seeds.empty())
        throw ShapeError("init sweep needs non-empty lr, sigma2 and seed grids");
    const Fixture fixture = make_fixture(cfg.fixture);
    SweepResult result;
    for (double lr : cfg.lrs) {
        // the TT arm does not depend on sigma2: one run per (lr, seed)
        std::vector<double> tt_f1(cfg.seeds.size());
        for (std::size_t si = 0; si < cfg.seeds.size(); ++si) {
            ExperimentConfig run = cfg.run;
            run.method = Method::LoraEdge;
            run.lr = lr;
            run.seed = cfg.seeds[si];
            Model m = fixture.model;
            prepare_method(m, run);
            tt_f1[si] = finetune(m, fixture.target, run).final_f1;
        }
        for (double sigma2 : cfg.sigma2s) {
            SweepCell cell{lr, sigma2, 0.0, 0.0, 0.0};
            for (std::size_t si = 0; si < cfg.seeds.size(); ++si) {
                ExperimentConfig run = cfg.run;
                run.method = Method::LoraEdge;
                run.lr = lr;
                run.seed = cfg.seeds[si];
                Model m = fixture.model;
                prepare_method(m, run);
                peft::randomize_frozen_cores(m, sigma2, cfg.seeds[si] * 1315423911ull + 101);
                cell.f1_tt += tt_f1[si];
                cell.f1_rand += finetune(m, fixture.target, run).final_f1;
            }
            const auto n = static_cast<double>(cfg.seeds.size());
            cell.f1_tt /= n;
            cell.f1_rand /= n;
            cell.delta = cell.f1_tt - cell.f1_rand;
            result.mean_delta += cell.delta;
            result.cells.push_back(cell);
        }
    }
    result.mean_delta /= static_cast<double>(result.cells.size());
    return result;
}

std::string format_sig6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

std::string run_csv(const RunResult& r) {
    std::ostringstream out;
    out << "step,loss,macro_f1\n";
    std::size_t next_eval = 0;
    for (std::int64_t step = 0; step <= static_cast<std::int64_t>(r.loss.size()); ++step) {
        out << step << ',';
        if (step > 0) out << format_sig6(r.loss[static_cast<std::size_t>(step - 1)]);
        out << ',';
        if (next_eval < r.curve.size() && r.curve[next_eval].step == step) {
            out << format_sig6(r.curve[next_eval].f1);
            ++next_eval;
        }
        out << '\n';
    }
    return out.str();
}

std::string eval_csv(const EvalResult& r) {
    std::ostringstream out;
    out << "macro_f1," << format_sig6(r.f1) << '\n';
    out << "truth\\pred";
    for (std::size_t c = 0; c < r.confusion.size(); ++c) out << ',' << c;
    out << '\n';
    for (std::size_t t = 0; t < r.confusion.size(); ++t) {
        out << t;
        for (std::size_t c = 0; c < r.confusion.size(); ++c) out << ',' << r.confusion[t][c];
        out << '\n';
    }
    return out.str();
}

std::string ablation_csv(const AblationResult& r) {
    std::ostringstream out;
    out << "arm,trainable,step,macro_f1\n";
    for (const auto& arm : r.arms)
        for (const auto& p : arm.run.curve)
            out << arm.name << ',' << arm.trainable << ',' << p.step << ','
                << format_sig6(p.f1) << '\n';
    return out.str();
}

std::string sweep_csv(const SweepResult& r) {
    std::ostringstream out;
    out << "lr,sigma2,f1_tt,f1_rand,delta_f1\n";
    for (const auto& c : r.cells)
        out << format_sig6(c.lr) << ',' << format_sig6(c.sigma2) << ',' << format_sig6(c.f1_tt)
            << ',' << format_sig6(c.f1_rand) << ',' << format_sig6(c.delta) << '\n';
    return out.str();
}

namespace {

nlohmann::json load_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config: " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError("malformed JSON in " + path + ": " + e.what());
    }
}

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("config field '") + key + "' has wrong type: " + e.what());
    }
}

FixtureConfig fixture_from_json(const nlohmann::json& j) {
    FixtureConfig f;
    maybe(j, "backbone", f.backbone);
    maybe(j, "classes", f.classes);
    maybe(j, "channels", f.channels);
    maybe(j, "length", f.length);
    maybe(j, "per_class", f.per_class);
    maybe(j, "source_seed", f.source_seed);
    maybe(j, "target_seed", f.target_seed);
    maybe(j, "shift", f.shift);
    maybe(j, "pretrain_steps", f.pretrain_steps);
    maybe(j, "pretrain_lr", f.pretrain_lr);
    maybe(j, "pretrain_seed", f.pretrain_seed);
    maybe(j, "batch", f.batch);
    return f;
}

ExperimentConfig run_from_json(const nlohmann::json& j) {
    ExperimentConfig cfg;
    if (j.contains("method")) cfg.method = method_from_name(j.at("method").get<std::string>());
    maybe(j, "rank", cfg.rank);
    maybe(j, "sigma2", cfg.sigma2);
    maybe(j, "trainable_cores", cfg.trainable_cores);
    if (j.contains("zero_init_core1")) cfg.zero_init_core1 = j.at("zero_init_core1").get<bool>();
    maybe(j, "train_head", cfg.train_head);
    maybe(j, "steps", cfg.steps);
    maybe(j, "batch", cfg.batch);
    if (j.contains("lr")) cfg.lr = j.at("lr").get<double>();
    maybe(j, "eval_interval", cfg.eval_interval);
    maybe(j, "train_fraction", cfg.train_fraction);
    maybe(j, "seed", cfg.seed);
    return cfg;
}

} // namespace

AblationConfig load_ablation_config(const std::string& path) {
    const nlohmann::json j = load_json_file(path);
    AblationConfig cfg;
    if (j.contains("fixture")) cfg.fixture = fixture_from_json(j.at("fixture"));
    if (j.contains("run")) cfg.run = run_from_json(j.at("run"));
    return cfg;
}

SweepConfig load_sweep_config(const std::string& path) {
    const nlohmann::json j = load_json_file(path);
    SweepConfig cfg;
    if (j.contains("fixture")) cfg.fixture = fixture_from_json(j.at("fixture"));
    if (j.contains("run")) cfg.run = run_from_json(j.at("run"));
    maybe(j, "lrs", cfg.lrs);
    maybe(j, "sigma2s", cfg.sigma2s);
    maybe(j, "seeds", cfg.seeds);
    return cfg;
}

} // namespace loraedge::harness
