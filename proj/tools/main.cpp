#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "loraedge/harness.hpp"
#include "loraedge/io.hpp"
#include "loraedge/peft.hpp"

using namespace loraedge;

namespace {

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << text;
    if (!out) throw IoError("write failed: " + path);
}

data::WindowDataset load_shifted(const std::string& dir, const std::string& shift) {
    data::WindowDataset d = io::load_dataset(dir);
    const auto [spec, active] = data::parse_shift_spec(shift);
    if (active) d = data::apply_shift(d, spec);
    return d;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"TT-decomposed convolution adapters: data, training, merge, reports"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic windowed dataset");
    std::int64_t classes = 4, channels = 3, length = 64, per_class = 50;
    std::uint64_t gen_seed = 1;
    std::string gen_out, gen_shift = "none";
    gen->add_option("--classes", classes, "number of classes")->capture_default_str();
    gen->add_option("--channels", channels, "channels per window")->capture_default_str();
    gen->add_option("--length", length, "samples per window")->capture_default_str();
    gen->add_option("--per-class", per_class, "windows per class")->capture_default_str();
    gen->add_option("--seed", gen_seed, "dataset seed")->capture_default_str();
    gen->add_option("--shift", gen_shift, "shift applied before writing (e.g. rotation,angle=30,seed=7)")
        ->capture_default_str();
    gen->add_option("--out", gen_out, "output dataset directory")->required();

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "train a backbone from scratch on a dataset");
    std::string pre_data, pre_backbone = "tresnet-toy", pre_out;
    std::int64_t pre_steps = 200, pre_batch = 64;
    double pre_lr = 0.01;
    std::uint64_t pre_seed = 0;
    pre->add_option("--data", pre_data, "dataset directory")->required();
    pre->add_option("--backbone", pre_backbone, "tresnet-toy | mobilenet-toy | calanet-toy")
        ->capture_default_str();
    pre->add_option("--steps", pre_steps, "optimizer steps")->capture_default_str();
    pre->add_option("--lr", pre_lr, "learning rate")->capture_default_str();
    pre->add_option("--batch", pre_batch, "batch size")->capture_default_str();
    pre->add_option("--seed", pre_seed, "training seed")->capture_default_str();
    pre->add_option("--out", pre_out, "output model bundle directory")->required();

    // finetune
    auto* fin = app.add_subcommand("finetune", "adapt a pretrained bundle to a target dataset");
    std::string fin_model, fin_data, fin_shift = "none", fin_method = "lora-edge";
    std::string fin_out, fin_report;
    harness::ExperimentConfig fin_cfg;
    std::vector<int> fin_cores{1};
    bool fin_zero_set = false, fin_no_zero = false;
    double fin_lr = -1.0;
    fin->add_option("--model", fin_model, "pretrained bundle directory")->required();
    fin->add_option("--data", fin_data, "target dataset directory")->required();
    fin->add_option("--shift", fin_shift, "shift spec applied to the data before the split")
        ->capture_default_str();
    fin->add_option("--method", fin_method, "lora-edge | lora-c | lora-linear | bias | bn | full")
        ->capture_default_str();
    fin->add_option("--rank", fin_cfg.rank, "adapter rank / TT target rank")->capture_default_str();
    fin->add_option("--cores", fin_cores, "trainable TT cores, 1-based")->capture_default_str();
    fin->add_flag("--zero-init-core1", fin_zero_set, "force core-1 zero init");
    fin->add_flag("--no-zero-init-core1", fin_no_zero, "keep the TT-SVD value in core 1");
    fin->add_flag("--train-head", fin_cfg.train_head, "also unfreeze the classifier head");
    fin->add_option("--sigma2", fin_cfg.sigma2, "lora-c / lora-linear init variance")
        ->capture_default_str();
    fin->add_option("--steps", fin_cfg.steps, "optimizer steps")->capture_default_str();
    fin->add_option("--batch", fin_cfg.batch, "batch size")->capture_default_str();
    fin->add_option("--lr", fin_lr, "learning rate (default 0.01, full fine-tuning 0.001)");
    fin->add_option("--eval-interval", fin_cfg.eval_interval, "steps between held-out evals")
        ->capture_default_str();
    fin->add_option("--seed", fin_cfg.seed, "run seed")->capture_default_str();
    fin->add_option("--out", fin_out, "bundle directory for the adapted model");
    fin->add_option("--report", fin_report, "CSV path for the step/loss/F1 trace");

    // merge
    auto* mrg = app.add_subcommand("merge", "fold adapters into the base weights");
    std::string mrg_model, mrg_out;
    mrg->add_option("--model", mrg_model, "adapted bundle directory")->required();
    mrg->add_option("--out", mrg_out, "bundle directory for the merged model")->required();

    // eval
    auto* ev = app.add_subcommand("eval", "macro-F1 + confusion matrix on a dataset");
    std::string ev_model, ev_data, ev_report, ev_shift = "none";
    ev->add_option("--model", ev_model, "bundle directory")->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--shift", ev_shift, "shift spec applied before evaluation")
        ->capture_default_str();
    ev->add_option("--report", ev_report, "CSV path (stdout otherwise)");

    // paramcount
    auto* par = app.add_subcommand("paramcount", "trainable-parameter report for a bundle");
    std::string par_model;
    par->add_option("--model", par_model, "bundle directory")->required();

    // ablate-cores / init-sweep
    auto* abl = app.add_subcommand("ablate-cores", "six-arm core-selection ablation");
    std::string abl_config, abl_out;
    abl->add_option("--config", abl_config, "JSON config file")->required();
    abl->add_option("--out", abl_out, "CSV path (stdout otherwise)");

    auto* swp = app.add_subcommand("init-sweep", "TT-SVD vs random init over an (lr, sigma2) grid");
    std::string swp_config, swp_out;
    swp->add_option("--config", swp_config, "JSON config file")->required();
    swp->add_option("--out", swp_out, "CSV path (stdout otherwise)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            data::WindowDataset d = data::gen_synthetic(classes, channels, length, per_class, gen_seed);
            const auto [spec, active] = data::parse_shift_spec(gen_shift);
            if (active) d = data::apply_shift(d, spec);
            io::save_dataset(d, gen_out);
            std::printf("wrote %lld windows (%lld classes) to %s\n", (long long)d.size(),
                        (long long)d.class_count, gen_out.c_str());
        } else if (pre->parsed()) {
            data::WindowDataset d = io::load_dataset(pre_data);
            nn::Model m = nn::build_backbone(pre_backbone, d.channels(), d.length(), d.class_count,
                                             pre_seed);
            const double f1 = harness::pretrain(m, d, pre_steps, pre_lr, pre_seed, pre_batch);
            io::save_model(m, pre_out);
            std::printf("pretrained %s for %lld steps, held-out macro-F1 %s; bundle at %s\n",
                        pre_backbone.c_str(), (long long)pre_steps,
                        harness::format_sig6(f1).c_str(), pre_out.c_str());
        } else if (fin->parsed()) {
            nn::Model m = io::load_model(fin_model);
            data::WindowDataset d = load_shifted(fin_data, fin_shift);
            fin_cfg.method = harness::method_from_name(fin_method);
            fin_cfg.trainable_cores = fin_cores;
            if (fin_zero_set && fin_no_zero)
                throw IoError("--zero-init-core1 conflicts with --no-zero-init-core1");
            if (fin_zero_set) fin_cfg.zero_init_core1 = true;
            if (fin_no_zero) fin_cfg.zero_init_core1 = false;
            if (fin_lr >= 0.0) fin_cfg.lr = fin_lr;
            harness::prepare_method(m, fin_cfg);
            const harness::RunResult r = harness::finetune(m, d, fin_cfg);
            std::printf("%s: zero-shot %s -> final %s after %lld steps (%lld trainable, %s%% of full)\n",
                        fin_method.c_str(), harness::format_sig6(r.zero_shot_f1).c_str(),
                        harness::format_sig6(r.final_f1).c_str(), (long long)fin_cfg.steps,
                        (long long)r.params.trainable_total,
                        harness::format_sig6(r.params.percent).c_str());
            if (!fin_out.empty()) io::save_model(m, fin_out);
            if (!fin_report.empty()) write_text(fin_report, harness::run_csv(r));
        } else if (mrg->parsed()) {
            nn::Model m = io::load_model(mrg_model);
            peft::merge_adapters(m);
            io::save_model(m, mrg_out);
            std::printf("merged bundle at %s\n", mrg_out.c_str());
        } else if (ev->parsed()) {
            nn::Model m = io::load_model(ev_model);
            data::WindowDataset d = load_shifted(ev_data, ev_shift);
            const harness::EvalResult r = harness::evaluate(m, d);
            const std::string csv = harness::eval_csv(r);
            if (ev_report.empty())
                std::fputs(csv.c_str(), stdout);
            else
                write_text(ev_report, csv);
            std::printf("macro-F1 %s on %lld windows\n", harness::format_sig6(r.f1).c_str(),
                        (long long)d.size());
        } else if (par->parsed()) {
            nn::Model m = io::load_model(par_model);
            std::fputs(peft::format_param_report(peft::param_report(m)).c_str(), stdout);
        } else if (abl->parsed()) {
            const harness::AblationResult r =
                harness::run_ablation_cores(harness::load_ablation_config(abl_config));
            const std::string csv = harness::ablation_csv(r);
            if (abl_out.empty())
                std::fputs(csv.c_str(), stdout);
            else
                write_text(abl_out, csv);
        } else if (swp->parsed()) {
            const harness::SweepResult r =
                harness::run_init_sweep(harness::load_sweep_config(swp_config));
            const std::string csv = harness::sweep_csv(r);
            if (swp_out.empty())
                std::fputs(csv.c_str(), stdout);
            else
                write_text(swp_out, csv);
            std::fprintf(stderr, "mean delta_f1: %s\n", harness::format_sig6(r.mean_delta).c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
