#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "loraedge/data.hpp"
#include "loraedge/nn.hpp"
#include "loraedge/peft.hpp"

namespace loraedge::harness {

/// confusion[truth][pred]
using ConfusionMatrix = std::vector<std::vector<std::int64_t>>;

/// Unweighted mean of per-class F1. A class with no true and no predicted
/// positives contributes 0.
double macro_f1(const ConfusionMatrix& confusion);

enum class Method { LoraEdge, LoraC, LoraLinear, Bias, Bn, Full };

std::string method_name(Method m);
Method method_from_name(const std::string& name);

struct ExperimentConfig {
    Method method = Method::LoraEdge;
    std::int64_t rank = 2;                 // r_target (lora-edge) or r (lora-c / linear)
    double sigma2 = 1e-3;                  // lora-c / lora-linear init variance
    std::vector<int> trainable_cores{1};   // lora-edge
    std::optional<bool> zero_init_core1;   // lora-edge; default rule in peft
    bool train_head = false;
    std::int64_t steps = 50;
    std::int64_t batch = 64;
    std::optional<double> lr;              // unset: 0.01 PEFT, 0.001 full fine-tuning
    std::int64_t eval_interval = 1;
    double train_fraction = 0.8;
    std::uint64_t seed = 0;
};

double effective_lr(const ExperimentConfig& cfg);

struct EvalPoint {
    std::int64_t step = 0;
    double f1 = 0.0;
};

struct RunResult {
    std::vector<double> loss;      // one entry per optimizer step
    std::vector<EvalPoint> curve;  // step 0, every eval_interval steps, final step
    ConfusionMatrix confusion;     // final, on the held-out split
    double zero_shot_f1 = 0.0;     // curve.front()
    double final_f1 = 0.0;         // curve.back()
    peft::ParamReport params;
    double train_seconds = 0.0;
};

struct EvalResult {
    double f1 = 0.0;
    ConfusionMatrix confusion;
};

/// Eval-mode metrics over the whole dataset. Batching is a memory knob only.
EvalResult evaluate(const nn::Model& m, const data::WindowDataset& d, std::int64_t batch = 64);

/// Attach / mask the configured method on a plain backbone.
void prepare_method(nn::Model& m, const ExperimentConfig& cfg);

/// Full fine-tuning on an internal train/test split of `source` (train mode,
/// i.i.d. batches). Returns final macro-F1 on the held-out side.
double pretrain(nn::Model& m, const data::WindowDataset& source, std::int64_t steps, double lr,
                std::uint64_t seed, std::int64_t batch = 64, double train_fraction = 0.8);

/// The paper protocol at desk scale: split `target`, run cfg.steps Adam steps
/// on the train side, track macro-F1 on the test side. The model must already
/// be prepared for cfg.method. PEFT methods run batchnorm in eval mode so
/// frozen buffers stay bitwise frozen; full fine-tuning runs in train mode.
RunResult finetune(nn::Model& m, const data::WindowDataset& target, const ExperimentConfig& cfg);

/// First evaluated step whose F1 reaches the target; nullopt if none does.
std::optional<std::int64_t> steps_to_threshold(const RunResult& r, double target_f1);

/// Shared experiment fixture: synthetic source, shifted target, pretrained
/// backbone.
struct FixtureConfig {
    std::string backbone = "tresnet-toy";
    std::int64_t classes = 4;
    std::int64_t channels = 3;
    std::int64_t length = 64;
    std::int64_t per_class = 50;
    std::uint64_t source_seed = 1;
    std::uint64_t target_seed = 2;
    std::string shift = "rotation,angle=30,seed=7";
    std::int64_t pretrain_steps = 200;
    double pretrain_lr = 0.01;
    std::uint64_t pretrain_seed = 3;
    std::int64_t batch = 64;
};

struct Fixture {
    nn::Model model;
    data::WindowDataset source;
    data::WindowDataset target;
    double source_f1 = 0.0;     // pretrain held-out F1
    double zero_shot_f1 = 0.0;  // pretrained model on the target's held-out split
};

Fixture make_fixture(const FixtureConfig& cfg);

/// Core-selection ablation: six arms over the same pretrained model and seed.
struct AblationConfig {
    FixtureConfig fixture;
    ExperimentConfig run;
};

struct AblationArm {
    std::string name;
    std::int64_t trainable = 0;
    RunResult run;
};

struct AblationResult {
    std::vector<AblationArm> arms;
};

AblationResult run_ablation_cores(const AblationConfig& cfg);

/// Init sweep: TT-SVD start vs random frozen cores, ΔF1 over an (lr, σ²) grid
/// averaged across seeds. The TT arm is σ²-independent and shared per (lr, seed).
struct SweepConfig {
    FixtureConfig fixture;
    ExperimentConfig run;
    std::vector<double> lrs{0.005, 0.01};
    std::vector<double> sigma2s{1e-4, 1e-2, 1.0};
    std::vector<std::uint64_t> seeds{0, 1};
};

struct SweepCell {
    double lr = 0.0;
    double sigma2 = 0.0;
    double f1_tt = 0.0;    // seed-averaged
    double f1_rand = 0.0;  // seed-averaged
    double delta = 0.0;    // f1_tt - f1_rand
};

struct SweepResult {
    std::vector<SweepCell> cells;
    double mean_delta = 0.0;
};

SweepResult run_init_sweep(const SweepConfig& cfg);

/// CSV emission: header row, '.' decimal separator, 6 significant digits.
std::string format_sig6(double v);
std::string run_csv(const RunResult& r);             // step,loss,macro_f1
std::string eval_csv(const EvalResult& r);           // macro_f1 + confusion block
std::string ablation_csv(const AblationResult& r);   // arm,trainable,step,macro_f1
std::string sweep_csv(const SweepResult& r);         // lr,sigma2,f1_tt,f1_rand,delta_f1

/// JSON config files mirroring the config structs; missing fields keep defaults.
AblationConfig load_ablation_config(const std::string& path);
SweepConfig load_sweep_config(const std::string& path);

} // namespace loraedge::harness
