#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "loraedge/nn.hpp"

namespace loraedge::peft {

struct LoraEdgeOptions {
    std::int64_t r_target = 2;
    std::vector<int> trainable_cores{1};   // 1-based core indices
    // Default: zero core 1 exactly when it is the only trainable core (the
    // standard recipe). Ablation arms that train other cores keep the TT-SVD
    // values unless this is forced.
    std::optional<bool> zero_init_core1;
    bool train_head = false;
};

struct LoraCOptions {
    std::int64_t rank = 1;
    double sigma2 = 1e-3;        // variance of A's Gaussian init
    // Inner-rank convention: false keeps r' = r (trainables r*k*(C_out+C_in));
    // true scales r' = k*r (trainables r*k^2*(C_out+C_in)).
    bool kernel_scaled = false;
    std::uint64_t seed = 0;
    bool train_head = false;
};

struct LoraLinearOptions {
    std::int64_t rank = 1;
    double sigma2 = 1e-3;
    std::uint64_t seed = 0;
};

/// TT-SVD every conv weight at r_target, attach the cores as a parallel path,
/// zero core 1 (see options), freeze everything but the selected cores.
void attach_lora_edge(nn::Model& m, const LoraEdgeOptions& opts = {});

/// Low-rank A/B factors over the flattened conv2d weight matrix. Rejects
/// models containing conv1d layers.
void attach_lora_c(nn::Model& m, const LoraCOptions& opts = {});

/// Classic matrix LoRA on every dense layer.
void attach_lora_linear(nn::Model& m, const LoraLinearOptions& opts = {});

/// Mask-only baselines.
void apply_bias_tuning(nn::Model& m);
void apply_bn_tuning(nn::Model& m);

/// Fold every adapter into its host weight, drop adapter slots and records,
/// restore the full fine-tuning mask. Errors when there is nothing to merge.
void merge_adapters(nn::Model& m);

/// Reconstructed auxiliary weight of the adapter on `layer`.
Tensor adapter_delta(const nn::Model& m, std::int64_t layer);

/// Two-path output of one adapted conv layer (host + auxiliary), outside any
/// model forward. For tests and demos.
Tensor lora_edge_layer_forward(const nn::Model& m, std::int64_t layer, const Tensor& x);

/// Gradient of sum(grad_out (.) layer_forward) w.r.t. the given core (1-based).
Tensor lora_edge_grad_core(const nn::Model& m, std::int64_t layer, const Tensor& x,
                           const Tensor& grad_out, int core_index);

/// Put the stashed TT-SVD value back into core 1 (undo the zero-init).
void restore_core1_init(nn::Model& m);

/// Init-sweep arm: cores 2..d ~ N(0, sigma2), core 1 zero.
void randomize_frozen_cores(nn::Model& m, double sigma2, std::uint64_t seed);

struct ParamReportRow {
    std::int64_t layer = 0;
    std::string kind;
    std::int64_t trainable = 0;
    std::int64_t backbone = 0;
};

struct ParamReport {
    std::vector<ParamReportRow> rows;
    std::int64_t trainable_total = 0;
    std::int64_t full_ft_total = 0;
    double percent = 0.0; // 100 * trainable / full-FT
};

ParamReport param_report(const nn::Model& m);

/// Human-readable table; percentages printed at 4 significant digits.
std::string format_param_report(const ParamReport& r);

} // namespace loraedge::peft
