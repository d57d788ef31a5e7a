#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "loraedge/tensor.hpp"

namespace loraedge::nn {

enum class LayerKind {
    Conv1D,
    Conv2D,
    BatchNorm,
    ReLU,
    MaxPool,
    GlobalAvgPool,
    Dense,
    Flatten,
    SkipSave,
    SkipAdd,
};

std::string layer_kind_name(LayerKind k);
LayerKind layer_kind_from_name(const std::string& name);

struct LayerSpec {
    LayerKind kind = LayerKind::ReLU;
    std::int64_t c_in = 0, c_out = 0;               // conv
    std::int64_t kernel = 0, stride = 1, padding = 0;
    std::int64_t channels = 0;                      // batchnorm
    std::int64_t pool = 0;                          // maxpool window == stride
    std::int64_t in = 0, out = 0;                   // dense
    bool bias = true;                               // conv / dense

    static LayerSpec conv1d(std::int64_t c_in, std::int64_t c_out, std::int64_t kernel,
                            std::int64_t stride = 1, std::int64_t padding = 0, bool bias = true);
    static LayerSpec conv2d(std::int64_t c_in, std::int64_t c_out, std::int64_t kernel,
                            std::int64_t stride = 1, std::int64_t padding = 0, bool bias = true);
    static LayerSpec batchnorm(std::int64_t channels);
    static LayerSpec relu();
    static LayerSpec maxpool(std::int64_t pool);
    static LayerSpec global_avg_pool();
    static LayerSpec dense(std::int64_t in, std::int64_t out, bool bias = true);
    static LayerSpec flatten();
    static LayerSpec skip_save();
    static LayerSpec skip_add();
};

/// Address of one parameter tensor: (layer index, slot name). Slot names:
/// "weight", "bias", "bn-gamma", "bn-beta", "bn-running-mean", "bn-running-var",
/// "tt-core-N", "tt-core-1-init", "lora-a", "lora-b".
struct SlotKey {
    std::int64_t layer = 0;
    std::string name;

    bool operator<(const SlotKey& o) const {
        return layer != o.layer ? layer < o.layer : name < o.name;
    }
    bool operator==(const SlotKey& o) const = default;
};

/// True for slots full fine-tuning trains (weights, biases, BN affine);
/// false for running statistics, adapter parameters, and stashed buffers.
bool is_backbone_slot(const std::string& name);

enum class AdapterMethod { LoraEdge, LoraConv, LoraLinear };

std::string adapter_method_name(AdapterMethod m);
AdapterMethod adapter_method_from_name(const std::string& name);

struct Adapter {
    AdapterMethod method = AdapterMethod::LoraEdge;
    std::int64_t layer = 0;
    std::int64_t rank = 0;
    std::vector<int> trainable_cores;   // lora-edge, 1-based core indices
    bool kernel_scaled = false;         // lora-c inner-rank convention r' = k*r
};

struct Model {
    Shape input_shape;                  // per-sample shape, no batch dimension
    std::vector<LayerSpec> layers;
    std::map<SlotKey, Tensor> params;
    std::map<SlotKey, bool> trainable;
    std::vector<Adapter> adapters;
    std::uint64_t structure_version = 0;

    Tensor& param(std::int64_t layer, const std::string& name);
    const Tensor& param(std::int64_t layer, const std::string& name) const;
    bool has_slot(std::int64_t layer, const std::string& name) const;
    void add_slot(std::int64_t layer, const std::string& name, Tensor value, bool trainable_flag);
    void drop_slot(std::int64_t layer, const std::string& name);
    const Adapter* adapter_for_layer(std::int64_t layer) const;

    std::int64_t trainable_count() const;
    std::int64_t backbone_param_count() const;  // full fine-tuning denominator
    void freeze_all();
    void set_full_ft_mask();
    void bump_structure() { ++structure_version; }
};

enum class Mode { Train, Eval };

struct LayerCache {
    Tensor input;
    Tensor bn_xhat;
    std::vector<double> bn_mean, bn_inv_std;
    std::vector<std::int64_t> pool_argmax; // flat input index per output element
    Tensor adapter_delta;                  // reconstructed auxiliary weight
};

struct ForwardCache {
    Mode mode = Mode::Eval;
    std::uint64_t structure_version = 0;
    std::vector<LayerCache> layers;
};

using GradMap = std::map<SlotKey, Tensor>;

/// Per-sample output shape of one layer; throws ShapeError on a chain violation.
Shape layer_output_shape(const LayerSpec& spec, const Shape& in);

/// Per-sample output shapes of every layer; validates the whole chain,
/// including skip-stack discipline and a 1-way final (logit) shape.
std::vector<Shape> infer_shapes(const std::vector<LayerSpec>& layers, const Shape& input_shape);

/// He-initialized model; full fine-tuning mask by default.
Model build_model(std::vector<LayerSpec> layers, Shape input_shape, std::uint64_t seed);

/// Train mode uses batch statistics and updates BN running stats (momentum 0.1);
/// eval mode reads running stats and never mutates the model.
std::pair<Tensor, ForwardCache> forward(Model& m, const Tensor& x, Mode mode);

/// Eval-mode logits without a cache; never mutates.
Tensor predict(const Model& m, const Tensor& x);

/// Gradients for exactly the trainable slots; frozen slots get none.
GradMap backward(const Model& m, const ForwardCache& cache, const Tensor& grad_logits);

struct LossResult {
    double loss = 0.0;
    Tensor grad_logits;
};

/// Mean multiclass cross-entropy; grad_logits = (softmax - onehot) / batch.
LossResult softmax_cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels);

struct AdamState {
    std::map<SlotKey, Tensor> m, v;
    std::int64_t t = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

/// Standard Adam with bias correction. grads must cover exactly the trainable
/// slots: a gradient for a frozen slot, or a missing one, is an error.
void adam_step(Model& model, const GradMap& grads, AdamState& state, double lr);

/// Fixture backbones over [channels, length] windows. 2D variants fold the
/// window to [channels, s, s] with s = sqrt(length).
///   calanet-toy: three conv1d blocks (BN widths 8/16/32)
///   tresnet-toy: stem + two residual conv2d blocks
///   mobilenet-toy: two separable-style blocks (3x3 then 1x1 conv2d)
Model build_backbone(const std::string& name, std::int64_t channels, std::int64_t length,
                     std::int64_t classes, std::uint64_t seed);
std::vector<std::string> backbone_names();

/// Per-sample multiply-accumulate count of conv/dense layers (adapters excluded).
std::int64_t analytic_flops(const Model& m);

} // namespace loraedge::nn
