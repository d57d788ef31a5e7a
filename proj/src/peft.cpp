#include "loraedge/peft.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "loraedge/rng.hpp"
#include "loraedge/tt.hpp"

namespace loraedge::peft {

namespace {

bool is_conv(nn::LayerKind k) { return k == nn::LayerKind::Conv1D || k == nn::LayerKind::Conv2D; }

std::optional<std::int64_t> head_layer(const nn::Model& m) {
    for (std::size_t i = m.layers.size(); i-- > 0;) {
        if (m.layers[i].kind == nn::LayerKind::Dense) return static_cast<std::int64_t>(i);
    }
    return std::nullopt;
}

void unfreeze_head(nn::Model& m) {
    const auto h = head_layer(m);
    if (!h) return;
    for (const char* name : {"weight", "bias"}) {
        const nn::SlotKey key{*h, name};
        if (m.trainable.count(key)) m.trainable[key] = true;
    }
}

void require_unadapted(const nn::Model& m) {
    if (!m.adapters.empty()) throw StateError("model already has adapters attached");
}

std::int64_t core_count_for(const nn::LayerSpec& spec) {
    return spec.kind == nn::LayerKind::Conv1D ? 3 : 4;
}

} // namespace

void attach_lora_edge(nn::Model& m, const LoraEdgeOptions& opts) {
    require_unadapted(m);
    if (opts.r_target < 1) throw ShapeError("attach_lora_edge: rank must be >= 1");
    if (opts.trainable_cores.empty()) throw ShapeError("attach_lora_edge: empty trainable core set");
    std::vector<int> cores_sorted = opts.trainable_cores;
    std::sort(cores_sorted.begin(), cores_sorted.end());
    if (std::adjacent_find(cores_sorted.begin(), cores_sorted.end()) != cores_sorted.end()) {
        throw ShapeError("attach_lora_edge: duplicate core index");
    }

    std::vector<std::int64_t> conv_layers;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        if (is_conv(m.layers[i].kind)) conv_layers.push_back(static_cast<std::int64_t>(i));
    }
    if (conv_layers.empty()) throw StateError("attach_lora_edge: model has no conv layers");
    for (const auto li : conv_layers) {
        const std::int64_t d = core_count_for(m.layers[static_cast<std::size_t>(li)]);
        for (const int c : cores_sorted) {
            if (c < 1 || c > d) {
                throw ShapeError("attach_lora_edge: core index " + std::to_string(c) +
                                 " out of range for a " + std::to_string(d) + "-core layer");
            }
        }
    }

    const bool zero_core1 =
        opts.zero_init_core1.value_or(cores_sorted == std::vector<int>{1});

    m.freeze_all();
    for (const auto li : conv_layers) {
        const Tensor& w = m.param(li, "weight");
        tt::TTCores cores = tt::tt_svd(w, opts.r_target);
        m.add_slot(li, "tt-core-1-init", cores.cores[0], false);
        if (zero_core1) cores.cores[0].fill(0.0);
        for (std::size_t k = 0; k < cores.count(); ++k) {
            const std::string slot = "tt-core-" + std::to_string(k + 1);
            const bool train =
                std::binary_search(cores_sorted.begin(), cores_sorted.end(), static_cast<int>(k + 1));
            m.add_slot(li, slot, std::move(cores.cores[k]), train);
        }
        nn::Adapter a;
        a.method = nn::AdapterMethod::LoraEdge;
        a.layer = li;
        a.rank = opts.r_target;
        a.trainable_cores = cores_sorted;
        m.adapters.push_back(std::move(a));
    }
    if (opts.train_head) unfreeze_head(m);
    m.bump_structure();
}

void attach_lora_c(nn::Model& m, const LoraCOptions& opts) {
    require_unadapted(m);
    if (opts.rank < 1) throw ShapeError("attach_lora_c: rank must be >= 1");
    std::vector<std::int64_t> conv_layers;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        if (m.layers[i].kind == nn::LayerKind::Conv1D) {
            throw ShapeError("attach_lora_c: conv1d layers are not supported");
        }
        if (m.layers[i].kind == nn::LayerKind::Conv2D) conv_layers.push_back(static_cast<std::int64_t>(i));
    }
    if (conv_layers.empty()) throw StateError("attach_lora_c: model has no conv2d layers");

    Rng rng(opts.seed);
    const double stddev = std::sqrt(opts.sigma2);
    m.freeze_all();
    for (const auto li : conv_layers) {
        const nn::LayerSpec& spec = m.layers[static_cast<std::size_t>(li)];
        const std::int64_t k = spec.kernel;
        const std::int64_t r_inner = opts.kernel_scaled ? k * opts.rank : opts.rank;
        Tensor a({r_inner, k * spec.c_in});
        for (std::int64_t j = 0; j < a.size(); ++j) a[j] = rng.normal(0.0, stddev);
        m.add_slot(li, "lora-a", std::move(a), true);
        m.add_slot(li, "lora-b", Tensor({k * spec.c_out, r_inner}), true);
        nn::Adapter rec;
        rec.method = nn::AdapterMethod::LoraConv;
        rec.layer = li;
        rec.rank = opts.rank;
        rec.kernel_scaled = opts.kernel_scaled;
        m.adapters.push_back(std::move(rec));
    }
    if (opts.train_head) unfreeze_head(m);
    m.bump_structure();
}

void attach_lora_linear(nn::Model& m, const LoraLinearOptions& opts) {
    require_unadapted(m);
    if (opts.rank < 1) throw ShapeError("attach_lora_linear: rank must be >= 1");
    std::vector<std::int64_t> dense_layers;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        if (m.layers[i].kind == nn::LayerKind::Dense) dense_layers.push_back(static_cast<std::int64_t>(i));
    }
    if (dense_layers.empty()) throw StateError("attach_lora_linear: model has no dense layers");

    Rng rng(opts.seed);
    const double stddev = std::sqrt(opts.sigma2);
    m.freeze_all();
    for (const auto li : dense_layers) {
        const nn::LayerSpec& spec = m.layers[static_cast<std::size_t>(li)];
        Tensor a({opts.rank, spec.in});
        for (std::int64_t j = 0; j < a.size(); ++j) a[j] = rng.normal(0.0, stddev);
        m.add_slot(li, "lora-a", std::move(a), true);
        m.add_slot(li, "lora-b", Tensor({spec.out, opts.rank}), true);
        nn::Adapter rec;
        rec.method = nn::AdapterMethod::LoraLinear;
        rec.layer = li;
        rec.rank = opts.rank;
        m.adapters.push_back(std::move(rec));
    }
    m.bump_structure();
}

void apply_bias_tuning(nn::Model& m) {
    require_unadapted(m);
    m.freeze_all();
    bool any = false;
    for (auto& [key, flag] : m.trainable) {
        if (key.name == "bias") {
            flag = true;
            any = true;
        }
    }
    if (!any) throw StateError("apply_bias_tuning: model has no bias slots");
    m.bump_structure();
}

void apply_bn_tuning(nn::Model& m) {
    require_unadapted(m);
    m.freeze_all();
    bool any = false;
    for (auto& [key, flag] : m.trainable) {
        if (key.name == "bn-gamma" || key.name == "bn-beta") {
            flag = true;
            any = true;
        }
    }
    if (!any) throw StateError("apply_bn_tuning: model has no batchnorm slots");
    m.bump_structure();
}

Tensor adapter_delta(const nn::Model& m, std::int64_t layer) {
    const nn::Adapter* a = m.adapter_for_layer(layer);
    if (a == nullptr) throw StateError("no adapter on layer " + std::to_string(layer));
    switch (a->method) {
        case nn::AdapterMethod::LoraEdge: {
            tt::TTCores cores;
            for (int k = 1; m.has_slot(layer, "tt-core-" + std::to_string(k)); ++k) {
                cores.cores.push_back(m.param(layer, "tt-core-" + std::to_string(k)));
            }
            return tt::tt_reconstruct(cores, m.param(layer, "weight").shape());
        }
        case nn::AdapterMethod::LoraConv: {
            const Tensor& A = m.param(layer, "lora-a");
            const Tensor& B = m.param(layer, "lora-b");
            const Tensor M = matmul(B, A);
            const Shape& ws = m.param(layer, "weight").shape();
            const std::int64_t co = ws[0], ci = ws[1], k = ws[2];
            Tensor delta(ws);
            for (std::int64_t f = 0; f < co; ++f)
                for (std::int64_t c = 0; c < ci; ++c)
                    for (std::int64_t u = 0; u < k; ++u)
                        for (std::int64_t v = 0; v < k; ++v)
                            delta.at(f, c, u, v) = M.at(f * k + u, c * k + v);
            return delta;
        }
        case nn::AdapterMethod::LoraLinear: {
            return matmul(m.param(layer, "lora-b"), m.param(layer, "lora-a"));
        }
    }
    throw StateError("adapter_delta: unknown method");
}

void merge_adapters(nn::Model& m) {
    if (m.adapters.empty()) throw StateError("merge_adapters: nothing to merge");
    for (const auto& a : m.adapters) {
        Tensor delta = adapter_delta(m, a.layer);
        add_inplace(m.param(a.layer, "weight"), delta);
    }
    for (const auto& a : m.adapters) {
        if (a.method == nn::AdapterMethod::LoraEdge) {
            for (int k = 1; m.has_slot(a.layer, "tt-core-" + std::to_string(k)); ++k) {
                m.drop_slot(a.layer, "tt-core-" + std::to_string(k));
            }
            m.drop_slot(a.layer, "tt-core-1-init");
        } else {
            m.drop_slot(a.layer, "lora-a");
            m.drop_slot(a.layer, "lora-b");
        }
    }
    m.adapters.clear();
    m.set_full_ft_mask();
    m.bump_structure();
}

Tensor lora_edge_layer_forward(const nn::Model& m, std::int64_t layer, const Tensor& x) {
    const nn::Adapter* a = m.adapter_for_layer(layer);
    if (a == nullptr || a->method != nn::AdapterMethod::LoraEdge) {
        throw StateError("layer " + std::to_string(layer) + " has no lora-edge adapter");
    }
    const nn::LayerSpec& spec = m.layers[static_cast<std::size_t>(layer)];
    const Tensor& w = m.param(layer, "weight");
    Tensor y = conv_forward(w, x, spec.stride, spec.padding);
    Tensor aux = conv_forward(adapter_delta(m, layer), x, spec.stride, spec.padding);
    add_inplace(y, aux);
    return y;
}

Tensor lora_edge_grad_core(const nn::Model& m, std::int64_t layer, const Tensor& x,
                           const Tensor& grad_out, int core_index) {
    const nn::Adapter* a = m.adapter_for_layer(layer);
    if (a == nullptr || a->method != nn::AdapterMethod::LoraEdge) {
        throw StateError("layer " + std::to_string(layer) + " has no lora-edge adapter");
    }
    const nn::LayerSpec& spec = m.layers[static_cast<std::size_t>(layer)];
    const Tensor& w = m.param(layer, "weight");
    const Tensor grad_w = conv_backward_weight(w, x, grad_out, spec.stride, spec.padding);
    tt::TTCores cores;
    for (int k = 1; m.has_slot(layer, "tt-core-" + std::to_string(k)); ++k) {
        cores.cores.push_back(m.param(layer, "tt-core-" + std::to_string(k)));
    }
    return tt::tt_core_gradient(cores, grad_w, static_cast<std::size_t>(core_index - 1));
}

void restore_core1_init(nn::Model& m) {
    bool any = false;
    for (const auto& a : m.adapters) {
        if (a.method != nn::AdapterMethod::LoraEdge) continue;
        m.param(a.layer, "tt-core-1") = m.param(a.layer, "tt-core-1-init");
        any = true;
    }
    if (!any) throw StateError("restore_core1_init: no lora-edge adapters");
}

void randomize_frozen_cores(nn::Model& m, double sigma2, std::uint64_t seed) {
    Rng rng(seed);
    const double stddev = std::sqrt(sigma2);
    bool any = false;
    for (const auto& a : m.adapters) {
        if (a.method != nn::AdapterMethod::LoraEdge) continue;
        any = true;
        m.param(a.layer, "tt-core-1").fill(0.0);
        for (int k = 2; m.has_slot(a.layer, "tt-core-" + std::to_string(k)); ++k) {
            Tensor& core = m.param(a.layer, "tt-core-" + std::to_string(k));
            for (std::int64_t j = 0; j < core.size(); ++j) core[j] = rng.normal(0.0, stddev);
        }
    }
    if (!any) throw StateError("randomize_frozen_cores: no lora-edge adapters");
}

ParamReport param_report(const nn::Model& m) {
    ParamReport r;
    r.rows.resize(m.layers.size());
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        r.rows[i].layer = static_cast<std::int64_t>(i);
        r.rows[i].kind = nn::layer_kind_name(m.layers[i].kind);
    }
    for (const auto& [key, value] : m.params) {
        auto& row = r.rows[static_cast<std::size_t>(key.layer)];
        if (nn::is_backbone_slot(key.name)) {
            row.backbone += value.size();
            r.full_ft_total += value.size();
        }
        if (m.trainable.at(key)) {
            row.trainable += value.size();
            r.trainable_total += value.size();
        }
    }
    r.percent = r.full_ft_total == 0
                    ? 0.0
                    : 100.0 * static_cast<double>(r.trainable_total) /
                          static_cast<double>(r.full_ft_total);
    return r;
}

std::string format_param_report(const ParamReport& r) {
    std::string out = "layer  kind              trainable  backbone\n";
    char buf[128];
    for (const auto& row : r.rows) {
        if (row.trainable == 0 && row.backbone == 0) continue;
        std::snprintf(buf, sizeof(buf), "%-6lld %-17s %9lld %9lld\n",
                      static_cast<long long>(row.layer), row.kind.c_str(),
                      static_cast<long long>(row.trainable), static_cast<long long>(row.backbone));
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "total: %lld trainable / %lld full-FT = %.4g%%\n",
                  static_cast<long long>(r.trainable_total),
                  static_cast<long long>(r.full_ft_total), r.percent);
    out += buf;
    return out;
}

} // namespace loraedge::peft
