#include "loraedge/nn.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "loraedge/rng.hpp"
#include "loraedge/tt.hpp"

namespace loraedge::nn {

namespace {

constexpr double kBnMomentum = 0.1;
constexpr double kBnEps = 1e-5;

} // namespace

std::string layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Conv1D: return "conv1d";
        case LayerKind::Conv2D: return "conv2d";
        case LayerKind::BatchNorm: return "batchnorm";
        case LayerKind::ReLU: return "relu";
        case LayerKind::MaxPool: return "maxpool";
        case LayerKind::GlobalAvgPool: return "global-avg-pool";
        case LayerKind::Dense: return "dense";
        case LayerKind::Flatten: return "flatten";
        case LayerKind::SkipSave: return "skip-save";
        case LayerKind::SkipAdd: return "skip-add";
    }
    throw StateError("layer_kind_name: unknown kind");
}

LayerKind layer_kind_from_name(const std::string& name) {
    for (const auto k : {LayerKind::Conv1D, LayerKind::Conv2D, LayerKind::BatchNorm,
                         LayerKind::ReLU, LayerKind::MaxPool, LayerKind::GlobalAvgPool,
                         LayerKind::Dense, LayerKind::Flatten, LayerKind::SkipSave,
                         LayerKind::SkipAdd}) {
        if (layer_kind_name(k) == name) return k;
    }
    throw IoError("unknown layer kind: " + name);
}

LayerSpec LayerSpec::conv1d(std::int64_t c_in, std::int64_t c_out, std::int64_t kernel,
                            std::int64_t stride, std::int64_t padding, bool bias) {
    LayerSpec s;
    s.kind = LayerKind::Conv1D;
    s.c_in = c_in;
    s.c_out = c_out;
    s.kernel = kernel;
    s.stride = stride;
    s.padding = padding;
    s.bias = bias;
    return s;
}

LayerSpec LayerSpec::conv2d(std::int64_t c_in, std::int64_t c_out, std::int64_t kernel,
                            std::int64_t stride, std::int64_t padding, bool bias) {
    LayerSpec s = conv1d(c_in, c_out, kernel, stride, padding, bias);
    s.kind = LayerKind::Conv2D;
    return s;
}

LayerSpec LayerSpec::batchnorm(std::int64_t channels) {
    LayerSpec s;
    s.kind = LayerKind::BatchNorm;
    s.channels = channels;
    return s;
}

LayerSpec LayerSpec::relu() {
    LayerSpec s;
    s.kind = LayerKind::ReLU;
    return s;
}

LayerSpec LayerSpec::maxpool(std::int64_t pool) {
    LayerSpec s;
    s.kind = LayerKind::MaxPool;
    s.pool = pool;
    return s;
}

LayerSpec LayerSpec::global_avg_pool() {
    LayerSpec s;
    s.kind = LayerKind::GlobalAvgPool;
    return s;
}

LayerSpec LayerSpec::dense(std::int64_t in, std::int64_t out, bool bias) {
    LayerSpec s;
    s.kind = LayerKind::Dense;
    s.in = in;
    s.out = out;
    s.bias = bias;
    return s;
}

LayerSpec LayerSpec::flatten() {
    LayerSpec s;
    s.kind = LayerKind::Flatten;
    return s;
}

LayerSpec LayerSpec::skip_save() {
    LayerSpec s;
    s.kind = LayerKind::SkipSave;
    return s;
}

LayerSpec LayerSpec::skip_add() {
    LayerSpec s;
    s.kind = LayerKind::SkipAdd;
    return s;
}

bool is_backbone_slot(const std::string& name) {
    return name == "weight" || name == "bias" || name == "bn-gamma" || name == "bn-beta";
}

std::string adapter_method_name(AdapterMethod m) {
    switch (m) {
        case AdapterMethod::LoraEdge: return "lora-edge";
        case AdapterMethod::LoraConv: return "lora-c";
        case AdapterMethod::LoraLinear: return "lora-linear";
    }
    throw StateError("adapter_method_name: unknown method");
}

AdapterMethod adapter_method_from_name(const std::string& name) {
    for (const auto m : {AdapterMethod::LoraEdge, AdapterMethod::LoraConv, AdapterMethod::LoraLinear}) {
        if (adapter_method_name(m) == name) return m;
    }
    throw IoError("unknown adapter method: " + name);
}

Tensor& Model::param(std::int64_t layer, const std::string& name) {
    const auto it = params.find(SlotKey{layer, name});
    if (it == params.end()) {
        throw StateError("no slot (" + std::to_string(layer) + ", " + name + ")");
    }
    return it->second;
}

const Tensor& Model::param(std::int64_t layer, const std::string& name) const {
    const auto it = params.find(SlotKey{layer, name});
    if (it == params.end()) {
        throw StateError("no slot (" + std::to_string(layer) + ", " + name + ")");
    }
    return it->second;
}

bool Model::has_slot(std::int64_t layer, const std::string& name) const {
    return params.count(SlotKey{layer, name}) > 0;
}

void Model::add_slot(std::int64_t layer, const std::string& name, Tensor value,
                     bool trainable_flag) {
    const SlotKey key{layer, name};
    if (params.count(key) > 0) {
        throw StateError("slot already exists (" + std::to_string(layer) + ", " + name + ")");
    }
    params.emplace(key, std::move(value));
    trainable[key] = trainable_flag;
}

void Model::drop_slot(std::int64_t layer, const std::string& name) {
    const SlotKey key{layer, name};
    if (params.erase(key) == 0) {
        throw StateError("no slot to drop (" + std::to_string(layer) + ", " + name + ")");
    }
    trainable.erase(key);
}

const Adapter* Model::adapter_for_layer(std::int64_t layer) const {
    for (const auto& a : adapters) {
        if (a.layer == layer) return &a;
    }
    return nullptr;
}

std::int64_t Model::trainable_count() const {
    std::int64_t total = 0;
    for (const auto& [key, flag] : trainable) {
        if (flag) total += params.at(key).size();
    }
    return total;
}

std::int64_t Model::backbone_param_count() const {
    std::int64_t total = 0;
    for (const auto& [key, value] : params) {
        if (is_backbone_slot(key.name)) total += value.size();
    }
    return total;
}

void Model::freeze_all() {
    for (auto& [key, flag] : trainable) flag = false;
}

void Model::set_full_ft_mask() {
    for (auto& [key, flag] : trainable) flag = is_backbone_slot(key.name);
}

Shape layer_output_shape(const LayerSpec& spec, const Shape& in) {
    const auto conv_extent = [](std::int64_t n, std::int64_t k, std::int64_t s, std::int64_t p) {
        const std::int64_t out = (n + 2 * p - k) / s + 1;
        if (n + 2 * p < k || out < 1) throw ShapeError("conv output would be empty");
        return out;
    };
    switch (spec.kind) {
        case LayerKind::Conv1D: {
            if (in.size() != 2 || in[0] != spec.c_in) {
                throw ShapeError("conv1d expects [" + std::to_string(spec.c_in) + ", L], got " +
                                 shape_to_string(in));
            }
            return {spec.c_out, conv_extent(in[1], spec.kernel, spec.stride, spec.padding)};
        }
        case LayerKind::Conv2D: {
            if (in.size() != 3 || in[0] != spec.c_in) {
                throw ShapeError("conv2d expects [" + std::to_string(spec.c_in) + ", H, W], got " +
                                 shape_to_string(in));
            }
            return {spec.c_out, conv_extent(in[1], spec.kernel, spec.stride, spec.padding),
                    conv_extent(in[2], spec.kernel, spec.stride, spec.padding)};
        }
        case LayerKind::BatchNorm: {
            if (in.size() < 2 || in[0] != spec.channels) {
                throw ShapeError("batchnorm(" + std::to_string(spec.channels) +
                                 ") mismatches input " + shape_to_string(in));
            }
            return in;
        }
        case LayerKind::ReLU:
            return in;
        case LayerKind::MaxPool: {
            if (in.size() < 2 || spec.pool < 1) {
                throw ShapeError("maxpool needs [C, spatial...] input and pool >= 1");
            }
            Shape out = in;
            for (std::size_t i = 1; i < in.size(); ++i) {
                if (in[i] < spec.pool) throw ShapeError("maxpool window exceeds input");
                out[i] = (in[i] - spec.pool) / spec.pool + 1;
            }
            return out;
        }
        case LayerKind::GlobalAvgPool: {
            if (in.size() < 2) throw ShapeError("global-avg-pool needs [C, spatial...] input");
            return {in[0]};
        }
        case LayerKind::Dense: {
            if (in.size() != 1 || in[0] != spec.in) {
                throw ShapeError("dense expects [" + std::to_string(spec.in) + "], got " +
                                 shape_to_string(in));
            }
            return {spec.out};
        }
        case LayerKind::Flatten:
            return {shape_product(in)};
        case LayerKind::SkipSave:
        case LayerKind::SkipAdd:
            return in;
    }
    throw StateError("layer_output_shape: unknown kind");
}

std::vector<Shape> infer_shapes(const std::vector<LayerSpec>& layers, const Shape& input_shape) {
    if (input_shape.empty()) throw ShapeError("empty input shape");
    std::vector<Shape> out;
    std::vector<Shape> stack;
    Shape cur = input_shape;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const LayerSpec& spec = layers[i];
        if (spec.kind == LayerKind::SkipSave) {
            stack.push_back(cur);
        } else if (spec.kind == LayerKind::SkipAdd) {
            if (stack.empty()) throw ShapeError("skip-add without a matching skip-save");
            if (!shapes_equal(stack.back(), cur)) {
                throw ShapeError("skip-add shape mismatch: saved " + shape_to_string(stack.back()) +
                                 " vs current " + shape_to_string(cur));
            }
            stack.pop_back();
        }
        cur = layer_output_shape(spec, cur);
        out.push_back(cur);
    }
    if (!stack.empty()) throw ShapeError("skip-save without a matching skip-add");
    return out;
}

Model build_model(std::vector<LayerSpec> layers, Shape input_shape, std::uint64_t seed) {
    infer_shapes(layers, input_shape); // validates the chain
    Model m;
    m.input_shape = std::move(input_shape);
    m.layers = std::move(layers);
    Rng rng(seed);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const LayerSpec& spec = m.layers[i];
        const auto li = static_cast<std::int64_t>(i);
        switch (spec.kind) {
            case LayerKind::Conv1D:
            case LayerKind::Conv2D: {
                const std::int64_t per_kernel =
                    spec.kind == LayerKind::Conv1D ? spec.kernel : spec.kernel * spec.kernel;
                const double he = std::sqrt(2.0 / static_cast<double>(spec.c_in * per_kernel));
                Shape ws = spec.kind == LayerKind::Conv1D
                               ? Shape{spec.c_out, spec.c_in, spec.kernel}
                               : Shape{spec.c_out, spec.c_in, spec.kernel, spec.kernel};
                Tensor w(ws);
                for (std::int64_t j = 0; j < w.size(); ++j) w[j] = rng.normal(0.0, he);
                m.add_slot(li, "weight", std::move(w), true);
                if (spec.bias) m.add_slot(li, "bias", Tensor({spec.c_out}), true);
                break;
            }
            case LayerKind::BatchNorm: {
                m.add_slot(li, "bn-gamma", Tensor::full({spec.channels}, 1.0), true);
                m.add_slot(li, "bn-beta", Tensor({spec.channels}), true);
                m.add_slot(li, "bn-running-mean", Tensor({spec.channels}), false);
                m.add_slot(li, "bn-running-var", Tensor::full({spec.channels}, 1.0), false);
                break;
            }
            case LayerKind::Dense: {
                const double he = std::sqrt(2.0 / static_cast<double>(spec.in));
                Tensor w({spec.out, spec.in});
                for (std::int64_t j = 0; j < w.size(); ++j) w[j] = rng.normal(0.0, he);
                m.add_slot(li, "weight", std::move(w), true);
                if (spec.bias) m.add_slot(li, "bias", Tensor({spec.out}), true);
                break;
            }
            default:
                break;
        }
    }
    return m;
}

namespace {

tt::TTCores gather_cores(const Model& m, const Adapter& a) {
    tt::TTCores c;
    for (int k = 1; m.has_slot(a.layer, "tt-core-" + std::to_string(k)); ++k) {
        c.cores.push_back(m.param(a.layer, "tt-core-" + std::to_string(k)));
    }
    c.validate();
    return c;
}

// lora-c weight-matrix bijection: [C_out*k_h rows, C_in*k_w cols],
// row = co*k + u, col = ci*k + v
Tensor lora_c_delta(const Model& m, const Adapter& a, const Shape& wshape) {
    const Tensor& A = m.param(a.layer, "lora-a");
    const Tensor& B = m.param(a.layer, "lora-b");
    const Tensor M = matmul(B, A);
    const std::int64_t co = wshape[0], ci = wshape[1], k = wshape[2];
    Tensor delta(wshape);
    for (std::int64_t f = 0; f < co; ++f)
        for (std::int64_t c = 0; c < ci; ++c)
            for (std::int64_t u = 0; u < k; ++u)
                for (std::int64_t v = 0; v < k; ++v)
                    delta.at(f, c, u, v) = M.at(f * k + u, c * k + v);
    return delta;
}

// reconstructed auxiliary weight for any adapter kind, shaped like the host weight
Tensor adapter_weight_delta(const Model& m, const Adapter& a, const Shape& wshape) {
    switch (a.method) {
        case AdapterMethod::LoraEdge:
            return tt::tt_reconstruct(gather_cores(m, a), wshape);
        case AdapterMethod::LoraConv:
            return lora_c_delta(m, a, wshape);
        case AdapterMethod::LoraLinear: {
            const Tensor& A = m.param(a.layer, "lora-a");
            const Tensor& B = m.param(a.layer, "lora-b");
            return matmul(B, A);
        }
    }
    throw StateError("adapter_weight_delta: unknown method");
}

void add_channel_bias(Tensor& y, const Tensor& bias) {
    const std::int64_t b = y.extent(0), c = y.extent(1);
    const std::int64_t spatial = y.size() / (b * c);
    for (std::int64_t n = 0; n < b; ++n)
        for (std::int64_t f = 0; f < c; ++f) {
            double* row = y.data() + (n * c + f) * spatial;
            const double add = bias[f];
            for (std::int64_t s = 0; s < spatial; ++s) row[s] += add;
        }
}

struct BnStatUpdate {
    std::int64_t layer = 0;
    std::vector<double> mean, var_unbiased;
};

// forward over a const model; train-mode BN stat updates are collected, not applied
Tensor forward_impl(const Model& m, const Tensor& x, Mode mode, ForwardCache* cache,
                    std::vector<BnStatUpdate>* stat_updates) {
    if (x.order() != static_cast<std::int64_t>(m.input_shape.size()) + 1) {
        throw ShapeError("input order mismatch: expected batch + " +
                         shape_to_string(m.input_shape) + ", got " + shape_to_string(x.shape()));
    }
    for (std::size_t i = 0; i < m.input_shape.size(); ++i) {
        if (x.extent(i + 1) != m.input_shape[i]) {
            throw ShapeError("input shape mismatch: expected batch + " +
                             shape_to_string(m.input_shape) + ", got " + shape_to_string(x.shape()));
        }
    }
    if (cache) {
        cache->mode = mode;
        cache->structure_version = m.structure_version;
        cache->layers.assign(m.layers.size(), LayerCache{});
    }

    const std::int64_t batch = x.extent(0);
    Tensor act = x;
    std::vector<Tensor> skip_stack;

    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const LayerSpec& spec = m.layers[i];
        const auto li = static_cast<std::int64_t>(i);
        LayerCache* lc = cache ? &cache->layers[i] : nullptr;
        if (lc) lc->input = act;

        switch (spec.kind) {
            case LayerKind::Conv1D:
            case LayerKind::Conv2D: {
                const Tensor& w = m.param(li, "weight");
                Tensor y = conv_forward(w, act, spec.stride, spec.padding);
                if (spec.bias) add_channel_bias(y, m.param(li, "bias"));
                if (const Adapter* a = m.adapter_for_layer(li)) {
                    Tensor delta = adapter_weight_delta(m, *a, w.shape());
                    Tensor aux = conv_forward(delta, act, spec.stride, spec.padding);
                    add_inplace(y, aux);
                    if (lc) lc->adapter_delta = std::move(delta);
                }
                act = std::move(y);
                break;
            }
            case LayerKind::BatchNorm: {
                const std::int64_t c = spec.channels;
                const std::int64_t spatial = act.size() / (batch * c);
                const Tensor& gamma = m.param(li, "bn-gamma");
                const Tensor& beta = m.param(li, "bn-beta");
                std::vector<double> mean(static_cast<std::size_t>(c), 0.0);
                std::vector<double> var(static_cast<std::size_t>(c), 0.0);
                const std::int64_t n_per_c = batch * spatial;
                if (mode == Mode::Train) {
                    for (std::int64_t f = 0; f < c; ++f) {
                        double s = 0.0;
                        for (std::int64_t n = 0; n < batch; ++n) {
                            const double* row = act.data() + (n * c + f) * spatial;
                            for (std::int64_t k = 0; k < spatial; ++k) s += row[k];
                        }
                        mean[static_cast<std::size_t>(f)] = s / static_cast<double>(n_per_c);
                    }
                    for (std::int64_t f = 0; f < c; ++f) {
                        double s = 0.0;
                        const double mu = mean[static_cast<std::size_t>(f)];
                        for (std::int64_t n = 0; n < batch; ++n) {
                            const double* row = act.data() + (n * c + f) * spatial;
                            for (std::int64_t k = 0; k < spatial; ++k) {
                                const double d = row[k] - mu;
                                s += d * d;
                            }
                        }
                        var[static_cast<std::size_t>(f)] = s / static_cast<double>(n_per_c);
                    }
                    if (stat_updates) {
                        if (n_per_c < 2) throw ShapeError("batchnorm train mode needs >= 2 values per channel");
                        BnStatUpdate u;
                        u.layer = li;
                        u.mean = mean;
                        u.var_unbiased.resize(static_cast<std::size_t>(c));
                        const double corr = static_cast<double>(n_per_c) / static_cast<double>(n_per_c - 1);
                        for (std::int64_t f = 0; f < c; ++f)
                            u.var_unbiased[static_cast<std::size_t>(f)] =
                                var[static_cast<std::size_t>(f)] * corr;
                        stat_updates->push_back(std::move(u));
                    }
                } else {
                    const Tensor& rm = m.param(li, "bn-running-mean");
                    const Tensor& rv = m.param(li, "bn-running-var");
                    for (std::int64_t f = 0; f < c; ++f) {
                        mean[static_cast<std::size_t>(f)] = rm[f];
                        var[static_cast<std::size_t>(f)] = rv[f];
                    }
                }
                Tensor y(act.shape());
                Tensor xhat(act.shape());
                std::vector<double> inv_std(static_cast<std::size_t>(c));
                for (std::int64_t f = 0; f < c; ++f)
                    inv_std[static_cast<std::size_t>(f)] =
                        1.0 / std::sqrt(var[static_cast<std::size_t>(f)] + kBnEps);
                for (std::int64_t n = 0; n < batch; ++n)
                    for (std::int64_t f = 0; f < c; ++f) {
                        const double mu = mean[static_cast<std::size_t>(f)];
                        const double is = inv_std[static_cast<std::size_t>(f)];
                        const double g = gamma[f], bt = beta[f];
                        const double* src = act.data() + (n * c + f) * spatial;
                        double* xh = xhat.data() + (n * c + f) * spatial;
                        double* dst = y.data() + (n * c + f) * spatial;
                        for (std::int64_t k = 0; k < spatial; ++k) {
                            xh[k] = (src[k] - mu) * is;
                            dst[k] = g * xh[k] + bt;
                        }
                    }
                if (lc) {
                    lc->bn_xhat = std::move(xhat);
                    lc->bn_mean = std::move(mean);
                    lc->bn_inv_std = std::move(inv_std);
                }
                act = std::move(y);
                break;
            }
            case LayerKind::ReLU: {
                Tensor y = act;
                for (std::int64_t j = 0; j < y.size(); ++j)
                    if (y[j] < 0.0) y[j] = 0.0;
                act = std::move(y);
                break;
            }
            case LayerKind::MaxPool: {
                const Shape& is = act.shape();
                const bool two_d = is.size() == 4;
                const std::int64_t c = is[1];
                const std::int64_t p = spec.pool;
                Shape os = is;
                for (std::size_t d = 2; d < is.size(); ++d) os[d] = (is[d] - p) / p + 1;
                Tensor y(os);
                std::vector<std::int64_t> argmax(static_cast<std::size_t>(y.size()));
                std::int64_t oi = 0;
                if (two_d) {
                    for (std::int64_t n = 0; n < batch; ++n)
                        for (std::int64_t f = 0; f < c; ++f)
                            for (std::int64_t a = 0; a < os[2]; ++a)
                                for (std::int64_t b = 0; b < os[3]; ++b) {
                                    double best = -1e300;
                                    std::int64_t arg = -1;
                                    for (std::int64_t u = 0; u < p; ++u)
                                        for (std::int64_t v = 0; v < p; ++v) {
                                            const std::int64_t flat =
                                                ((n * c + f) * is[2] + (a * p + u)) * is[3] + (b * p + v);
                                            if (act[flat] > best) {
                                                best = act[flat];
                                                arg = flat;
                                            }
                                        }
                                    y[oi] = best;
                                    argmax[static_cast<std::size_t>(oi)] = arg;
                                    ++oi;
                                }
                } else {
                    for (std::int64_t n = 0; n < batch; ++n)
                        for (std::int64_t f = 0; f < c; ++f)
                            for (std::int64_t a = 0; a < os[2]; ++a) {
                                double best = -1e300;
                                std::int64_t arg = -1;
                                for (std::int64_t u = 0; u < p; ++u) {
                                    const std::int64_t flat = (n * c + f) * is[2] + (a * p + u);
                                    if (act[flat] > best) {
                                        best = act[flat];
                                        arg = flat;
                                    }
                                }
                                y[oi] = best;
                                argmax[static_cast<std::size_t>(oi)] = arg;
                                ++oi;
                            }
                }
                if (lc) lc->pool_argmax = std::move(argmax);
                act = std::move(y);
                break;
            }
            case LayerKind::GlobalAvgPool: {
                const std::int64_t c = act.extent(1);
                const std::int64_t spatial = act.size() / (batch * c);
                Tensor y({batch, c});
                for (std::int64_t n = 0; n < batch; ++n)
                    for (std::int64_t f = 0; f < c; ++f) {
                        const double* row = act.data() + (n * c + f) * spatial;
                        double s = 0.0;
                        for (std::int64_t k = 0; k < spatial; ++k) s += row[k];
                        y.at(n, f) = s / static_cast<double>(spatial);
                    }
                act = std::move(y);
                break;
            }
            case LayerKind::Dense: {
                const Tensor& w = m.param(li, "weight");
                Tensor y = matmul(act, transpose2(w));
                if (spec.bias) {
                    const Tensor& bias = m.param(li, "bias");
                    for (std::int64_t n = 0; n < batch; ++n)
                        for (std::int64_t o = 0; o < spec.out; ++o) y.at(n, o) += bias[o];
                }
                if (const Adapter* a = m.adapter_for_layer(li)) {
                    Tensor delta = adapter_weight_delta(m, *a, w.shape());
                    Tensor aux = matmul(act, transpose2(delta));
                    add_inplace(y, aux);
                    if (lc) lc->adapter_delta = std::move(delta);
                }
                act = std::move(y);
                break;
            }
            case LayerKind::Flatten: {
                Shape os{batch, act.size() / batch};
                act = reshape(act, os);
                break;
            }
            case LayerKind::SkipSave: {
                skip_stack.push_back(act);
                break;
            }
            case LayerKind::SkipAdd: {
                if (skip_stack.empty()) throw StateError("skip-add without saved activation");
                add_inplace(act, skip_stack.back());
                skip_stack.pop_back();
                break;
            }
        }
    }
    return act;
}

} // namespace

std::pair<Tensor, ForwardCache> forward(Model& m, const Tensor& x, Mode mode) {
    ForwardCache cache;
    std::vector<BnStatUpdate> updates;
    Tensor logits = forward_impl(m, x, mode, &cache, mode == Mode::Train ? &updates : nullptr);
    for (const auto& u : updates) {
        Tensor& rm = m.param(u.layer, "bn-running-mean");
        Tensor& rv = m.param(u.layer, "bn-running-var");
        for (std::int64_t f = 0; f < rm.size(); ++f) {
            rm[f] = (1.0 - kBnMomentum) * rm[f] + kBnMomentum * u.mean[static_cast<std::size_t>(f)];
            rv[f] = (1.0 - kBnMomentum) * rv[f] +
                    kBnMomentum * u.var_unbiased[static_cast<std::size_t>(f)];
        }
    }
    return {std::move(logits), std::move(cache)};
}

Tensor predict(const Model& m, const Tensor& x) {
    return forward_impl(m, x, Mode::Eval, nullptr, nullptr);
}

GradMap backward(const Model& m, const ForwardCache& cache, const Tensor& grad_logits) {
    if (cache.structure_version != m.structure_version) {
        throw StateError("stale forward cache: model structure changed");
    }
    if (cache.layers.size() != m.layers.size()) {
        throw StateError("stale forward cache: layer count mismatch");
    }
    GradMap grads;
    const auto want = [&](std::int64_t layer, const std::string& name) {
        const auto it = m.trainable.find(SlotKey{layer, name});
        return it != m.trainable.end() && it->second;
    };

    Tensor grad = grad_logits;
    std::vector<Tensor> skip_grads;
    const std::int64_t batch = grad.extent(0);

    for (std::size_t ri = m.layers.size(); ri-- > 0;) {
        const LayerSpec& spec = m.layers[ri];
        const auto li = static_cast<std::int64_t>(ri);
        const LayerCache& lc = cache.layers[ri];

        switch (spec.kind) {
            case LayerKind::Conv1D:
            case LayerKind::Conv2D: {
                const Tensor& w = m.param(li, "weight");
                const Adapter* a = m.adapter_for_layer(li);
                const bool need_weight_grad =
                    want(li, "weight") ||
                    (a != nullptr && (a->method != AdapterMethod::LoraEdge ||
                                      !a->trainable_cores.empty()));
                Tensor grad_w;
                if (need_weight_grad) {
                    grad_w = conv_backward_weight(w, lc.input, grad, spec.stride, spec.padding);
                }
                if (want(li, "weight")) grads[SlotKey{li, "weight"}] = grad_w;
                if (spec.bias && want(li, "bias")) {
                    const std::int64_t c = grad.extent(1);
                    const std::int64_t spatial = grad.size() / (batch * c);
                    Tensor gb({c});
                    for (std::int64_t n = 0; n < batch; ++n)
                        for (std::int64_t f = 0; f < c; ++f) {
                            const double* row = grad.data() + (n * c + f) * spatial;
                            for (std::int64_t k = 0; k < spatial; ++k) gb[f] += row[k];
                        }
                    grads[SlotKey{li, "bias"}] = std::move(gb);
                }
                if (a != nullptr) {
                    if (a->method == AdapterMethod::LoraEdge) {
                        tt::TTCores cores = gather_cores(m, *a);
                        for (const int idx : a->trainable_cores) {
                            const std::string slot = "tt-core-" + std::to_string(idx);
                            if (!want(li, slot)) continue;
                            grads[SlotKey{li, slot}] =
                                tt::tt_core_gradient(cores, grad_w, static_cast<std::size_t>(idx - 1));
                        }
                    } else if (a->method == AdapterMethod::LoraConv) {
                        const std::int64_t co = w.extent(0), ci = w.extent(1), k = w.extent(2);
                        Tensor gm({co * k, ci * k});
                        for (std::int64_t f = 0; f < co; ++f)
                            for (std::int64_t c = 0; c < ci; ++c)
                                for (std::int64_t u = 0; u < k; ++u)
                                    for (std::int64_t v = 0; v < k; ++v)
                                        gm.at(f * k + u, c * k + v) = grad_w.at(f, c, u, v);
                        const Tensor& A = m.param(li, "lora-a");
                        const Tensor& B = m.param(li, "lora-b");
                        if (want(li, "lora-b"))
                            grads[SlotKey{li, "lora-b"}] = matmul(gm, transpose2(A));
                        if (want(li, "lora-a"))
                            grads[SlotKey{li, "lora-a"}] = matmul(transpose2(B), gm);
                    }
                    Tensor w_eff = w;
                    add_inplace(w_eff, lc.adapter_delta);
                    grad = conv_backward_input(w_eff, lc.input, grad, spec.stride, spec.padding);
                } else {
                    grad = conv_backward_input(w, lc.input, grad, spec.stride, spec.padding);
                }
                break;
            }
            case LayerKind::BatchNorm: {
                const std::int64_t c = spec.channels;
                const std::int64_t spatial = grad.size() / (batch * c);
                const std::int64_t n_per_c = batch * spatial;
                const Tensor& gamma = m.param(li, "bn-gamma");
                std::vector<double> go_sum(static_cast<std::size_t>(c), 0.0);
                std::vector<double> go_xhat_sum(static_cast<std::size_t>(c), 0.0);
                for (std::int64_t n = 0; n < batch; ++n)
                    for (std::int64_t f = 0; f < c; ++f) {
                        const double* go = grad.data() + (n * c + f) * spatial;
                        const double* xh = lc.bn_xhat.data() + (n * c + f) * spatial;
                        double s = 0.0, sx = 0.0;
                        for (std::int64_t k = 0; k < spatial; ++k) {
                            s += go[k];
                            sx += go[k] * xh[k];
                        }
                        go_sum[static_cast<std::size_t>(f)] += s;
                        go_xhat_sum[static_cast<std::size_t>(f)] += sx;
                    }
                if (want(li, "bn-gamma")) {
                    Tensor gg({c});
                    for (std::int64_t f = 0; f < c; ++f) gg[f] = go_xhat_sum[static_cast<std::size_t>(f)];
                    grads[SlotKey{li, "bn-gamma"}] = std::move(gg);
                }
                if (want(li, "bn-beta")) {
                    Tensor gb({c});
                    for (std::int64_t f = 0; f < c; ++f) gb[f] = go_sum[static_cast<std::size_t>(f)];
                    grads[SlotKey{li, "bn-beta"}] = std::move(gb);
                }
                Tensor gx(grad.shape());
                if (cache.mode == Mode::Train) {
                    for (std::int64_t n = 0; n < batch; ++n)
                        for (std::int64_t f = 0; f < c; ++f) {
                            const double scale = gamma[f] * lc.bn_inv_std[static_cast<std::size_t>(f)];
                            const double mg = go_sum[static_cast<std::size_t>(f)] / static_cast<double>(n_per_c);
                            const double mgx =
                                go_xhat_sum[static_cast<std::size_t>(f)] / static_cast<double>(n_per_c);
                            const double* go = grad.data() + (n * c + f) * spatial;
                            const double* xh = lc.bn_xhat.data() + (n * c + f) * spatial;
                            double* dst = gx.data() + (n * c + f) * spatial;
                            for (std::int64_t k = 0; k < spatial; ++k)
                                dst[k] = scale * (go[k] - mg - xh[k] * mgx);
                        }
                } else {
                    for (std::int64_t n = 0; n < batch; ++n)
                        for (std::int64_t f = 0; f < c; ++f) {
                            const double scale = gamma[f] * lc.bn_inv_std[static_cast<std::size_t>(f)];
                            const double* go = grad.data() + (n * c + f) * spatial;
                            double* dst = gx.data() + (n * c + f) * spatial;
                            for (std::int64_t k = 0; k < spatial; ++k) dst[k] = scale * go[k];
                        }
                }
                grad = std::move(gx);
                break;
            }
            case LayerKind::ReLU: {
                Tensor gx = grad;
                for (std::int64_t j = 0; j < gx.size(); ++j)
                    if (lc.input[j] <= 0.0) gx[j] = 0.0;
                grad = std::move(gx);
                break;
            }
            case LayerKind::MaxPool: {
                Tensor gx(lc.input.shape());
                for (std::int64_t j = 0; j < grad.size(); ++j)
                    gx[lc.pool_argmax[static_cast<std::size_t>(j)]] += grad[j];
                grad = std::move(gx);
                break;
            }
            case LayerKind::GlobalAvgPool: {
                const Shape& is = lc.input.shape();
                const std::int64_t c = is[1];
                const std::int64_t spatial = lc.input.size() / (batch * c);
                Tensor gx(is);
                for (std::int64_t n = 0; n < batch; ++n)
                    for (std::int64_t f = 0; f < c; ++f) {
                        const double g = grad.at(n, f) / static_cast<double>(spatial);
                        double* dst = gx.data() + (n * c + f) * spatial;
                        for (std::int64_t k = 0; k < spatial; ++k) dst[k] = g;
                    }
                grad = std::move(gx);
                break;
            }
            case LayerKind::Dense: {
                const Tensor& w = m.param(li, "weight");
                const Adapter* a = m.adapter_for_layer(li);
                Tensor grad_w;
                const bool need_weight_grad = want(li, "weight") || a != nullptr;
                if (need_weight_grad) grad_w = matmul(transpose2(grad), lc.input);
                if (want(li, "weight")) grads[SlotKey{li, "weight"}] = grad_w;
                if (spec.bias && want(li, "bias")) {
                    Tensor gb({spec.out});
                    for (std::int64_t n = 0; n < batch; ++n)
                        for (std::int64_t o = 0; o < spec.out; ++o) gb[o] += grad.at(n, o);
                    grads[SlotKey{li, "bias"}] = std::move(gb);
                }
                if (a != nullptr && a->method == AdapterMethod::LoraLinear) {
                    const Tensor& A = m.param(li, "lora-a");
                    const Tensor& B = m.param(li, "lora-b");
                    if (want(li, "lora-b")) grads[SlotKey{li, "lora-b"}] = matmul(grad_w, transpose2(A));
                    if (want(li, "lora-a")) grads[SlotKey{li, "lora-a"}] = matmul(transpose2(B), grad_w);
                    Tensor w_eff = w;
                    add_inplace(w_eff, lc.adapter_delta);
                    grad = matmul(grad, w_eff);
                } else {
                    grad = matmul(grad, w);
                }
                break;
            }
            case LayerKind::Flatten: {
                grad = reshape(grad, lc.input.shape());
                break;
            }
            case LayerKind::SkipAdd: {
                skip_grads.push_back(grad);
                break;
            }
            case LayerKind::SkipSave: {
                if (skip_grads.empty()) throw StateError("skip gradient stack underflow");
                add_inplace(grad, skip_grads.back());
                skip_grads.pop_back();
                break;
            }
        }
    }
    return grads;
}

LossResult softmax_cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels) {
    if (logits.order() != 2) throw ShapeError("softmax_cross_entropy expects [batch, classes]");
    const std::int64_t b = logits.extent(0), c = logits.extent(1);
    if (static_cast<std::int64_t>(labels.size()) != b) {
        throw ShapeError("label count mismatches batch");
    }
    for (const auto l : labels) {
        if (l < 0 || l >= c) throw ShapeError("label out of range: " + std::to_string(l));
    }
    LossResult r;
    r.grad_logits = Tensor({b, c});
    double loss = 0.0;
    for (std::int64_t n = 0; n < b; ++n) {
        double zmax = logits.at(n, 0);
        for (std::int64_t j = 1; j < c; ++j) zmax = std::max(zmax, logits.at(n, j));
        double denom = 0.0;
        for (std::int64_t j = 0; j < c; ++j) denom += std::exp(logits.at(n, j) - zmax);
        const std::int64_t y = labels[static_cast<std::size_t>(n)];
        loss += std::log(denom) - (logits.at(n, y) - zmax);
        for (std::int64_t j = 0; j < c; ++j) {
            const double p = std::exp(logits.at(n, j) - zmax) / denom;
            r.grad_logits.at(n, j) = (p - (j == y ? 1.0 : 0.0)) / static_cast<double>(b);
        }
    }
    r.loss = loss / static_cast<double>(b);
    return r;
}

void adam_step(Model& model, const GradMap& grads, AdamState& state, double lr) {
    for (const auto& [key, g] : grads) {
        const auto it = model.trainable.find(key);
        if (it == model.trainable.end()) {
            throw StateError("gradient for unknown slot (" + std::to_string(key.layer) + ", " +
                             key.name + ")");
        }
        if (!it->second) {
            throw StateError("gradient for frozen slot (" + std::to_string(key.layer) + ", " +
                             key.name + ")");
        }
        if (!same_shape(g, model.params.at(key))) {
            throw ShapeError("gradient shape mismatch for (" + std::to_string(key.layer) + ", " +
                             key.name + ")");
        }
    }
    for (const auto& [key, flag] : model.trainable) {
        if (flag && grads.find(key) == grads.end()) {
            throw StateError("missing gradient for trainable slot (" + std::to_string(key.layer) +
                             ", " + key.name + ")");
        }
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (const auto& [key, g] : grads) {
        Tensor& p = model.params.at(key);
        auto mit = state.m.find(key);
        if (mit == state.m.end()) {
            mit = state.m.emplace(key, Tensor(p.shape())).first;
            state.v.emplace(key, Tensor(p.shape()));
        }
        Tensor& mom = mit->second;
        Tensor& vel = state.v.at(key);
        if (!same_shape(mom, p)) throw ShapeError("adam moment shape mismatch");
        for (std::int64_t j = 0; j < p.size(); ++j) {
            mom[j] = state.beta1 * mom[j] + (1.0 - state.beta1) * g[j];
            vel[j] = state.beta2 * vel[j] + (1.0 - state.beta2) * g[j] * g[j];
            const double mhat = mom[j] / bc1;
            const double vhat = vel[j] / bc2;
            p[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

Model build_backbone(const std::string& name, std::int64_t channels, std::int64_t length,
                     std::int64_t classes, std::uint64_t seed) {
    if (channels < 1 || length < 1 || classes < 2) {
        throw ShapeError("backbone needs channels >= 1, length >= 1, classes >= 2");
    }
    using L = LayerSpec;
    if (name == "calanet-toy") {
        std::vector<LayerSpec> layers{
            L::conv1d(channels, 8, 5, 1, 2), L::batchnorm(8),  L::relu(), L::maxpool(2),
            L::conv1d(8, 16, 5, 1, 2),       L::batchnorm(16), L::relu(), L::maxpool(2),
            L::conv1d(16, 32, 3, 1, 1),      L::batchnorm(32), L::relu(),
            L::global_avg_pool(),            L::dense(32, classes),
        };
        return build_model(std::move(layers), {channels, length}, seed);
    }
    const auto side = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(length))));
    if (name == "tresnet-toy" || name == "mobilenet-toy") {
        if (side * side != length) {
            throw ShapeError("2d backbones fold the window to a square; length must be a perfect square");
        }
    }
    if (name == "tresnet-toy") {
        std::vector<LayerSpec> layers{
            L::conv2d(channels, 8, 3, 1, 1), L::batchnorm(8), L::relu(),
            // residual block 1
            L::skip_save(), L::conv2d(8, 8, 3, 1, 1), L::batchnorm(8), L::relu(),
            L::conv2d(8, 8, 3, 1, 1), L::batchnorm(8), L::skip_add(), L::relu(),
            L::maxpool(2),
            // residual block 2
            L::skip_save(), L::conv2d(8, 8, 3, 1, 1), L::batchnorm(8), L::relu(),
            L::conv2d(8, 8, 3, 1, 1), L::batchnorm(8), L::skip_add(), L::relu(),
            L::global_avg_pool(), L::dense(8, classes),
        };
        return build_model(std::move(layers), {channels, side, side}, seed);
    }
    if (name == "mobilenet-toy") {
        std::vector<LayerSpec> layers{
            L::conv2d(channels, 8, 3, 1, 1), L::batchnorm(8), L::relu(),
            // separable-style block 1: 3x3 then 1x1
            L::conv2d(8, 8, 3, 1, 1), L::batchnorm(8), L::relu(),
            L::conv2d(8, 16, 1, 1, 0), L::batchnorm(16), L::relu(),
            L::maxpool(2),
            // separable-style block 2
            L::conv2d(16, 16, 3, 1, 1), L::batchnorm(16), L::relu(),
            L::conv2d(16, 32, 1, 1, 0), L::batchnorm(32), L::relu(),
            L::global_avg_pool(), L::dense(32, classes),
        };
        return build_model(std::move(layers), {channels, side, side}, seed);
    }
    throw IoError("unknown backbone: " + name);
}

std::vector<std::string> backbone_names() {
    return {"calanet-toy", "tresnet-toy", "mobilenet-toy"};
}

std::int64_t analytic_flops(const Model& m) {
    const std::vector<Shape> shapes = infer_shapes(m.layers, m.input_shape);
    std::int64_t total = 0;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const LayerSpec& spec = m.layers[i];
        const Shape& out = shapes[i];
        switch (spec.kind) {
            case LayerKind::Conv1D:
            case LayerKind::Conv2D: {
                const std::int64_t per_kernel =
                    spec.kind == LayerKind::Conv1D ? spec.kernel : spec.kernel * spec.kernel;
                std::int64_t out_locs = 1;
                for (std::size_t d = 1; d < out.size(); ++d) out_locs *= out[d];
                total += spec.c_out * out_locs * (spec.c_in * per_kernel + (spec.bias ? 1 : 0));
                break;
            }
            case LayerKind::Dense:
                total += spec.out * (spec.in + (spec.bias ? 1 : 0));
                break;
            default:
                break;
        }
    }
    return total;
}

} // namespace loraedge::nn
