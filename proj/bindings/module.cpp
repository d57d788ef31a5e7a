// Python bindings for the main operations: TT factorization, backbones,
// adapter attachment/merge, the synthetic-shift data tools, and the
// experiment loop. Tensors cross the boundary as numpy float64 arrays.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <vector>

#include "loraedge/data.hpp"
#include "loraedge/harness.hpp"
#include "loraedge/io.hpp"
#include "loraedge/nn.hpp"
#include "loraedge/peft.hpp"
#include "loraedge/svd.hpp"
#include "loraedge/tt.hpp"

namespace py = pybind11;
using namespace loraedge;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor tensor_from_array(const DoubleArray& a) {
    py::buffer_info info = a.request();
    if (info.ndim < 1) throw ShapeError("expected an array with at least one dimension");
    Shape shape(info.shape.begin(), info.shape.end());
    const auto* src = static_cast<const double*>(info.ptr);
    return Tensor(std::move(shape), std::vector<double>(src, src + info.size));
}

py::array_t<double> array_from_tensor(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> out(shape);
    std::copy(t.data(), t.data() + t.size(), static_cast<double*>(out.request().ptr));
    return out;
}

py::array_t<std::int64_t> array_from_confusion(const harness::ConfusionMatrix& c) {
    const py::ssize_t n = static_cast<py::ssize_t>(c.size());
    py::array_t<std::int64_t> out({n, n});
    auto* dst = static_cast<std::int64_t*>(out.request().ptr);
    for (py::ssize_t i = 0; i < n; ++i)
        for (py::ssize_t j = 0; j < n; ++j) *dst++ = c[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    return out;
}

harness::ConfusionMatrix confusion_from_array(const py::array_t<std::int64_t>& a) {
    py::buffer_info info = a.request();
    if (info.ndim != 2 || info.shape[0] != info.shape[1])
        throw ShapeError("confusion matrix must be square");
    const auto n = static_cast<std::size_t>(info.shape[0]);
    harness::ConfusionMatrix c(n, std::vector<std::int64_t>(n));
    const auto* src = static_cast<const std::int64_t*>(info.ptr);
    const auto row = info.strides[0] / static_cast<py::ssize_t>(sizeof(std::int64_t));
    const auto col = info.strides[1] / static_cast<py::ssize_t>(sizeof(std::int64_t));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            c[i][j] = src[static_cast<py::ssize_t>(i) * row + static_cast<py::ssize_t>(j) * col];
    return c;
}

harness::ExperimentConfig config_from_kwargs(const std::string& method, std::int64_t rank,
                                             double sigma2, std::vector<int> trainable_cores,
                                             std::optional<bool> zero_init_core1, bool train_head,
                                             std::int64_t steps, std::int64_t batch,
                                             std::optional<double> lr, std::int64_t eval_interval,
                                             double train_fraction, std::uint64_t seed) {
    harness::ExperimentConfig cfg;
    cfg.method = harness::method_from_name(method);
    cfg.rank = rank;
    cfg.sigma2 = sigma2;
    cfg.trainable_cores = std::move(trainable_cores);
    cfg.zero_init_core1 = zero_init_core1;
    cfg.train_head = train_head;
    cfg.steps = steps;
    cfg.batch = batch;
    cfg.lr = lr;
    cfg.eval_interval = eval_interval;
    cfg.train_fraction = train_fraction;
    cfg.seed = seed;
    return cfg;
}

py::dict dict_from_run(const harness::RunResult& r) {
    py::dict out;
    out["loss"] = r.loss;
    py::list curve;
    for (const auto& p : r.curve) curve.append(py::make_tuple(p.step, p.f1));
    out["curve"] = curve;
    out["confusion"] = array_from_confusion(r.confusion);
    out["zero_shot_f1"] = r.zero_shot_f1;
    out["final_f1"] = r.final_f1;
    out["trainable_params"] = r.params.trainable_total;
    out["full_ft_params"] = r.params.full_ft_total;
    out["trainable_percent"] = r.params.percent;
    out["train_seconds"] = r.train_seconds;
    return out;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "TT-SVD conv adapters: factorization, attachment, merge, and the "
              "synthetic-shift experiment loop";

    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
    py::register_exception<IoError>(m, "IoError", PyExc_IOError);
    py::register_exception<StateError>(m, "StateError", PyExc_RuntimeError);

    // ---- tensor-train ----
    m.def(
        "tt_svd",
        [](const DoubleArray& w, std::int64_t r_target) {
            const tt::TTCores cores = tt::tt_svd(tensor_from_array(w), r_target);
            py::list out;
            for (const auto& c : cores.cores) out.append(array_from_tensor(c));
            return out;
        },
        py::arg("w"), py::arg("r_target"),
        "Sequential truncated-SVD factorization into tensor-train cores "
        "[r_{k-1}, n_k, r_k]; every internal rank is clamped to the unfolding size.");
    m.def(
        "tt_reconstruct",
        [](const std::vector<DoubleArray>& cores, const std::vector<std::int64_t>& shape) {
            tt::TTCores c;
            for (const auto& a : cores) c.cores.push_back(tensor_from_array(a));
            return array_from_tensor(tt::tt_reconstruct(c, shape));
        },
        py::arg("cores"), py::arg("shape"),
        "Contract tensor-train cores back to the dense tensor of the given shape.");
    m.def(
        "tt_param_count",
        [](const std::vector<std::int64_t>& shape, std::int64_t r_target) {
            const tt::TTParamCount c = tt::tt_param_count(shape, r_target);
            return py::make_tuple(c.per_core, c.total);
        },
        py::arg("shape"), py::arg("r_target"),
        "Per-core element counts and their total, without decomposing.");
    m.def(
        "truncated_svd",
        [](const DoubleArray& a, std::int64_t r) {
            const linalg::SvdResult s = linalg::truncated_svd(tensor_from_array(a), r);
            return py::make_tuple(array_from_tensor(s.u), s.singular_values,
                                  array_from_tensor(s.vt));
        },
        py::arg("a"), py::arg("r"), "Rank-truncated thin SVD of a 2-d array: (u, s, vt).");

    // ---- models ----
    py::class_<nn::Model>(m, "Model")
        .def_property_readonly("input_shape", [](const nn::Model& m_) { return m_.input_shape; })
        .def_property_readonly("n_layers",
                               [](const nn::Model& m_) { return m_.layers.size(); })
        .def_property_readonly("n_adapters",
                               [](const nn::Model& m_) { return m_.adapters.size(); })
        .def("trainable_count", &nn::Model::trainable_count)
        .def("backbone_param_count", &nn::Model::backbone_param_count)
        .def("__deepcopy__", [](const nn::Model& m_, py::dict) { return nn::Model(m_); })
        .def("__copy__", [](const nn::Model& m_) { return nn::Model(m_); });

    m.def("backbone_names", &nn::backbone_names);
    m.def("build_backbone", &nn::build_backbone, py::arg("name"), py::arg("channels"),
          py::arg("length"), py::arg("classes"), py::arg("seed"),
          "Seeded toy backbone: calanet-toy (1-d), tresnet-toy or mobilenet-toy (2-d).");
    m.def(
        "predict",
        [](const nn::Model& model, const DoubleArray& x) {
            return array_from_tensor(nn::predict(model, tensor_from_array(x)));
        },
        py::arg("model"), py::arg("x"),
        "Eval-mode logits for a batch shaped [n, *model.input_shape].");
    m.def("analytic_flops", &nn::analytic_flops, py::arg("model"));

    // ---- adapters ----
    m.def(
        "attach_lora_edge",
        [](nn::Model& model, std::int64_t r_target, std::vector<int> trainable_cores,
           std::optional<bool> zero_init_core1, bool train_head) {
            peft::attach_lora_edge(model, {r_target, std::move(trainable_cores), zero_init_core1,
                                           train_head});
        },
        py::arg("model"), py::arg("r_target") = 2,
        py::arg("trainable_cores") = std::vector<int>{1}, py::arg("zero_init_core1") = py::none(),
        py::arg("train_head") = false,
        "Factorize every conv kernel into TT cores on a parallel path and mark "
        "the selected cores trainable; the output-side core starts at zero by default.");
    m.def(
        "attach_lora_c",
        [](nn::Model& model, std::int64_t rank, double sigma2, bool kernel_scaled,
           std::uint64_t seed, bool train_head) {
            peft::attach_lora_c(model, {rank, sigma2, kernel_scaled, seed, train_head});
        },
        py::arg("model"), py::arg("rank") = 1, py::arg("sigma2") = 1e-3,
        py::arg("kernel_scaled") = false, py::arg("seed") = 0, py::arg("train_head") = false,
        "Matrix LoRA over flattened conv kernels (A random, B zero).");
    m.def(
        "attach_lora_linear",
        [](nn::Model& model, std::int64_t rank, double sigma2, std::uint64_t seed) {
            peft::attach_lora_linear(model, {rank, sigma2, seed});
        },
        py::arg("model"), py::arg("rank") = 1, py::arg("sigma2") = 1e-3, py::arg("seed") = 0,
        "Matrix LoRA on dense layers.");
    m.def("apply_bias_tuning", &peft::apply_bias_tuning, py::arg("model"));
    m.def("apply_bn_tuning", &peft::apply_bn_tuning, py::arg("model"));
    m.def("merge_adapters", &peft::merge_adapters, py::arg("model"),
          "Fold every adapter delta into its dense kernel and drop the side path.");
    m.def("randomize_frozen_cores", &peft::randomize_frozen_cores, py::arg("model"),
          py::arg("sigma2"), py::arg("seed"),
          "Replace the frozen TT cores with N(0, sigma2) draws, keeping the "
          "trained core at zero (ablation control).");
    m.def(
        "param_report",
        [](const nn::Model& model) {
            const peft::ParamReport r = peft::param_report(model);
            py::dict out;
            out["trainable_total"] = r.trainable_total;
            out["full_ft_total"] = r.full_ft_total;
            out["percent"] = r.percent;
            return out;
        },
        py::arg("model"));
    m.def(
        "format_param_report",
        [](const nn::Model& model) { return peft::format_param_report(peft::param_report(model)); },
        py::arg("model"), "Human-readable per-layer parameter table.");

    // ---- data ----
    py::class_<data::WindowDataset>(m, "Dataset")
        .def_property_readonly("windows",
                               [](const data::WindowDataset& d) { return array_from_tensor(d.windows); })
        .def_property_readonly("labels", [](const data::WindowDataset& d) { return d.labels; })
        .def_property_readonly("class_count",
                               [](const data::WindowDataset& d) { return d.class_count; })
        .def_property_readonly("domain_tag",
                               [](const data::WindowDataset& d) { return d.domain_tag; })
        .def("__len__", &data::WindowDataset::size);

    m.def("gen_synthetic", &data::gen_synthetic, py::arg("classes"), py::arg("channels"),
          py::arg("length"), py::arg("n_per_class"), py::arg("seed"),
          "Deterministic multi-channel signal families; class identity lives in "
          "cross-channel structure so channel-mixing shifts hurt.");
    m.def(
        "apply_shift",
        [](const data::WindowDataset& d, const std::string& spec) {
            const auto [parsed, active] = data::parse_shift_spec(spec);
            return active ? data::apply_shift(d, parsed) : d;
        },
        py::arg("dataset"), py::arg("spec"),
        "Apply a domain shift described as 'kind,key=value,...' "
        "(rotation, channel-permutation, gain-offset, user-style) or 'none'.");
    m.def(
        "split_dataset",
        [](const data::WindowDataset& d, double train_fraction) {
            const data::SplitResult s = data::split_dataset(d, train_fraction);
            return py::make_tuple(s.train, s.test);
        },
        py::arg("dataset"), py::arg("train_fraction"),
        "Stratified deterministic (train, test) split.");

    // ---- persistence ----
    m.def("save_model", &io::save_model, py::arg("model"), py::arg("dir"));
    m.def("load_model", &io::load_model, py::arg("dir"));
    m.def("save_dataset", &io::save_dataset, py::arg("dataset"), py::arg("dir"));
    m.def("load_dataset", &io::load_dataset, py::arg("dir"));

    // ---- experiment loop ----
    m.def(
        "macro_f1",
        [](const py::array_t<std::int64_t>& confusion) {
            return harness::macro_f1(confusion_from_array(confusion));
        },
        py::arg("confusion"), "Unweighted mean per-class F1 of a [truth, pred] matrix.");
    m.def(
        "evaluate",
        [](const nn::Model& model, const data::WindowDataset& d, std::int64_t batch) {
            const harness::EvalResult r = harness::evaluate(model, d, batch);
            return py::make_tuple(r.f1, array_from_confusion(r.confusion));
        },
        py::arg("model"), py::arg("dataset"), py::arg("batch") = 64,
        "Eval-mode (macro_f1, confusion) over the whole dataset.");
    m.def("pretrain", &harness::pretrain, py::arg("model"), py::arg("source"), py::arg("steps"),
          py::arg("lr"), py::arg("seed"), py::arg("batch") = 64, py::arg("train_fraction") = 0.8,
          "Full fine-tuning on a split of `source`; returns held-out macro-F1.");
    m.def(
        "prepare_method",
        [](nn::Model& model, const std::string& method, std::int64_t rank, double sigma2,
           std::vector<int> trainable_cores, std::optional<bool> zero_init_core1, bool train_head,
           std::uint64_t seed) {
            harness::prepare_method(
                model, config_from_kwargs(method, rank, sigma2, std::move(trainable_cores),
                                          zero_init_core1, train_head, 0, 64, std::nullopt, 1, 0.8,
                                          seed));
        },
        py::arg("model"), py::arg("method"), py::arg("rank") = 2, py::arg("sigma2") = 1e-3,
        py::arg("trainable_cores") = std::vector<int>{1}, py::arg("zero_init_core1") = py::none(),
        py::arg("train_head") = false, py::arg("seed") = 0,
        "Attach or mask one of: lora-edge, lora-c, lora-linear, bias, bn, full.");
    m.def(
        "finetune",
        [](nn::Model& model, const data::WindowDataset& target, const std::string& method,
           std::int64_t rank, double sigma2, std::vector<int> trainable_cores,
           std::optional<bool> zero_init_core1, bool train_head, std::int64_t steps,
           std::int64_t batch, std::optional<double> lr, std::int64_t eval_interval,
           double train_fraction, std::uint64_t seed) {
            return dict_from_run(harness::finetune(
                model, target,
                config_from_kwargs(method, rank, sigma2, std::move(trainable_cores),
                                   zero_init_core1, train_head, steps, batch, lr, eval_interval,
                                   train_fraction, seed)));
        },
        py::arg("model"), py::arg("target"), py::arg("method") = "lora-edge", py::arg("rank") = 2,
        py::arg("sigma2") = 1e-3, py::arg("trainable_cores") = std::vector<int>{1},
        py::arg("zero_init_core1") = py::none(), py::arg("train_head") = false,
        py::arg("steps") = 50, py::arg("batch") = 64, py::arg("lr") = py::none(),
        py::arg("eval_interval") = 1, py::arg("train_fraction") = 0.8, py::arg("seed") = 0,
        "Split `target`, run Adam on the train side, track held-out macro-F1. "
        "The model must already be prepared for `method`.");
}
