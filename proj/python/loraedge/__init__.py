"""TT-SVD conv adapters: factorize pre-trained kernels into tensor-train
cores, train the output-side core on a zero-initialized parallel path, and
merge back into dense kernels for deployment."""

from loraedge._core import (
    Dataset,
    IoError,
    Model,
    NumericError,
    ShapeError,
    StateError,
    analytic_flops,
    apply_bias_tuning,
    apply_bn_tuning,
    apply_shift,
    attach_lora_c,
    attach_lora_edge,
    attach_lora_linear,
    backbone_names,
    build_backbone,
    evaluate,
    finetune,
    format_param_report,
    gen_synthetic,
    load_dataset,
    load_model,
    macro_f1,
    merge_adapters,
    param_report,
    predict,
    prepare_method,
    pretrain,
    randomize_frozen_cores,
    save_dataset,
    save_model,
    split_dataset,
    tt_param_count,
    tt_reconstruct,
    tt_svd,
    truncated_svd,
)

__all__ = [
    "Dataset",
    "IoError",
    "Model",
    "NumericError",
    "ShapeError",
    "StateError",
    "analytic_flops",
    "apply_bias_tuning",
    "apply_bn_tuning",
    "apply_shift",
    "attach_lora_c",
    "attach_lora_edge",
    "attach_lora_linear",
    "backbone_names",
    "build_backbone",
    "evaluate",
    "finetune",
    "format_param_report",
    "gen_synthetic",
    "load_dataset",
    "load_model",
    "macro_f1",
    "merge_adapters",
    "param_report",
    "predict",
    "prepare_method",
    "pretrain",
    "randomize_frozen_cores",
    "save_dataset",
    "save_model",
    "split_dataset",
    "tt_param_count",
    "tt_reconstruct",
    "tt_svd",
    "truncated_svd",
]
