"""Temporal-attention change detection for street-view image pairs, in plain numpy."""

from .attention import (
    ScopeSpec,
    TAParams,
    chva_forward,
    export_attention_heatmaps,
    fuse_chva,
    local_attention,
    ta_naive_oracle,
    temporal_attention_forward,
)
from .data import DatasetSpec, ImagePair, load_from_spec, pcd_preprocess, synth_generate, vlcmucd_split
from .metrics import MetricAccumulator, MetricsReport, binarize, confusion, prf1
from .network import ChangeNet, ModelConfig, ModelStats, count_macs, count_params, count_stats, model_forward
from .training import TrainConfig, adam_step, bce_loss, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ScopeSpec",
    "TAParams",
    "chva_forward",
    "export_attention_heatmaps",
    "fuse_chva",
    "local_attention",
    "ta_naive_oracle",
    "temporal_attention_forward",
    "DatasetSpec",
    "ImagePair",
    "load_from_spec",
    "pcd_preprocess",
    "synth_generate",
    "vlcmucd_split",
    "MetricAccumulator",
    "MetricsReport",
    "binarize",
    "confusion",
    "prf1",
    "ChangeNet",
    "ModelConfig",
    "ModelStats",
    "count_macs",
    "count_params",
    "count_stats",
    "model_forward",
    "TrainConfig",
    "adam_step",
    "bce_loss",
    "evaluate",
    "train",
]
