"""Multiparty transformer with directional cross-person attention, built on a small numpy autodiff engine."""

from .attention import CPAParams, Direction, cpa, cpa_multihead, self_attention
from .blocks import CPTLayerParams, CPTStack, cpt_forward, cpt_layer
from .data import EngagementClass, GroupWindow, bin_continuous_label, load_jsonl, save_jsonl
from .encoder import EncoderParams, encode, positional_encoding
from .model import ModelConfig, MultiparT, Prediction, count_parameters, load_checkpoint, save_checkpoint
from .synthetic import ContingencySpec, attention_lag_score, generate, preset, uniform_causal_baseline
from .tensor import Tensor
from .training import FocalConfig, MetricsReport, OptimizerConfig, compute_metrics, focal_loss, train

__all__ = [
    "CPAParams", "Direction", "cpa", "cpa_multihead", "self_attention",
    "CPTLayerParams", "CPTStack", "cpt_forward", "cpt_layer",
    "EngagementClass", "GroupWindow", "bin_continuous_label", "load_jsonl", "save_jsonl",
    "EncoderParams", "encode", "positional_encoding",
    "ModelConfig", "MultiparT", "Prediction", "count_parameters", "load_checkpoint", "save_checkpoint",
    "ContingencySpec", "attention_lag_score", "generate", "preset", "uniform_causal_baseline",
    "Tensor",
    "FocalConfig", "MetricsReport", "OptimizerConfig", "compute_metrics", "focal_loss", "train",
]
