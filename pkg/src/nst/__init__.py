"""Neuron selectivity transfer: kernel-MMD feature distillation with KD, FitNet and AT baselines."""

from .losses import AT, KD, NST, Combined, FitNet, LossValue, total_loss
from .mmd import KernelSpec, MmdResult, mmd_sq, mmd_sq_normalized
from .net import LayerSpec, Network, SgdConfig

__all__ = [
    "AT", "KD", "NST", "Combined", "FitNet", "LossValue", "total_loss",
    "KernelSpec", "MmdResult", "mmd_sq", "mmd_sq_normalized",
    "LayerSpec", "Network", "SgdConfig",
]
__version__ = "0.1.0"
