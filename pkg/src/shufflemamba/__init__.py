"""Shuffle-scan state-space fusion for multi-modal images, built on numpy."""

from .blocks import PatchGrid, patch_embed, rcim_block, rm_block, rmim_block
from .net import FusionNet, NetworkConfig, Sample, loss_mif, loss_pansharpen
from .rng import RngStream
from .shuffle import Permutation, apply_inverse_shuffle, apply_shuffle, sample_permutation
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "FusionNet", "NetworkConfig", "PatchGrid", "Permutation", "RngStream", "Sample", "Tensor",
    "apply_inverse_shuffle", "apply_shuffle", "loss_mif", "loss_pansharpen", "no_grad",
    "patch_embed", "rcim_block", "rm_block", "rmim_block", "sample_permutation",
]
