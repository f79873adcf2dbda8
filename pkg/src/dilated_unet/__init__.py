"""Dilated-UNet: NA/DiNA transformer U-Net for 2-D segmentation, on a NumPy autodiff core."""

from .attention import (
    AttentionSpec,
    QkvParams,
    build_neighborhood_mask,
    dina_forward,
    na_forward,
    neighborhood_indices_1d,
    oracle_masked_attention,
)
from .gradcheck import grad_check
from .rng import Rng
from .tensor import Tensor, backward, no_grad
from .unet import DilatedUNet, ModelConfig, param_count, preset

__all__ = [
    "AttentionSpec",
    "DilatedUNet",
    "ModelConfig",
    "QkvParams",
    "Rng",
    "Tensor",
    "backward",
    "build_neighborhood_mask",
    "dina_forward",
    "grad_check",
    "na_forward",
    "neighborhood_indices_1d",
    "no_grad",
    "oracle_masked_attention",
    "param_count",
    "preset",
]

__version__ = "0.1.0"
