"""The paired NA / DiNA transformer block.

One block pair runs, in order::

    z1_hat = NA(LN(z0)) + z0
    z1     = MLP(LN(z1_hat)) + z1_hat
    z2_hat = DiNA(LN(z1)) + z1
    z2     = MLP(LN(z2_hat)) + z2_hat
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionSpec, QkvParams, dina_forward, init_qkv, na_forward
from .errors import ShapeError
from .tensor import Tensor


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class MlpParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class BlockParams:
    norm1: NormParams
    attn_na: QkvParams
    norm2: NormParams
    mlp1: MlpParams
    norm3: NormParams
    attn_dina: QkvParams
    norm4: NormParams
    mlp2: MlpParams


def init_norm(dim: int) -> NormParams:
    return NormParams(
        Tensor(np.ones(dim, np.float32), requires_grad=True),
        Tensor(np.zeros(dim, np.float32), requires_grad=True),
    )


def init_mlp(dim: int, ratio: int, rng, std: float = 0.02) -> MlpParams:
    hidden = ratio * dim
    return MlpParams(
        w1=Tensor(rng.trunc_normal((dim, hidden), std).astype(np.float32), requires_grad=True),
        b1=Tensor(np.zeros(hidden, np.float32), requires_grad=True),
        w2=Tensor(rng.trunc_normal((hidden, dim), std).astype(np.float32), requires_grad=True),
        b2=Tensor(np.zeros(dim, np.float32), requires_grad=True),
    )


def init_block(spec_na: AttentionSpec, spec_dina: AttentionSpec, mlp_ratio: int, rng) -> BlockParams:
    dim = spec_na.dim
    return BlockParams(
        norm1=init_norm(dim),
        attn_na=init_qkv(spec_na, rng),
        norm2=init_norm(dim),
        mlp1=init_mlp(dim, mlp_ratio, rng),
        norm3=init_norm(dim),
        attn_dina=init_qkv(spec_dina, rng),
        norm4=init_norm(dim),
        mlp2=init_mlp(dim, mlp_ratio, rng),
    )


def mlp_forward(x: Tensor, p: MlpParams) -> Tensor:
    if x.shape[-1] != p.w1.shape[0]:
        raise ShapeError(f"mlp input {x.shape} does not match w1 {p.w1.shape}")
    return T.linear(T.gelu(T.linear(x, p.w1, p.b1)), p.w2, p.b2)


def _ln(x: Tensor, n: NormParams) -> Tensor:
    return T.layer_norm(x, n.gamma, n.beta)


def block_pair_forward(
    z_prev: Tensor,
    p: BlockParams,
    spec_na: AttentionSpec,
    spec_dina: AttentionSpec,
    debug: bool = False,
):
    """Run one NA + DiNA block pair; ``debug`` also returns the intermediates."""
    if spec_na.dilation != 1:
        raise ValueError("the first half of a block pair must be plain NA (dilation 1)")
    if z_prev.shape[-1] != spec_na.dim or spec_na.dim != spec_dina.dim:
        raise ShapeError(
            f"block input {z_prev.shape} vs attention dims {spec_na.dim}/{spec_dina.dim}"
        )
    z1_hat = T.add(na_forward(_ln(z_prev, p.norm1), p.attn_na, spec_na), z_prev)
    z1 = T.add(mlp_forward(_ln(z1_hat, p.norm2), p.mlp1), z1_hat)
    z2_hat = T.add(dina_forward(_ln(z1, p.norm3), p.attn_dina, spec_dina), z1)
    z2 = T.add(mlp_forward(_ln(z2_hat, p.norm4), p.mlp2), z2_hat)
    if debug:
        return z2, {"z1_hat": z1_hat, "z1": z1, "z2_hat": z2_hat, "z2": z2}
    return z2
