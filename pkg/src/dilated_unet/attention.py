"""Neighborhood attention (NA) and dilated neighborhood attention (DiNA).

The kernel is gather based: for every (H, W, k, dilation) the neighbor index
table is computed once and cached, keys/values are gathered into a
``[S, K]`` neighborhood layout, and attention runs over the ``K`` gathered
tokens only.  ``oracle_masked_attention`` is the deliberately naive dense
reference the kernel is checked against.

Border rule: a query's window lives on its own dilation sub-grid (tokens
congruent to it modulo the dilation) and is shifted to stay inside the map,
so interior queries are centred and border queries keep the full window.
When a sub-grid is shorter than the kernel the window shrinks to the whole
sub-grid.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class AttentionSpec:
    kernel_size: int
    dilation: int
    heads: int
    head_dim: int
    use_positional_bias: bool = True

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.heads < 1 or self.head_dim < 1:
            raise ValueError("heads and head_dim must be positive")

    @property
    def dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def bias_side(self) -> int:
        return 2 * self.dilation * (self.kernel_size - 1) + 1


@dataclass
class QkvParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_o: Tensor
    rpb: Tensor | None = None  # [heads, side, side], side = 2*dilation*(k-1)+1


def init_qkv(spec: AttentionSpec, rng, std: float = 0.02) -> QkvParams:
    d = spec.dim

    def proj():
        return Tensor(rng.trunc_normal((d, d), std).astype(np.float32), requires_grad=True)

    rpb = None
    if spec.use_positional_bias:
        side = spec.bias_side
        rpb = Tensor(np.zeros((spec.heads, side, side), np.float32), requires_grad=True)
    return QkvParams(
        w_q=proj(), w_k=proj(), w_v=proj(), w_o=proj(),
        b_o=Tensor(np.zeros(d, np.float32), requires_grad=True),
        rpb=rpb,
    )


# ---------------------------------------------------------------------------
# neighborhoods
# ---------------------------------------------------------------------------


def neighborhood_indices_1d(S: int, k: int, dilation: int, i: int) -> list[int]:
    if not 0 <= i < S:
        raise IndexError(f"position {i} outside [0, {S})")
    r, pos = i % dilation, i // dilation
    n = (S - r + dilation - 1) // dilation  # length of i's sub-grid
    m = min(k, n)
    start = min(max(pos - m // 2, 0), n - m)
    return [r + dilation * (start + j) for j in range(m)]


def build_neighborhood_mask(H: int, W: int, k: int, dilation: int) -> np.ndarray:
    """Boolean ``[H*W, H*W]`` mask; entry (i, j) is true iff j is in i's neighborhood."""
    S = H * W
    mask = np.zeros((S, S), dtype=bool)
    rows = [neighborhood_indices_1d(H, k, dilation, a) for a in range(H)]
    cols = [neighborhood_indices_1d(W, k, dilation, b) for b in range(W)]
    for a in range(H):
        for b in range(W):
            for ra in rows[a]:
                mask[a * W + b, ra * W + np.asarray(cols[b])] = True
    return mask


@dataclass(frozen=True)
class _NeighborTable:
    index: np.ndarray       # [S, K] flat token index (padded slots repeat slot 0)
    additive: np.ndarray    # [S, K] 0 for real neighbors, -inf for padding
    offset: np.ndarray      # [S, K] flat index into the bias table
    K: int


@functools.lru_cache(maxsize=256)
def neighbor_table(H: int, W: int, k: int, dilation: int) -> _NeighborTable:
    rows = [neighborhood_indices_1d(H, k, dilation, a) for a in range(H)]
    cols = [neighborhood_indices_1d(W, k, dilation, b) for b in range(W)]
    K = max(len(r) for r in rows) * max(len(c) for c in cols)
    side = 2 * dilation * (k - 1) + 1
    centre = dilation * (k - 1)
    S = H * W
    index = np.zeros((S, K), dtype=np.int64)
    additive = np.full((S, K), -np.inf, dtype=np.float32)
    offset = np.zeros((S, K), dtype=np.int64)
    for a in range(H):
        for b in range(W):
            s = a * W + b
            nb = [(ra, cb) for ra in rows[a] for cb in cols[b]]
            for t, (ra, cb) in enumerate(nb):
                index[s, t] = ra * W + cb
                additive[s, t] = 0.0
                offset[s, t] = (ra - a + centre) * side + (cb - b + centre)
            index[s, len(nb):] = index[s, 0]
            offset[s, len(nb):] = offset[s, 0]
    for arr in (index, additive, offset):
        arr.setflags(write=False)
    return _NeighborTable(index, additive, offset, K)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def _check(x: Tensor, p: QkvParams, spec: AttentionSpec) -> None:
    if x.ndim < 3:
        raise ShapeError(f"attention input must be [..., H, W, dim], got {x.shape}")
    if x.shape[-1] != spec.dim or p.w_q.shape != (spec.dim, spec.dim):
        raise ShapeError(
            f"attention dim mismatch: input {x.shape}, heads*head_dim={spec.dim}, w_q {p.w_q.shape}"
        )
    if spec.use_positional_bias:
        want = (spec.heads, spec.bias_side, spec.bias_side)
        if p.rpb is None or p.rpb.shape != want:
            raise ShapeError(f"positional bias table must have shape {want}")


def dina_forward(x: Tensor, p: QkvParams, spec: AttentionSpec, return_weights: bool = False):
    """Dilated neighborhood self-attention over ``x[..., H, W, dim]``.

    With ``return_weights`` the softmax weights ``[B, S, heads, K]`` are
    returned as well (padding slots carry weight 0).
    """
    _check(x, p, spec)
    *lead, H, W, dim = x.shape
    B, S = math.prod(lead), H * W
    h, d = spec.heads, spec.head_dim
    tab = neighbor_table(H, W, spec.kernel_size, spec.dilation)

    xs = T.reshape(x, (B, S, dim))
    q = T.reshape(T.linear(xs, p.w_q), (B, S, h, d))
    k = T.reshape(T.linear(xs, p.w_k), (B, S, h, d))
    v = T.reshape(T.linear(xs, p.w_v), (B, S, h, d))
    flat = tab.index.reshape(-1)
    kn = T.reshape(T.take(k, flat, axis=1), (B, S, tab.K, h, d))
    vn = T.reshape(T.take(v, flat, axis=1), (B, S, tab.K, h, d))

    logits = T.scale(T.einsum("bshd,bskhd->bshk", q, kn), 1.0 / math.sqrt(d))
    if spec.use_positional_bias:
        table = T.reshape(p.rpb, (h, -1))
        bias = T.transpose(T.take(table, tab.offset, axis=1), (1, 0, 2))  # [S, h, K]
        logits = T.add(logits, bias)
    if tab.K > 1 and not np.all(tab.additive == 0):
        logits = T.add(logits, Tensor(tab.additive[:, None, :].astype(x.dtype)))
    attn = T.softmax_last(logits)
    out = T.reshape(T.einsum("bshk,bskhd->bshd", attn, vn), (B, S, dim))
    out = T.reshape(T.linear(out, p.w_o, p.b_o), tuple(lead) + (H, W, dim))
    if return_weights:
        return out, attn
    return out


def na_forward(x: Tensor, p: QkvParams, spec: AttentionSpec, return_weights: bool = False):
    """Neighborhood attention: the dilation-1 case of :func:`dina_forward`."""
    if spec.dilation != 1:
        raise ValueError(f"na_forward requires dilation 1, got {spec.dilation}")
    return dina_forward(x, p, spec, return_weights=return_weights)


def oracle_masked_attention(x, p: QkvParams, mask: np.ndarray, spec: AttentionSpec) -> Tensor:
    """Dense O(S^2) masked attention in float64 (verification reference).

    Accepts a single map ``[H, W, dim]``; logits outside ``mask`` are -inf.
    """
    xa = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    H, W, dim = xa.shape
    S = H * W
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (S, S):
        raise ShapeError(f"mask shape {mask.shape} does not match {S} tokens")
    if not mask.any(axis=1).all():
        raise ValueError("neighborhood mask has an empty row")
    h, d = spec.heads, spec.head_dim
    xs = xa.reshape(S, dim)
    f64 = lambda t: np.asarray(t.data, dtype=np.float64)  # noqa: E731
    q = (xs @ f64(p.w_q)).reshape(S, h, d)
    k = (xs @ f64(p.w_k)).reshape(S, h, d)
    v = (xs @ f64(p.w_v)).reshape(S, h, d)

    bias = np.zeros((h, S, S))
    if spec.use_positional_bias:
        rpb = f64(p.rpb)
        reach = spec.dilation * (spec.kernel_size - 1)
        rows, cols = np.divmod(np.arange(S), W)
        dr = rows[None, :] - rows[:, None]
        dc = cols[None, :] - cols[:, None]
        inside = (np.abs(dr) <= reach) & (np.abs(dc) <= reach)
        dr_i = np.clip(dr + reach, 0, 2 * reach)
        dc_i = np.clip(dc + reach, 0, 2 * reach)
        bias = np.where(inside[None], rpb[:, dr_i, dc_i], 0.0)

    heads_out = []
    for j in range(h):
        logits = q[:, j] @ k[:, j].T / math.sqrt(d) + bias[j]
        logits = np.where(mask, logits, -np.inf)
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        heads_out.append(w @ v[:, j])
    out = np.concatenate(heads_out, axis=1) @ f64(p.w_o) + f64(p.b_o)
    return Tensor(out.reshape(H, W, dim))
