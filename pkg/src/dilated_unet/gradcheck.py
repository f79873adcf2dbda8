"""Central-difference gradient checking.

In ``f64`` mode both the analytic gradient and the finite differences are
computed with every parameter promoted to float64.  In ``f32`` mode the
analytic gradient comes from the ordinary float32 graph, while the finite
differences are still taken on the float64 shadow: float32 central
differences at ``h=1e-3`` carry ~1e-4 of rounding noise by themselves, which
would swamp the quantity being measured.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def _analytic(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    return [
        np.zeros_like(p.data, dtype=np.float64) if p.grad is None else p.grad.astype(np.float64)
        for p in params
    ]


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-3,
    mode: str = "f32",
    coords: dict[int, np.ndarray] | None = None,
) -> float:
    """Max over checked coordinates of ``|a-n| / max(|a|, |n|, 1e-8)``.

    ``f`` is re-evaluated from scratch on every call and must close over
    ``params``.  ``coords`` optionally restricts the check to a subset of flat
    indices per parameter position (used for large models).
    """
    if mode not in ("f32", "f64"):
        raise ValueError(f"mode must be 'f32' or 'f64', got {mode!r}")
    originals = [p.data for p in params]
    try:
        if mode == "f64":
            for p in params:
                p.data = p.data.astype(np.float64)
        analytic = _analytic(f, params)
        for p in params:
            p.data = p.data.astype(np.float64)

        worst = 0.0
        for pos, p in enumerate(params):
            flat = p.data.reshape(-1)
            idx = range(flat.size) if coords is None else coords.get(pos, ())
            a_flat = analytic[pos].reshape(-1)
            for i in idx:
                keep = flat[i]
                flat[i] = keep + h
                fp = float(f().data)
                flat[i] = keep - h
                fm = float(f().data)
                flat[i] = keep
                num = (fp - fm) / (2.0 * h)
                a = float(a_flat[i])
                err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                worst = max(worst, err)
        return worst
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
            p.grad = None


def block_pair_check(seed: int, mode: str = "f32", h: float = 1e-5) -> float:
    """Check a 4x4, dim-4, 1-head block pair w.r.t. its input and every parameter.

    Parameters are drawn around the usual initialisation with N(0, 0.3)
    noise added, so LayerNorm gains, biases and the positional table are all
    away from their degenerate starting values.
    """
    from . import tensor as T
    from .attention import AttentionSpec
    from .block import block_pair_forward, init_block
    from .rng import Rng
    from .unet import named_parameters

    rng = Rng(seed)
    na, dina = AttentionSpec(3, 1, 1, 4), AttentionSpec(3, 2, 1, 4)
    params = init_block(na, dina, 4, rng)
    for _, t in named_parameters(params):
        t.data = (t.data + rng.normal(t.data.size).reshape(t.shape) * 0.3).astype(np.float32)
    x = Tensor(rng.normal(64).reshape(4, 4, 4).astype(np.float32), requires_grad=True)
    probe = Tensor(rng.normal(64).reshape(4, 4, 4).astype(np.float32))
    leaves = [x] + [t for _, t in named_parameters(params)]

    def f():
        return T.sum(T.mul(block_pair_forward(x, params, na, dina), probe))

    return grad_check(f, leaves, h=h, mode=mode)


def micro_model_check(seed: int, mode: str = "f32", n_coords: int = 20, h: float = 1e-5) -> float:
    """End-to-end check of a 32x32, C=4, single-head model under the combined loss.

    ``n_coords`` flat coordinates are drawn uniformly from all parameters.
    As in :func:`block_pair_check` the parameters get N(0, 0.3) noise first:
    at the std-0.02 initialisation most gradients of this depth are around
    1e-13, below what a central difference on an O(1) loss can resolve.
    """
    from .rng import Rng
    from .training import combined_loss
    from .unet import DilatedUNet, ModelConfig

    config = ModelConfig(input_size=32, embed_dim=4, stage_depths=(1, 1, 1, 1),
                         decoder_depths=(1, 1, 1), heads=(1, 1, 1, 1), num_classes=2)
    model = DilatedUNet(config, seed=seed)
    rng = Rng(seed + 1)
    for p in model.parameters():
        p.data = (p.data + rng.normal(p.data.size).reshape(p.shape) * 0.3).astype(np.float32)
    image = Tensor(rng.uniform(32 * 32).reshape(1, 32, 32, 1).astype(np.float32))
    target = (rng.uniform(32 * 32).reshape(1, 32, 32) < 0.5).astype(np.int64)
    params = model.parameters()

    sizes = np.array([p.data.size for p in params])
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    picks = rng.integers(int(sizes.sum()), n_coords)
    coords: dict[int, list[int]] = {}
    for flat in picks:
        pos = int(np.searchsorted(starts, flat, side="right") - 1)
        coords.setdefault(pos, []).append(int(flat - starts[pos]))

    def f():
        return combined_loss(model(image), target)

    return grad_check(f, params, h=h, mode=mode, coords={k: np.array(v) for k, v in coords.items()})
