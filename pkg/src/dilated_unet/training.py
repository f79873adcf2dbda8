"""Losses, Adam, augmentation and the training loop."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DatasetError, LabelError, ShapeError
from .rng import Rng
from .tensor import Tensor

DICE_SMOOTH = 1e-5


@dataclass
class SegmentationSample:
    image: np.ndarray  # [H, W, channels] float32
    mask: np.ndarray  # [H, W] integer labels


def _one_hot(target, logits: Tensor) -> np.ndarray:
    target = np.asarray(target)
    cls = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise ShapeError(f"target {target.shape} does not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= cls):
        raise LabelError(f"labels must lie in [0, {cls}), got range [{target.min()}, {target.max()}]")
    return np.eye(cls, dtype=logits.dtype)[target.astype(np.int64)]


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean over pixels of ``-log softmax(logits)[target]``."""
    onehot = _one_hot(target, logits)
    n = onehot.size // onehot.shape[-1]
    return T.scale(T.sum(T.mul(T.log_softmax_last(logits), Tensor(onehot))), -1.0 / n)


def dice_loss(logits: Tensor, target, smooth: float = DICE_SMOOTH) -> Tensor:
    """Soft Dice loss, ``1 - mean_c (2 sum p g + s) / (sum p + sum g + s)``."""
    g = _one_hot(target, logits)
    p = T.softmax_last(logits)
    axes = tuple(range(logits.ndim - 1))
    inter = T.sum(T.mul(p, Tensor(g)), axis=axes)
    denom = T.add(T.sum(p, axis=axes), Tensor(g.sum(axis=axes) + smooth))
    ratio = T.div(T.add_scalar(T.scale(inter, 2.0), smooth), denom)
    return T.add_scalar(T.scale(T.mean(ratio), -1.0), 1.0)


def combined_loss(logits: Tensor, target, lambda_ce: float = 0.5, lambda_dice: float = 0.5) -> Tensor:
    if lambda_ce < 0 or lambda_dice < 0 or lambda_ce == lambda_dice == 0:
        raise ConfigError("loss weights must be >= 0 and not both zero")
    if lambda_dice == 0:
        return T.scale(cross_entropy(logits, target), lambda_ce)
    if lambda_ce == 0:
        return T.scale(dice_loss(logits, target), lambda_dice)
    return T.add(T.scale(cross_entropy(logits, target), lambda_ce),
                 T.scale(dice_loss(logits, target), lambda_dice))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-5
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decoupled: bool = False

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "OptimState":
        return cls(m=[np.zeros(p.shape) for p in params], v=[np.zeros(p.shape) for p in params], **kw)


def adam_step(params: Sequence[Tensor], state: OptimState) -> None:
    """One Adam update in place.

    Weight decay is L2-coupled (added to the gradient) unless
    ``state.decoupled`` is set, in which case it shrinks the weights directly.
    Moments are kept in float64.  Parameters without a gradient are treated
    as having a zero gradient.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, p in enumerate(params):
        g = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
        theta = p.data.astype(np.float64)
        if state.weight_decay and not state.decoupled:
            g = g + state.weight_decay * theta
        m = state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        if state.lr == 0:
            continue
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and state.decoupled:
            step = step + state.lr * state.weight_decay * theta
        p.data = (theta - step).astype(p.dtype)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def draw_transform(rng: Rng, flip: bool = True, rotate: bool = True) -> tuple[bool, bool, int]:
    """``(flip_horizontal, flip_vertical, quarter_turns)``, each flip with probability 1/2."""
    u = rng.uniform(3)
    return (flip and u[0] < 0.5, flip and u[1] < 0.5, int(u[2] * 4) if rotate else 0)


def apply_transform(sample: SegmentationSample, transform: tuple[bool, bool, int]) -> SegmentationSample:
    flip_h, flip_v, turns = transform
    img, msk = sample.image, sample.mask
    if turns % 2 and img.shape[0] != img.shape[1]:
        raise ShapeError(f"90/270 degree rotation needs a square image, got {img.shape[:2]}")
    if flip_h:
        img, msk = img[:, ::-1], msk[:, ::-1]
    if flip_v:
        img, msk = img[::-1], msk[::-1]
    if turns:
        img, msk = np.rot90(img, turns, axes=(0, 1)), np.rot90(msk, turns, axes=(0, 1))
    return SegmentationSample(np.ascontiguousarray(img), np.ascontiguousarray(msk))


def augment(sample: SegmentationSample, rng: Rng, flip: bool = True, rotate: bool = True) -> SegmentationSample:
    return apply_transform(sample, draw_transform(rng, flip, rotate))


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    iterations: int | None = 200
    epochs: int | None = None
    batch_size: int = 4
    seed: int = 0
    lr: float = 1e-3
    weight_decay: float = 1e-4
    lambda_ce: float = 0.5
    lambda_dice: float = 0.5
    flip: bool = True
    rotate: bool = True
    eval_interval: int = 0
    decoupled_weight_decay: bool = False

    def __post_init__(self):
        if self.lambda_ce < 0 or self.lambda_dice < 0 or self.lambda_ce == self.lambda_dice == 0:
            raise ConfigError("loss weights must be >= 0 and not both zero")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.iterations is None and self.epochs is None:
            raise ConfigError("set iterations or epochs")

    @classmethod
    def full_scale(cls, dataset: str = "synapse", **overrides) -> "TrainConfig":
        """Full-scale recipe: Adam lr 1e-5, weight decay 1e-4, 350 (Synapse) / 400 (ISIC) epochs."""
        epochs = {"synapse": 350, "isic": 400}[dataset]
        return cls(**{"iterations": None, "epochs": epochs, "lr": 1e-5, "weight_decay": 1e-4,
                      **overrides})

    def total_iterations(self, n_samples: int) -> int:
        if self.iterations is not None:
            return self.iterations
        return self.epochs * math.ceil(n_samples / self.batch_size)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    log: list[dict[str, Any]] = field(default_factory=list)
    state: OptimState | None = None


def train_loop(
    model,
    dataset: Sequence[SegmentationSample],
    config: TrainConfig,
    eval_set: Sequence[SegmentationSample] | None = None,
    on_record: Callable[[dict[str, Any]], None] | None = None,
) -> TrainResult:
    """Train ``model`` (a :class:`~dilated_unet.unet.DilatedUNet`) in place.

    Each iteration: zero grads, forward a batch, combined loss, backward, Adam.
    Batches walk a fresh seeded permutation every epoch; every sample gets its
    own random flip/rotation.  Records ``{iter, loss, lr[, eval_dsc]}``.
    """
    from .metrics import evaluate

    samples = list(dataset)
    if not samples:
        raise DatasetError("training dataset is empty")
    rng = Rng(config.seed)
    params = model.parameters()
    state = OptimState.for_params(params, lr=config.lr, weight_decay=config.weight_decay,
                                  decoupled=config.decoupled_weight_decay)
    result = TrainResult(state=state)
    order: list[int] = []
    for it in range(1, config.total_iterations(len(samples)) + 1):
        batch = []
        while len(batch) < config.batch_size:
            if not order:
                order = [int(i) for i in rng.permutation(len(samples))]
            batch.append(samples[order.pop(0)])
            if len(batch) == len(samples):
                break
        if config.flip or config.rotate:
            batch = [augment(s, rng, config.flip, config.rotate) for s in batch]
        images = Tensor(np.stack([s.image for s in batch]).astype(np.float32))
        masks = np.stack([s.mask for s in batch])

        model.zero_grad()
        loss = combined_loss(model(images), masks, config.lambda_ce, config.lambda_dice)
        T.backward(loss)
        adam_step(params, state)

        record: dict[str, Any] = {"iter": it, "loss": float(loss.data), "lr": config.lr}
        if config.eval_interval and it % config.eval_interval == 0:
            record["eval_dsc"] = evaluate(model, eval_set or samples, with_hd=False).mean_dsc
        result.log.append(record)
        if on_record is not None:
            on_record(record)
    return result
