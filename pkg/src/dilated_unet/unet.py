"""U-shaped encoder/decoder built from NA/DiNA block pairs.

Resolution/channel chain for an ``H x W`` input and embed dim ``C``::

    embed           H/4  x W/4  x C
    encoder 0       H/4         x C      -> merge ->  H/8  x 2C
    encoder 1       H/8         x 2C     -> merge ->  H/16 x 4C
    encoder 2       H/16        x 4C     -> merge ->  H/32 x 8C
    bottleneck      H/32        x 8C
    decoder 2       expand -> H/16 x 4C, skip fuse, blocks
    decoder 1       expand -> H/8  x 2C, skip fuse, blocks
    decoder 0       expand -> H/4  x C,  skip fuse, blocks
    final expand    H x W x C  -> linear classifier -> H x W x classes

Skip connections tap encoder outputs before merging.  ``num_skips = n``
enables the ``n`` shallowest levels (1 -> H/4 only, 2 -> H/4 and H/8, ...).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Any, Iterator

import numpy as np

from . import tensor as T
from .attention import AttentionSpec
from .block import BlockParams, NormParams, block_pair_forward, init_block, init_norm
from .errors import ConfigError, ShapeError
from .rng import Rng
from .tensor import Tensor

LEVELS = 4
PRESET_DEPTHS = {
    "tiny": (1, 1, 1, 1),
    "small": (1, 1, 2, 1),
    "large": (1, 1, 3, 1),
}
# Full-scale embed dims per preset (a choice of this package).
FULL_EMBED_DIMS = {"tiny": 96, "small": 96, "large": 96}


@dataclass
class ModelConfig:
    input_size: int = 64
    in_channels: int = 1
    embed_dim: int = 16
    stage_depths: tuple[int, ...] = (1, 1, 1, 1)  # encoder levels 0-2 + bottleneck
    decoder_depths: tuple[int, ...] = (1, 1, 1)  # deepest decoder stage first
    kernel_size: int = 3
    dilations: tuple[int, ...] | None = None  # per level; default spans the feature map
    heads: tuple[int, ...] | None = None  # per level; default dim // head_dim
    head_dim: int = 4
    num_skips: int = 3
    num_classes: int = 2
    mlp_ratio: int = 4
    use_positional_bias: bool = True
    input_mean: float = 0.5  # fixed input standardisation (x - mean) / std
    input_std: float = 0.5
    preset: str | None = None

    def __post_init__(self):
        for name in ("stage_depths", "decoder_depths", "dilations", "heads"):
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, tuple(int(v) for v in value))
        self.validate()

    def validate(self) -> None:
        if self.input_size <= 0 or self.input_size % 32:
            raise ConfigError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.in_channels < 1 or self.embed_dim < 1 or self.num_classes < 2:
            raise ConfigError("in_channels, embed_dim must be >= 1 and num_classes >= 2")
        if len(self.stage_depths) != LEVELS or len(self.decoder_depths) != LEVELS - 1:
            raise ConfigError("stage_depths needs 4 entries and decoder_depths 3")
        if min(self.stage_depths + self.decoder_depths) < 1:
            raise ConfigError("every stage needs at least one block pair")
        if not 0 <= self.num_skips <= 3:
            raise ConfigError(f"num_skips must be in 0..3, got {self.num_skips}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.mlp_ratio < 1:
            raise ConfigError("mlp_ratio must be >= 1")
        if not self.input_std > 0:
            raise ConfigError("input_std must be positive")
        for name in ("dilations", "heads"):
            value = getattr(self, name)
            if value is not None and (len(value) != LEVELS or min(value) < 1):
                raise ConfigError(f"{name} needs 4 positive entries, got {value}")
        for level in range(LEVELS):
            dim, heads = self.dim(level), self.level_heads(level)
            if dim % heads:
                raise ConfigError(f"level {level}: {heads} heads do not divide dim {dim}")

    def dim(self, level: int) -> int:
        return self.embed_dim * 2**level

    def side(self, level: int) -> int:
        return self.input_size // 4 // 2**level

    def level_dilation(self, level: int) -> int:
        if self.dilations is not None:
            return self.dilations[level]
        return max(1, self.side(level) // self.kernel_size)

    def level_heads(self, level: int) -> int:
        if self.heads is not None:
            return self.heads[level]
        return max(1, self.dim(level) // self.head_dim)

    def attention_specs(self, level: int) -> tuple[AttentionSpec, AttentionSpec]:
        heads = self.level_heads(level)
        hd = self.dim(level) // heads
        k, bias = self.kernel_size, self.use_positional_bias
        return (
            AttentionSpec(k, 1, heads, hd, bias),
            AttentionSpec(k, self.level_dilation(level), heads, hd, bias),
        )

    def skip_levels(self) -> list[int]:
        return list(range(self.num_skips))

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        for key, value in d.items():
            if isinstance(value, tuple):
                d[key] = list(value)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        scale = d.pop("scale", "toy")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        base: dict[str, Any] = {}
        if d.get("preset"):
            base = preset(d["preset"], scale=scale).to_dict()
        base.update(d)
        return cls(**base)


def preset(name: str, scale: str = "toy", **overrides) -> ModelConfig:
    """Named tiny/small/large configuration at ``toy`` (desk) or ``full`` (224 input) scale."""
    if name not in PRESET_DEPTHS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESET_DEPTHS)}")
    depths = PRESET_DEPTHS[name]
    decoder = tuple(reversed(depths[:3]))
    if scale == "full":
        cfg = dict(input_size=224, in_channels=1, embed_dim=FULL_EMBED_DIMS[name],
                   kernel_size=7, head_dim=8, num_classes=9)
    elif scale == "toy":
        cfg = dict(input_size=64, in_channels=1, embed_dim=16, kernel_size=3, head_dim=4,
                   num_classes=2)
    else:
        raise ConfigError(f"scale must be 'toy' or 'full', got {scale!r}")
    cfg.update(stage_depths=depths, decoder_depths=decoder, preset=name)
    cfg.update(overrides)
    return ModelConfig(**cfg)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class LinearParams:
    w: Tensor
    b: Tensor | None = None


@dataclass
class ModelParams:
    embed: LinearParams
    embed_norm: NormParams
    encoder: list[list[BlockParams]]
    merges: list[Tensor]
    bottleneck: list[BlockParams]
    expands: list[Tensor]  # deepest first
    skips: list[LinearParams | None]  # indexed by level 0..2
    decoder: list[list[BlockParams]]  # deepest first
    final_expand: Tensor
    head: LinearParams


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` for every tensor in a params tree, in a fixed order."""
    if obj is None:
        return
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}")
    else:
        raise TypeError(f"unexpected node {type(obj).__name__} at {prefix!r}")


def parameters(obj) -> list[Tensor]:
    return [t for _, t in named_parameters(obj)]


def _weight(rng: Rng, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.trunc_normal(shape, std).astype(np.float32), requires_grad=True)


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n, np.float32), requires_grad=True)


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Truncated-normal (std 0.02) projections, zero biases, identity LayerNorms."""
    rng = Rng(seed)
    C = config.embed_dim

    def stage(level: int, depth: int) -> list[BlockParams]:
        na, dina = config.attention_specs(level)
        return [init_block(na, dina, config.mlp_ratio, rng) for _ in range(depth)]

    embed = LinearParams(_weight(rng, (16 * config.in_channels, C)), _zeros(C))
    embed_norm = init_norm(C)
    encoder, merges = [], []
    for level in range(3):
        encoder.append(stage(level, config.stage_depths[level]))
        d = config.dim(level)
        merges.append(_weight(rng, (4 * d, 2 * d)))
    bottleneck = stage(3, config.stage_depths[3])
    expands, decoder = [], []
    for i, level in enumerate((2, 1, 0)):
        d = config.dim(level + 1)
        expands.append(_weight(rng, (d, 2 * d)))
        decoder.append(stage(level, config.decoder_depths[i]))
    skips: list[LinearParams | None] = [None, None, None]
    for level in config.skip_levels():
        d = config.dim(level)
        skips[level] = LinearParams(_weight(rng, (2 * d, d)), _zeros(d))
    final_expand = _weight(rng, (C, 16 * C))
    head = LinearParams(_weight(rng, (C, config.num_classes)), _zeros(config.num_classes))
    return ModelParams(embed, embed_norm, encoder, merges, bottleneck, expands, skips,
                       decoder, final_expand, head)


def _block_pair_count(dim: int, heads: int, k: int, dilation: int, ratio: int, bias: bool) -> int:
    def attn(dil: int) -> int:
        table = heads * (2 * dil * (k - 1) + 1) ** 2 if bias else 0
        return 4 * dim * dim + dim + table

    mlp = 2 * ratio * dim * dim + ratio * dim + dim
    return 4 * 2 * dim + attn(1) + attn(dilation) + 2 * mlp


def param_count(config: ModelConfig) -> int:
    """Closed-form number of scalar parameters for ``config``."""
    C = config.embed_dim

    def stage(level: int, depth: int) -> int:
        return depth * _block_pair_count(
            config.dim(level), config.level_heads(level), config.kernel_size,
            config.level_dilation(level), config.mlp_ratio, config.use_positional_bias,
        )

    total = 16 * config.in_channels * C + C + 2 * C
    for level in range(3):
        d = config.dim(level)
        total += stage(level, config.stage_depths[level]) + 8 * d * d  # merge 4d -> 2d
        total += stage(level, config.decoder_depths[2 - level])
        total += 2 * (2 * d) ** 2  # expand 2d -> 4d (no bias)
    total += stage(3, config.stage_depths[3])
    total += sum(2 * config.dim(lv) ** 2 + config.dim(lv) for lv in config.skip_levels())
    total += 16 * C * C + C * config.num_classes + config.num_classes
    return total


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _space_to_depth(x: Tensor, f: int) -> Tensor:
    """``[..., h, w, c] -> [..., h/f, w/f, f*f*c]``; group order row-major (TL, TR, BL, BR for f=2)."""
    *lead, h, w, c = x.shape
    n = len(lead)
    y = T.reshape(x, (*lead, h // f, f, w // f, f, c))
    perm = list(range(n)) + [n, n + 2, n + 1, n + 3, n + 4]
    return T.reshape(T.transpose(y, perm), (*lead, h // f, w // f, f * f * c))


def _depth_to_space(x: Tensor, f: int) -> Tensor:
    """Inverse of :func:`_space_to_depth`."""
    *lead, h, w, c = x.shape
    n = len(lead)
    c_out = c // (f * f)
    y = T.reshape(x, (*lead, h, w, f, f, c_out))
    perm = list(range(n)) + [n, n + 2, n + 1, n + 3, n + 4]
    return T.reshape(T.transpose(y, perm), (*lead, h * f, w * f, c_out))


def patch_embed(image: Tensor, embed: LinearParams, norm: NormParams) -> Tensor:
    H, W = image.shape[-3], image.shape[-2]
    if H % 4 or W % 4:
        raise ShapeError(f"patch_embed needs H and W divisible by 4, got {H}x{W}")
    if image.shape[-1] * 16 != embed.w.shape[0]:
        raise ShapeError(f"image channels {image.shape[-1]} do not match embedding {embed.w.shape}")
    return T.layer_norm(T.linear(_space_to_depth(image, 4), embed.w, embed.b), norm.gamma, norm.beta)


def patch_merge(tokens: Tensor, w: Tensor) -> Tensor:
    h, wd, d = tokens.shape[-3:]
    if h % 2 or wd % 2:
        raise ShapeError(f"patch_merge needs even spatial dims, got {h}x{wd}")
    return T.linear(_space_to_depth(tokens, 2), w)


def patch_expand(tokens: Tensor, w: Tensor) -> Tensor:
    d = tokens.shape[-1]
    if d % 2:
        raise ShapeError(f"patch_expand needs an even channel count, got {d}")
    return _depth_to_space(T.linear(tokens, w), 2)


def final_expand(tokens: Tensor, w: Tensor) -> Tensor:
    return _depth_to_space(T.linear(tokens, w), 4)


def skip_fuse(dec: Tensor, enc: Tensor, p: LinearParams) -> Tensor:
    if dec.shape != enc.shape:
        raise ShapeError(f"skip_fuse shapes differ: decoder {dec.shape} vs encoder {enc.shape}")
    return T.linear(T.concat([dec, enc], axis=-1), p.w, p.b)


def _run_stage(x: Tensor, blocks: list[BlockParams], config: ModelConfig, level: int) -> Tensor:
    na, dina = config.attention_specs(level)
    for bp in blocks:
        x = block_pair_forward(x, bp, na, dina)
    return x


def model_forward(image: Tensor, params: ModelParams, config: ModelConfig,
                  trace: dict[str, tuple[int, ...]] | None = None) -> Tensor:
    """Logits ``[..., H, W, num_classes]`` for ``image[..., H, W, in_channels]``.

    ``trace``, when given, is filled with the shape of every named stage output.
    """
    S = config.input_size
    if image.shape[-3:] != (S, S, config.in_channels):
        raise ShapeError(
            f"image shape {image.shape} does not match config ({S}, {S}, {config.in_channels})"
        )

    def note(name: str, t: Tensor) -> Tensor:
        if trace is not None:
            trace[name] = tuple(t.shape[-3:])
        return t

    # LayerNorm after the embedding discards the scale of a uniform patch, so
    # inputs must straddle zero for intensity to survive tokenisation.
    image = T.scale(T.add_scalar(image, -config.input_mean), 1.0 / config.input_std)
    x = note("embed", patch_embed(image, params.embed, params.embed_norm))
    feats = []
    for level in range(3):
        x = note(f"encoder{level}", _run_stage(x, params.encoder[level], config, level))
        feats.append(x)
        x = note(f"merge{level}", patch_merge(x, params.merges[level]))
    x = note("bottleneck", _run_stage(x, params.bottleneck, config, 3))
    for i, level in enumerate((2, 1, 0)):
        x = note(f"expand{level}", patch_expand(x, params.expands[i]))
        skip = params.skips[level]
        if skip is not None:
            x = note(f"skip{level}", skip_fuse(x, feats[level], skip))
        x = note(f"decoder{level}", _run_stage(x, params.decoder[i], config, level))
    x = note("final_expand", final_expand(x, params.final_expand))
    return note("logits", T.linear(x, params.head.w, params.head.b))


class DilatedUNet:
    """A config plus its parameters; calling it runs the forward pass."""

    def __init__(self, config: ModelConfig, params: ModelParams | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def __call__(self, image) -> Tensor:
        if not isinstance(image, Tensor):
            image = Tensor(np.asarray(image, dtype=np.float32))
        return model_forward(image, self.params, self.config)

    def predict(self, image) -> np.ndarray:
        with T.no_grad():
            return np.argmax(self(image).data, axis=-1)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(named_parameters(self.params))

    def parameters(self) -> list[Tensor]:
        return parameters(self.params)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def count_enumerated(config: ModelConfig) -> int:
    return sum(math.prod(t.shape) for _, t in named_parameters(init_params(config)))
