"""File formats: binary PGM images/masks, checkpoints, synthetic datasets.

Checkpoint layout (all integers little-endian)::

    b"DSEG" | u32 version | u32 header_len | header JSON (UTF-8) | payload

The header holds ``{"config": ..., "tensors": [{"name", "shape", "offset"}]}``
with offsets relative to the payload start; tensors are float32 LE, in
manifest order, packed back to back.
"""

from __future__ import annotations

import json
import math
import os
import re
import struct
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointBoundsError,
    CheckpointError,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    DatasetError,
    PGMFormatError,
    PGMHeaderError,
    PGMTruncatedError,
)
from .rng import Rng
from .training import SegmentationSample
from .unet import ModelConfig, ModelParams, init_params, named_parameters

CHECKPOINT_MAGIC = b"DSEG"
CHECKPOINT_VERSION = 1

# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_pgm(raw: bytes) -> tuple[int, int, np.ndarray]:
    if raw[:2] != b"P5":
        raise PGMFormatError(f"not a binary PGM (magic {raw[:2]!r}, expected b'P5')")
    pos = 2
    values = []
    for _ in range(3):
        m = _TOKEN.match(raw, pos)
        if m is None or not m.group(1).isdigit():
            raise PGMHeaderError("malformed PGM header")
        values.append(int(m.group(1)))
        pos = m.end()
    width, height, maxval = values
    if width < 1 or height < 1:
        raise PGMHeaderError(f"invalid PGM dimensions {width}x{height}")
    if maxval != 255:
        raise PGMHeaderError(f"only maxval 255 is supported, got {maxval}")
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        if width * height:
            raise PGMTruncatedError("PGM header not followed by a payload")
    pos += 1
    need = width * height
    payload = raw[pos:pos + need]
    if len(payload) < need:
        raise PGMTruncatedError(f"PGM payload has {len(payload)} bytes, expected {need}")
    return width, height, np.frombuffer(payload, dtype=np.uint8).reshape(height, width)


def pgm_read_raw(path) -> np.ndarray:
    """Pixel values of a P5 file as a ``uint8 [H, W]`` array."""
    return _parse_pgm(Path(path).read_bytes())[2].copy()


def pgm_read(path) -> np.ndarray:
    """Image ``[H, W, 1]`` float32 in ``[0, 1]`` (pixel / 255)."""
    return (pgm_read_raw(path).astype(np.float32) / np.float32(255))[..., None]


def _encode_pgm(pixels: np.ndarray) -> bytes:
    h, w = pixels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + pixels.astype(np.uint8).tobytes()


def pgm_write(path, image) -> None:
    """Write ``round(clamp(x, 0, 1) * 255)``; accepts ``[H, W]`` or ``[H, W, 1]``."""
    x = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if x.ndim == 3 and x.shape[-1] == 1:
        x = x[..., 0]
    if x.ndim != 2:
        raise ValueError(f"pgm_write needs a single-channel image, got shape {x.shape}")
    pixels = np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5)
    Path(path).write_bytes(_encode_pgm(pixels))


def pgm_write_raw(path, pixels) -> None:
    """Write integer pixel values (e.g. class labels) unchanged."""
    arr = np.asarray(pixels)
    if arr.ndim != 2 or arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise ValueError("raw PGM pixels must be a 2-D array of values in [0, 255]")
    Path(path).write_bytes(_encode_pgm(arr))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _header_bytes(params: ModelParams, config: ModelConfig) -> tuple[bytes, list[np.ndarray]]:
    manifest, arrays, offset = [], [], 0
    for name, t in named_parameters(params):
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        arrays.append(arr)
        offset += arr.nbytes
    header = {"config": config.to_dict(), "tensors": manifest}
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"), arrays


def checkpoint_bytes(params: ModelParams, config: ModelConfig) -> bytes:
    header, arrays = _header_bytes(params, config)
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header]
    parts.extend(a.tobytes() for a in arrays)
    return b"".join(parts)


def checkpoint_save(params: ModelParams, config: ModelConfig, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, config))


def checkpoint_load(path, config: ModelConfig | None = None) -> tuple[ModelParams, ModelConfig]:
    """Read a checkpoint, validating magic, version and manifest bounds.

    If ``config`` is given the tensors are loaded into that architecture
    (an error names the first tensor whose shape disagrees); otherwise the
    stored config is used.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise CheckpointTruncatedError(f"checkpoint is only {len(raw)} bytes")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"bad checkpoint magic {raw[:4]!r}")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if 12 + hlen > len(raw):
        raise CheckpointTruncatedError("checkpoint header extends past end of file")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        stored_config = ModelConfig.from_dict(header["config"])
        manifest = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    payload = memoryview(raw)[12 + hlen:]

    end = 0
    for entry in manifest:
        nbytes = 4 * math.prod(entry["shape"])
        off = entry["offset"]
        if not isinstance(off, int) or off < end:
            raise CheckpointBoundsError(f"tensor {entry['name']!r}: offset {off} overlaps or goes backwards")
        if off + nbytes > len(payload):
            raise CheckpointBoundsError(
                f"tensor {entry['name']!r}: bytes [{off}, {off + nbytes}) exceed payload of {len(payload)}"
            )
        end = off + nbytes
    if end != len(payload):
        raise CheckpointBoundsError(f"payload has {len(payload) - end} trailing bytes")

    target = config or stored_config
    params = init_params(target)
    expected = dict(named_parameters(params))
    stored = {e["name"]: e for e in manifest}
    for name, t in expected.items():
        entry = stored.get(name)
        if entry is None:
            raise CheckpointShapeError(f"tensor {name!r} missing from checkpoint")
        if tuple(entry["shape"]) != t.shape:
            raise CheckpointShapeError(
                f"tensor {name!r}: checkpoint shape {tuple(entry['shape'])} != model shape {t.shape}"
            )
        n = math.prod(t.shape)
        t.data = np.frombuffer(payload, dtype="<f4", count=n, offset=entry["offset"]).astype(np.float32).reshape(t.shape)
    extra = set(stored) - set(expected)
    if extra:
        raise CheckpointShapeError(f"checkpoint has tensors the model lacks: {sorted(extra)[:3]}")
    return params, target


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

# Per-class (shape kind, intensity centre); class 0 is background.
SHAPE_CLASSES = {
    1: ("ellipse", 0.75),
    2: ("rectangle", 0.55),
    3: ("ellipse", 0.95),
}


def _draw_sample(rng: Rng, size: int, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size]
    image = 0.15 + 0.1 * rng.uniform(1)[0] + 0.05 * rng.normal(size * size).reshape(size, size)
    mask = np.zeros((size, size), dtype=np.uint8)
    n_shapes = 1 + rng.randint(3)
    for _ in range(n_shapes):
        if num_classes == 2:
            cls, level = 1, 0.75
            kind = "ellipse" if rng.uniform(1)[0] < 0.5 else "rectangle"
        else:
            cls = 1 + rng.randint(num_classes - 1)
            kind, level = SHAPE_CLASSES[cls]
        u = rng.uniform(5)
        ry = size * (0.08 + 0.17 * u[0])
        rx = size * (0.08 + 0.17 * u[1])
        cy = ry + u[2] * (size - 2 * ry)
        cx = rx + u[3] * (size - 2 * rx)
        if kind == "ellipse":
            region = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            region = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        image[region] = level + 0.1 * (u[4] - 0.5)
        mask[region] = cls
    image = image + 0.05 * rng.normal(size * size).reshape(size, size)
    return np.clip(image, 0.0, 1.0), mask


def synth_generate(n: int, size: int, num_classes: int, seed: int, out_dir) -> Path:
    """Write ``img_%04d.pgm`` / ``msk_%04d.pgm`` pairs plus ``manifest.json``.

    Foreground shapes are filled ellipses and rectangles on a noisy
    background; every mask contains background and at least one shape.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if size < 32 or size % 32:
        raise ValueError(f"size must be a positive multiple of 32, got {size}")
    if not 2 <= num_classes <= 4:
        raise ValueError("num_classes must be between 2 and 4")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"cannot write to {out}")
    rng = Rng(seed)
    for i in range(n):
        while True:
            image, mask = _draw_sample(rng, size, num_classes)
            if len(np.unique(mask)) >= 2 and (mask == 0).any():
                break
        pgm_write(out / f"img_{i:04d}.pgm", image)
        pgm_write_raw(out / f"msk_{i:04d}.pgm", mask)
    mix = {str(c): SHAPE_CLASSES[c][0] if num_classes > 2 else "ellipse|rectangle"
           for c in range(1, num_classes)}
    manifest = {"seed": seed, "count": n, "size": size, "num_classes": num_classes,
                "shape_class_mix": mix}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(data_dir, num_classes: int | None = None) -> list[SegmentationSample]:
    """Load the ``img_*/msk_*`` pairs of a dataset directory in index order."""
    d = Path(data_dir)
    if not d.is_dir():
        raise DatasetError(f"dataset directory {d} does not exist")
    images = sorted(d.glob("img_*.pgm"))
    if not images:
        raise DatasetError(f"no img_*.pgm files in {d}")
    if num_classes is None and (d / "manifest.json").exists():
        num_classes = json.loads((d / "manifest.json").read_text()).get("num_classes")
    samples = []
    for img_path in images:
        msk_path = d / img_path.name.replace("img_", "msk_", 1)
        if not msk_path.exists():
            raise DatasetError(f"missing mask {msk_path.name} for {img_path.name}")
        image = pgm_read(img_path)
        mask = pgm_read_raw(msk_path).astype(np.int64)
        if mask.shape != image.shape[:2]:
            raise DatasetError(f"{msk_path.name} is {mask.shape}, image is {image.shape[:2]}")
        if num_classes is not None and mask.max() >= num_classes:
            raise DatasetError(f"{msk_path.name} has label {mask.max()} >= {num_classes}")
        samples.append(SegmentationSample(image, mask))
    return samples
