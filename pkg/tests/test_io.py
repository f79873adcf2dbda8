import hashlib
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dilated_unet.errors import (
    CheckpointBoundsError,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    DatasetError,
    PGMFormatError,
    PGMHeaderError,
    PGMTruncatedError,
)
from dilated_unet.io import (
    checkpoint_bytes,
    checkpoint_load,
    checkpoint_save,
    load_dataset,
    pgm_read,
    pgm_read_raw,
    pgm_write,
    pgm_write_raw,
    synth_generate,
)
from dilated_unet.unet import ModelConfig, init_params, named_parameters

CFG = ModelConfig(input_size=32, embed_dim=4)


class TestPgm:
    def test_read_example(self, tmp_path):
        f = tmp_path / "a.pgm"
        f.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 128, 255, 64]))
        img = pgm_read(f)
        assert img.shape == (2, 2, 1) and img.dtype == np.float32
        np.testing.assert_allclose(img[..., 0], [[0.0, 128 / 255], [1.0, 64 / 255]], rtol=1e-7)
        np.testing.assert_allclose(img.reshape(-1), [0.0, 0.502, 1.0, 0.251], atol=5e-4)

    def test_header_with_comment(self, tmp_path):
        f = tmp_path / "c.pgm"
        f.write_bytes(b"P5\n# made by hand\n3 1\n255\n" + bytes([1, 2, 3]))
        assert pgm_read_raw(f).tolist() == [[1, 2, 3]]

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9))))
    def test_write_read_write_bytes(self, pixels):
        import tempfile
        from pathlib import Path

        with tempfile.TemporaryDirectory() as d:
            src, dst = Path(d) / "s.pgm", Path(d) / "d.pgm"
            src.write_bytes(b"P5\n%d %d\n255\n" % (pixels.shape[1], pixels.shape[0]) + pixels.tobytes())
            pgm_write(dst, pgm_read(src))
            assert dst.read_bytes() == src.read_bytes()

    def test_float_round_trip_within_one_level(self, tmp_path, nprng):
        x = nprng.uniform(-0.2, 1.2, size=(5, 7))
        pgm_write(tmp_path / "x.pgm", x)
        back = pgm_read(tmp_path / "x.pgm")[..., 0]
        assert np.abs(back - np.clip(x, 0, 1)).max() <= 1 / 255

    def test_raw_mask_round_trip(self, tmp_path, nprng):
        m = nprng.integers(0, 4, (6, 5))
        pgm_write_raw(tmp_path / "m.pgm", m)
        assert np.array_equal(pgm_read_raw(tmp_path / "m.pgm"), m)

    @pytest.mark.parametrize("raw,err", [
        (b"P2\n2 2\n255\n0 1 2 3", PGMFormatError),
        (b"GIF89a", PGMFormatError),
        (b"P5\n2 x\n255\n\0\0\0\0", PGMHeaderError),
        (b"P5\n2 2\n65535\n" + bytes(8), PGMHeaderError),
        (b"P5\n2 2\n", PGMHeaderError),
        (b"P5\n2 2\n255\n\0\0\0", PGMTruncatedError),
    ])
    def test_errors(self, tmp_path, raw, err):
        f = tmp_path / "bad.pgm"
        f.write_bytes(raw)
        with pytest.raises(err):
            pgm_read(f)

    def test_error_kinds_are_distinct(self):
        assert len({PGMFormatError, PGMHeaderError, PGMTruncatedError}) == 3
        assert not issubclass(PGMFormatError, PGMHeaderError)


def perturbed_params(seed=0):
    params = init_params(CFG, seed)
    rng = np.random.default_rng(seed)
    for _, t in named_parameters(params):
        t.data = rng.normal(size=t.shape).astype(np.float32)
    return params


class TestCheckpoint:
    def test_layout(self):
        blob = checkpoint_bytes(perturbed_params(), CFG)
        assert blob[:4] == b"DSEG"
        version, hlen = struct.unpack("<II", blob[4:12])
        assert version == 1
        header = json.loads(blob[12:12 + hlen])
        offsets = [t["offset"] for t in header["tensors"]]
        assert offsets == sorted(offsets) and offsets[0] == 0
        first = header["tensors"][0]
        n = int(np.prod(first["shape"]))
        payload = blob[12 + hlen:]
        name, t = next(iter(named_parameters(perturbed_params())))
        assert first["name"] == name
        assert payload[:4 * n] == t.data.astype("<f4").tobytes()

    def test_round_trip(self, tmp_path):
        params = perturbed_params()
        checkpoint_save(params, CFG, tmp_path / "a.ckpt")
        loaded, cfg = checkpoint_load(tmp_path / "a.ckpt")
        assert cfg == CFG
        for (na, a), (nb, b) in zip(named_parameters(params), named_parameters(loaded)):
            assert na == nb and a.data.tobytes() == b.data.tobytes()
        checkpoint_save(loaded, cfg, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def _rewrite_header(self, blob, fn):
        hlen = struct.unpack("<I", blob[8:12])[0]
        header = json.loads(blob[12:12 + hlen])
        fn(header)
        new = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return blob[:8] + struct.pack("<I", len(new)) + new + blob[12 + hlen:]

    def test_corrupt_offset(self, tmp_path):
        blob = checkpoint_bytes(perturbed_params(), CFG)

        def bump(h):
            h["tensors"][3]["offset"] += 10**6

        (tmp_path / "c.ckpt").write_bytes(self._rewrite_header(blob, bump))
        with pytest.raises(CheckpointBoundsError):
            checkpoint_load(tmp_path / "c.ckpt")

    def test_overlapping_offset(self, tmp_path):
        blob = checkpoint_bytes(perturbed_params(), CFG)

        def overlap(h):
            h["tensors"][2]["offset"] = h["tensors"][1]["offset"]

        (tmp_path / "o.ckpt").write_bytes(self._rewrite_header(blob, overlap))
        with pytest.raises(CheckpointBoundsError):
            checkpoint_load(tmp_path / "o.ckpt")

    def test_bad_magic_version_truncation(self, tmp_path):
        blob = checkpoint_bytes(perturbed_params(), CFG)
        cases = [(b"XSEG" + blob[4:], CheckpointMagicError),
                 (blob[:4] + struct.pack("<I", 2) + blob[8:], CheckpointVersionError),
                 (blob[:-4], CheckpointBoundsError),
                 (blob[:40], CheckpointTruncatedError),
                 (blob[:6], CheckpointTruncatedError)]
        for i, (raw, err) in enumerate(cases):
            f = tmp_path / f"x{i}.ckpt"
            f.write_bytes(raw)
            with pytest.raises(err):
                checkpoint_load(f)

    def test_mismatched_config_names_tensor(self, tmp_path):
        checkpoint_save(perturbed_params(), CFG, tmp_path / "a.ckpt")
        with pytest.raises(CheckpointShapeError, match="embed.w"):
            checkpoint_load(tmp_path / "a.ckpt", ModelConfig(input_size=32, embed_dim=8))


class TestSynth:
    def test_deterministic(self, tmp_path):
        a = synth_generate(16, 64, 2, 42, tmp_path / "a")
        b = synth_generate(16, 64, 2, 42, tmp_path / "b")
        digest = lambda d: {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in d.iterdir()}  # noqa: E731
        assert digest(a) == digest(b)
        assert len(digest(a)) == 33

    @pytest.mark.parametrize("classes", [2, 4])
    def test_labels(self, tmp_path, classes):
        data = load_dataset(synth_generate(12, 32, classes, 3, tmp_path))
        for s in data:
            assert len(np.unique(s.mask)) >= 2
            assert s.mask.max() < classes
            assert s.image.shape == (32, 32, 1) and s.mask.shape == (32, 32)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["seed"] == 3 and manifest["count"] == 12 and manifest["size"] == 32

    @pytest.mark.parametrize("kw", [dict(n=0), dict(size=48), dict(num_classes=5)])
    def test_bad_args(self, tmp_path, kw):
        args = dict(n=1, size=32, num_classes=2, seed=0, out_dir=tmp_path)
        with pytest.raises(ValueError):
            synth_generate(**{**args, **kw})

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            synth_generate(1, 32, 2, 0, blocker / "sub")

    def test_load_errors(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "missing")
        with pytest.raises(DatasetError):
            load_dataset(tmp_path)
        synth_generate(2, 32, 4, 0, tmp_path / "d")
        (tmp_path / "d" / "msk_0001.pgm").unlink()
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "d")
