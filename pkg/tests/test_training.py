import itertools
import math
from fractions import Fraction

import numpy as np
import pytest

from dilated_unet import tensor as T
from dilated_unet.errors import ConfigError, DatasetError, LabelError, ShapeError
from dilated_unet.gradcheck import grad_check
from dilated_unet.rng import Rng
from dilated_unet.training import (
    OptimState,
    SegmentationSample,
    TrainConfig,
    adam_step,
    apply_transform,
    augment,
    combined_loss,
    cross_entropy,
    dice_loss,
    draw_transform,
    train_loop,
)
from dilated_unet.unet import DilatedUNet, ModelConfig

SMALL = ModelConfig(input_size=32, embed_dim=4, heads=(1, 1, 1, 1))


def logits(a):
    return T.Tensor(np.asarray(a, dtype=np.float32), requires_grad=True)


def uniform_binary_dice(n_pixels, n_pos, s):
    """Soft Dice loss for p = 0.5 everywhere on a target with n_pos ones, exact."""
    half = Fraction(1, 2)
    s = Fraction(s)
    ratios = [(2 * half * nc + s) / (half * n_pixels + nc + s) for nc in (n_pixels - n_pos, n_pos)]
    return 1 - sum(ratios) / 2


class TestLosses:
    def test_ce_uniform(self):
        assert abs(float(cross_entropy(logits(np.zeros((2, 2, 2))), np.array([[0, 1], [1, 0]])).data)
                   - math.log(2)) < 1e-6

    def test_ce_saturated(self):
        z = np.zeros((3, 3, 2))
        target = np.eye(3, dtype=int)
        z[..., 1] = np.where(target == 1, 20.0, -20.0)
        assert float(cross_entropy(logits(z), target).data) < 1e-6

    def test_ce_permutation_invariant(self, nprng):
        z = nprng.normal(size=(16, 3))
        t = nprng.integers(0, 3, 16)
        perm = nprng.permutation(16)
        a = float(cross_entropy(logits(z), t).data)
        b = float(cross_entropy(logits(z[perm]), t[perm]).data)
        assert abs(a - b) < 1e-6

    def test_label_out_of_range(self):
        with pytest.raises(LabelError):
            cross_entropy(logits(np.zeros((2, 2))), np.array([0, 2]))
        with pytest.raises(LabelError):
            dice_loss(logits(np.zeros((2, 2))), np.array([-1, 0]))

    def test_target_shape(self):
        with pytest.raises(ShapeError):
            cross_entropy(logits(np.zeros((2, 2, 2))), np.zeros((2, 3), int))

    def test_dice_correct(self):
        t = np.array([[0, 1], [1, 1]])
        z = np.where(np.eye(2, dtype=bool)[t], 30.0, -30.0)
        assert float(dice_loss(logits(z), t).data) < 1e-3

    def test_dice_wrong(self):
        t = np.array([[0, 1], [1, 1]])
        z = np.where(np.eye(2, dtype=bool)[1 - t], 30.0, -30.0)
        assert abs(float(dice_loss(logits(z), t).data) - 1) < 1e-4

    def test_dice_uniform_balanced(self):
        expected = uniform_binary_dice(4, 2, 1e-5)
        # (2 + s) / (4 + s) per class: the loss is 1/2 up to smoothing
        assert abs(float(expected) - 0.5) < 1e-5
        got = float(dice_loss(logits(np.zeros((2, 2, 2))), np.array([[0, 1], [1, 0]])).data)
        assert abs(got - float(expected)) < 1e-6

    def test_combined(self):
        z, t = logits(np.zeros((2, 2, 2))), np.array([[0, 1], [1, 0]])
        expected = 0.5 * math.log(2) + 0.5 * float(uniform_binary_dice(4, 2, 1e-5))
        assert abs(float(combined_loss(z, t).data) - expected) < 1e-6

    def test_combined_weights(self, nprng):
        z, t = logits(nprng.normal(size=(4, 4, 3))), nprng.integers(0, 3, (4, 4))
        assert float(combined_loss(z, t, 1.0, 0.0).data) == pytest.approx(float(cross_entropy(z, t).data), abs=1e-7)
        assert float(combined_loss(z, t, 0.0, 1.0).data) == pytest.approx(float(dice_loss(z, t).data), abs=1e-7)
        with pytest.raises(ConfigError):
            combined_loss(z, t, 0.0, 0.0)

    def test_ranges(self, nprng):
        for _ in range(20):
            z = logits(nprng.normal(size=(5, 5, 3)) * 10)
            t = nprng.integers(0, 3, (5, 5))
            assert float(cross_entropy(z, t).data) >= 0
            assert 0 <= float(dice_loss(z, t).data) <= 1 + 1e-5
            assert np.isfinite(float(combined_loss(z, t).data))

    def test_combined_grad(self, nprng):
        z = logits(nprng.normal(size=(2, 4, 4, 3)))
        t = nprng.integers(0, 3, (2, 4, 4))
        assert grad_check(lambda: combined_loss(z, t), [z], h=1e-5) < 1e-4


def adam_trace(theta, grads, lr, wd=0.0, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam, written out step by step."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        g = g + wd * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(theta)
    return out


def run_adam(theta0, grads, **kw):
    p = T.Tensor(np.array([theta0], dtype=np.float64), requires_grad=True)
    state = OptimState.for_params([p], **kw)
    out = []
    for g in grads:
        p.grad = np.array([g])
        adam_step([p], state)
        out.append(float(p.data[0]))
    return out


class TestAdam:
    def test_zero_grad_zero_decay(self):
        assert run_adam(1.5, [0.0, 0.0], lr=1e-3, weight_decay=0.0) == [1.5, 1.5]

    def test_first_step(self):
        lr, g, eps = 1e-3, 0.37, 1e-8
        (theta,) = run_adam(2.0, [g], lr=lr, weight_decay=0.0)
        assert abs((theta - 2.0) - (-lr * g / (abs(g) + eps))) < 1e-12
        assert abs((theta - 2.0) + lr) < 1e-9

    @pytest.mark.parametrize("wd", [0.0, 1e-4, 0.1])
    def test_trace(self, wd):
        grads = [0.5, -0.2, 0.05]
        got = run_adam(1.0, grads, lr=1e-2, weight_decay=wd)
        assert np.abs(np.array(got) - adam_trace(1.0, grads, 1e-2, wd)).max() < 1e-7

    def test_constant_grad_two_steps(self):
        got = run_adam(0.0, [1.0, 1.0], lr=0.1, weight_decay=0.0)
        assert np.abs(np.array(got) - adam_trace(0.0, [1.0, 1.0], 0.1)).max() < 1e-7

    def test_decoupled(self):
        (theta,) = run_adam(1.0, [0.0], lr=0.1, weight_decay=0.5, decoupled=True)
        assert abs(theta - (1.0 - 0.1 * 0.5)) < 1e-12

    def test_moment_shapes(self):
        ps = [T.zeros((2, 3)), T.zeros(4)]
        st = OptimState.for_params(ps)
        assert [m.shape for m in st.m] == [(2, 3), (4,)] and st.t == 0


def sample(nprng, n=6):
    return SegmentationSample(nprng.uniform(size=(n, n, 1)).astype(np.float32), nprng.integers(0, 3, (n, n)))


class TestAugment:
    def test_flip_involution(self, nprng):
        s = sample(nprng)
        for tr in [(True, False, 0), (False, True, 0)]:
            twice = apply_transform(apply_transform(s, tr), tr)
            assert np.array_equal(twice.image, s.image) and np.array_equal(twice.mask, s.mask)

    def test_rotation_cycle(self, nprng):
        s = sample(nprng)
        r = s
        for _ in range(4):
            r = apply_transform(r, (False, False, 1))
        assert np.array_equal(r.image, s.image) and np.array_equal(r.mask, s.mask)

    def test_paired(self, nprng):
        s = sample(nprng)
        coded = SegmentationSample(np.arange(36, dtype=np.float32).reshape(6, 6, 1), np.arange(36).reshape(6, 6))
        for tr in itertools.product([False, True], [False, True], range(4)):
            out = apply_transform(coded, tr)
            assert np.array_equal(out.image[..., 0], out.mask)
            assert apply_transform(s, tr).image.shape == s.image.shape

    def test_non_square_rotation(self, nprng):
        s = SegmentationSample(np.zeros((4, 6, 1), np.float32), np.zeros((4, 6), int))
        with pytest.raises(ShapeError):
            apply_transform(s, (False, False, 1))
        assert apply_transform(s, (True, True, 2)).image.shape == (4, 6, 1)

    def test_distribution(self):
        rng = Rng(11)
        counts = {}
        for _ in range(10_000):
            key = draw_transform(rng)
            counts[key] = counts.get(key, 0) + 1
        assert len(counts) == 16
        assert all(abs(c / 10_000 - 1 / 16) <= 0.02 for c in counts.values())

    def test_augment_uses_rng(self, nprng):
        s = sample(nprng)
        a = augment(s, Rng(4))
        b = augment(s, Rng(4))
        assert np.array_equal(a.image, b.image)


class TestTrainLoop:
    def test_lr_zero_keeps_params(self, overfit_data):
        data = [SegmentationSample(s.image[:32, :32], s.mask[:32, :32]) for s in overfit_data[:4]]
        model = DilatedUNet(SMALL, seed=1)
        before = [p.data.tobytes() for p in model.parameters()]
        train_loop(model, data, TrainConfig(iterations=3, lr=0.0, batch_size=2))
        assert [p.data.tobytes() for p in model.parameters()] == before

    def test_deterministic(self, overfit_data):
        data = [SegmentationSample(s.image[:32, :32], s.mask[:32, :32]) for s in overfit_data[:6]]

        def run():
            model = DilatedUNet(SMALL, seed=2)
            log = train_loop(model, data, TrainConfig(iterations=4, batch_size=3, seed=5, eval_interval=2)).log
            return log, [p.data.tobytes() for p in model.parameters()]

        (log_a, pa), (log_b, pb) = run(), run()
        assert log_a == log_b and pa == pb
        assert set(log_a[1]) == {"iter", "loss", "lr", "eval_dsc"} and set(log_a[0]) == {"iter", "loss", "lr"}

    def test_empty_dataset(self):
        with pytest.raises(DatasetError):
            train_loop(DilatedUNet(SMALL), [], TrainConfig(iterations=1))

    def test_config(self):
        with pytest.raises(ConfigError):
            TrainConfig(lambda_ce=0, lambda_dice=0)
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"lr": 1e-3, "momentum": 0.9})
        full = TrainConfig.full_scale("synapse")
        assert full.lr == 1e-5 and full.weight_decay == 1e-4 and full.epochs == 350
        assert TrainConfig.full_scale("isic").epochs == 400
        assert full.total_iterations(10) == 350 * 3

    @pytest.mark.slow
    def test_loss_decreases_on_overfit_fixture(self, overfit_data):
        model = DilatedUNet(ModelConfig(), seed=0)
        log = train_loop(model, overfit_data, TrainConfig(iterations=200, seed=0)).log
        assert log[199]["loss"] < log[0]["loss"]
