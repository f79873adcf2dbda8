import numpy as np
import pytest

from dilated_unet import tensor as T


@pytest.fixture
def nprng():
    return np.random.default_rng(1234)


def rand_tensor(rng, *shape, scale=1.0, requires_grad=False, dtype=np.float32):
    return T.Tensor((rng.normal(size=shape) * scale).astype(dtype), requires_grad=requires_grad)


@pytest.fixture(scope="session")
def overfit_dir(tmp_path_factory):
    from dilated_unet.io import synth_generate

    return synth_generate(16, 64, 2, 42, tmp_path_factory.mktemp("overfit16"))


@pytest.fixture(scope="session")
def overfit_data(overfit_dir):
    from dilated_unet.io import load_dataset

    return load_dataset(overfit_dir)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def overfit_run(overfit_data):
    """Toy model trained 500 iterations on the 16-image fixture (shared by several tests)."""
    import time

    from dilated_unet.training import TrainConfig, train_loop
    from dilated_unet.unet import DilatedUNet, ModelConfig

    model = DilatedUNet(ModelConfig(embed_dim=16, stage_depths=(1, 1, 1, 1)), seed=0)
    config = TrainConfig(iterations=500, lr=1e-3, batch_size=4, seed=0, eval_interval=50)
    start = time.perf_counter()
    result = train_loop(model, overfit_data, config)
    return model, result, time.perf_counter() - start
