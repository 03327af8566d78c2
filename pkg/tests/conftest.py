import numpy as np
import pytest

from knowledge_exposure.datasets import make_procedural_dataset
from knowledge_exposure.transforms import ImageBatch


@pytest.fixture(scope="session")
def tiny_dataset():
    return make_procedural_dataset(["car", "fruit", "flower"], n_train=24, n_test=12, seed=7)


@pytest.fixture
def natural_batch(tiny_dataset):
    return tiny_dataset.class_images("car", "train", limit=6)


@pytest.fixture
def noise_batch():
    rng = np.random.default_rng(0)
    pix = rng.random((4, 16, 16, 3)).astype(np.float32)
    return ImageBatch(pix, [f"s{i}" for i in range(4)])


@pytest.fixture
def cache_dir(tmp_path, monkeypatch):
    d = tmp_path / "cache"
    monkeypatch.setenv("KE_CACHE_DIR", str(d))
    return d


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
