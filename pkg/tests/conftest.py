import numpy as np
import pytest
import torch

from stcfusion.ingest import Detection, FrameGroup
from stcfusion.model import StreamModel

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_model(input_channels=1, latent=4, memory=3, patch=8, seed=0, **kw):
    return StreamModel(input_channels, latent, memory, channels=(2, 3, 3, 2), patch_size=patch,
                       seed=seed, **kw)


def make_group(k, n, stream="spatial", patch=8, seed=0, frame=1, video="v"):
    rng = np.random.default_rng(seed)
    ch = 1 if stream == "spatial" else 2
    unique = rng.random((k, ch, patch, patch)).astype(np.float32)
    slots = np.concatenate([np.arange(k), rng.integers(0, k, size=max(n - k, 0))])[:n]
    boxes = [Detection(0, 0, 4, 4, 1.0 - 0.01 * i, video, frame) for i in range(k)]
    return FrameGroup(video, frame, stream, unique, slots.astype(np.int64), boxes, seed)


@pytest.fixture
def small_model():
    return tiny_model()


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield
