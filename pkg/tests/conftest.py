from __future__ import annotations

import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(1)

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_images() -> torch.Tensor:
    """Eight 64-px procedural scenes, (8, 3, 64, 64) in [0, 1]."""
    from mtgc import toydata

    corpus = toydata.make_corpus(8, 64, seed=3)
    return torch.from_numpy(np.stack([img for _, img, _ in corpus]))


@pytest.fixture(scope="session")
def toy_corpus():
    from mtgc import toydata

    return toydata.make_corpus(8, 64, seed=3)


@pytest.fixture(scope="session")
def tiny_codec(toy_images):
    """A codec trained just long enough to have tables; not a quality model."""
    from mtgc.hci_codec.codec import train_codec
    from mtgc.hci_codec.model import RdCodecConfig

    codec, _ = train_codec(toy_images, RdCodecConfig(lambda_rd=2e-4, latent_channels=4, hidden_channels=8), steps=30, crop=32, batch_size=4)
    return codec


ACCEPTANCE_LINES = pytest.StashKey[dict]()


@pytest.fixture
def acceptance_report(request):
    """Record one summary line per acceptance criterion; printed after the run."""
    lines = request.config.stash.setdefault(ACCEPTANCE_LINES, {})

    def report(number: int, ok: bool, detail: str) -> None:
        lines[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[number])

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
