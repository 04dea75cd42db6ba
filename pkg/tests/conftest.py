import pytest
import torch
import torch.nn.functional as F

from diffguard.backends import NoisePredictor, toy_backends
from diffguard.msi import train_embedding


def smooth_image(seed, size=16):
    """Low-frequency RGB test image in [0, 1]."""
    g = torch.Generator().manual_seed(seed)
    base = torch.rand(3, 4, 4, generator=g)
    return F.interpolate(base[None], size=size, mode="bilinear", align_corners=False)[0].clamp(0, 1)


class ZeroPredictor(NoisePredictor):
    def predict(self, z_t, t, context=None):
        return torch.zeros_like(z_t.values)


class ExplodingPredictor(NoisePredictor):
    """Fails loudly if any model computation is attempted."""

    def predict(self, z_t, t, context=None):
        raise AssertionError("predictor must not be called")


@pytest.fixture(scope="session")
def toy():
    return toy_backends()


@pytest.fixture(scope="session")
def toy64():
    return toy_backends(dtype=torch.float64)


@pytest.fixture(scope="session")
def face():
    return smooth_image(1)


@pytest.fixture(scope="session")
def key_e(toy, face):
    return train_embedding(face, toy, steps=60, seed=0)


@pytest.fixture(scope="session")
def other_face():
    return smooth_image(2)


@pytest.fixture(scope="session")
def other_key_e(toy, other_face):
    return train_embedding(other_face, toy, steps=60, seed=1)


# criterion number -> (title, passed, seconds, limit, detail)
ACCEPTANCE: dict[int, tuple] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, secs, limit, detail = ACCEPTANCE[n]
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] {n:2d}. {title} ({secs:.1f}s / {limit:g}s) {detail}")
