import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from composerlab.backbone import Denoiser, DenoiserConfig
from composerlab.composer import Composer, ComposerConfig
from composerlab.data import gen_synthetic_dataset
from composerlab.numerics import SeededRng

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

TINY = DenoiserConfig(image_size=8, patch_size=4, d=16, num_layers=2, num_heads=2, num_classes=4, num_timesteps=20)


@pytest.fixture
def tiny_backbone():
    return Denoiser.init(TINY, SeededRng(0).split("init"))


@pytest.fixture
def tiny_composer(tiny_backbone):
    cfg = ComposerConfig(r=2, d_model=16, L=1, heads=2)
    return Composer.init(cfg, TINY, SeededRng(0).split("init", 1))


@pytest.fixture
def tiny_data():
    return gen_synthetic_dataset(0, 64, 4, image_size=8)


def randn(*shape, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


# one summary line per acceptance criterion, filled in by test_acceptance.py
CRITERIA: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
