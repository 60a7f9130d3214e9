import numpy as np
import pytest

from instedit.predictor import Caption
from instedit.schedule import LatentSequence, NoiseSchedule


@pytest.fixture(scope="session")
def sched() -> NoiseSchedule:
    return NoiseSchedule.linear_beta()


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)


def make_latents(rng, n=2, h=8, w=8, c=1, timestep=0, scale=1.0) -> LatentSequence:
    return LatentSequence(rng.standard_normal((n, h, w, c)) * scale, timestep)


def square_mask(n, h, w, r0, r1, c0, c1) -> np.ndarray:
    mask = np.zeros((n, h, w))
    mask[:, r0:r1, c0:c1] = 1
    return mask


def caption(text: str) -> Caption:
    return Caption.from_text(text)
