import numpy as np
import pytest
from hypothesis import settings

from saf import dsp

settings.register_profile("saf", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("saf")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tone_mixture(seconds: float = 1.0, sr: int = dsp.SAMPLE_RATE) -> np.ndarray:
    """Amplitude-modulated three-partial tone, peak well below full scale."""
    t = np.arange(int(round(seconds * sr))) / sr
    x = (
        0.3 * np.sin(2 * np.pi * 220 * t)
        + 0.2 * np.sin(2 * np.pi * 660 * t + 0.3)
        + 0.1 * np.sin(2 * np.pi * 1650 * t + 1.1)
    )
    return x * (0.6 + 0.4 * np.sin(2 * np.pi * 3 * t))


def noisy_pair(seconds: float = 1.0, snr_db: float = 5.0, seed: int = 0) -> dsp.MixResult:
    rng = np.random.default_rng(seed)
    clean = dsp.AudioClip(tone_mixture(seconds))
    noise = dsp.AudioClip(rng.standard_normal(len(clean)))
    return dsp.mix_at_snr(clean, noise, snr_db)
