import json
import math

import numpy as np
import pytest
from pystoi import stoi as reference_stoi

from saf import metrics
from saf.dsp import AudioClip
from saf.metrics import ClipScore, EvalReport

from conftest import tone_mixture


def speechlike(rng, seconds=1.0, sr=16000):
    """Noise bursts under a syllable-rate envelope, with a quiet gap."""
    n = int(seconds * sr)
    env = np.abs(np.sin(np.pi * 4 * np.arange(n) / sr)) ** 2
    x = rng.standard_normal(n) * env
    x[n // 2 : n // 2 + sr // 10] *= 1e-4
    return x * 0.3


def test_stoi_identity(rng):
    for _ in range(10):
        x = speechlike(rng)
        assert metrics.stoi(x, x) == pytest.approx(1.0, abs=1e-6)


def test_stoi_gain_invariance(rng):
    x = speechlike(rng)
    y = x + 0.2 * rng.standard_normal(x.size) * np.std(x)
    base = metrics.stoi(x, y)
    for g in (0.01, 0.5, 3.0, 100.0):
        assert metrics.stoi(x, g * y) == pytest.approx(base, abs=1e-6)


def test_stoi_decreases_with_noise(rng):
    x = speechlike(rng, 1.5)
    noise = rng.standard_normal(x.size) * np.std(x)
    scores = [metrics.stoi(x, x + a * noise) for a in (0.05, 0.3, 1.0, 3.0)]
    assert all(a > b for a, b in zip(scores, scores[1:]))


def test_stoi_matches_reference_at_10k(rng):
    for _ in range(5):
        x = speechlike(rng, 1.2, sr=10000)
        y = x + rng.uniform(0.1, 2.0) * np.std(x) * rng.standard_normal(x.size)
        ours = metrics.stoi(AudioClip(x, 10000), AudioClip(y, 10000))
        assert ours == pytest.approx(reference_stoi(x, y, 10000), abs=1e-9)


def test_stoi_close_to_reference_at_16k(rng):
    x = speechlike(rng, 1.5)
    y = x + 0.5 * np.std(x) * rng.standard_normal(x.size)
    # only the resampling filter differs
    assert metrics.stoi(x, y) == pytest.approx(reference_stoi(x, y, 16000), abs=2e-2)


def test_stoi_too_short():
    with pytest.raises(ValueError, match="384 ms"):
        metrics.stoi(np.ones(3000), np.ones(3000))


def test_ssnr_examples(rng):
    x = tone_mixture(1.0)
    assert metrics.ssnr(x, x) == 35.0
    assert metrics.ssnr(x, np.zeros_like(x)) == pytest.approx(0.0, abs=1e-12)
    assert metrics.ssnr(x, x + 1e-9 * rng.standard_normal(x.size)) == 35.0
    assert metrics.ssnr(x, -50 * x) == -10.0


def test_ssnr_equal_power_frame_noise_is_zero_db(rng):
    x = tone_mixture(1.0)
    e = x * rng.choice([-1.0, 1.0], x.size)  # same energy as x in every frame
    assert metrics.ssnr(x, x + e) == pytest.approx(0.0, abs=1e-9)


def test_ssnr_monotone_in_noise_power(rng):
    x = tone_mixture(1.0)
    e = rng.standard_normal(x.size)
    values = [metrics.ssnr(x, x + a * e) for a in (3.0, 1.0, 0.3, 0.1, 0.01, 1e-4)]
    assert all(a <= b for a, b in zip(values, values[1:]))


def test_ssnr_silence_rejected():
    with pytest.raises(ValueError, match="-40 dBFS"):
        metrics.ssnr(np.full(4000, 1e-4), np.zeros(4000))


def test_si_sdr_examples(rng):
    x = rng.standard_normal(8000)
    assert metrics.si_sdr(x, 3 * x) == 60.0
    assert metrics.si_sdr(x, -x) == 60.0
    e = rng.standard_normal(8000)
    e -= (e @ x) / (x @ x) * x
    e *= np.linalg.norm(x) / np.linalg.norm(e)
    assert metrics.si_sdr(x, x + e) == pytest.approx(0.0, abs=1e-9)
    assert metrics.si_sdr(x, np.zeros(8000)) == -60.0


def test_si_sdr_scale_invariance(rng):
    for _ in range(20):
        x = rng.standard_normal(4000)
        y = x + rng.uniform(0.1, 3) * rng.standard_normal(4000)
        base = metrics.si_sdr(x, y)
        assert metrics.si_sdr(x, rng.uniform(1e-3, 1e3) * y) == pytest.approx(base, abs=1e-9)


def test_length_mismatch_rejected():
    with pytest.raises(ValueError, match="equal length"):
        metrics.si_sdr(np.ones(10), np.ones(11))


def test_report_means_and_outputs(tmp_path):
    rep = EvalReport()
    rep.add(ClipScore("a", 0.9, 10.0, 12.0))
    rep.add(ClipScore("b", 0.7, 4.0, 2.0))
    rep.add(ClipScore("c", error="ValueError: boom\nsecond line"))
    means = rep.means()
    assert means == {"stoi": pytest.approx(0.8, abs=1e-9), "ssnr": 7.0, "si_sdr": 7.0}
    tsv, js = rep.write(tmp_path / "r")
    rows = metrics.read_tsv(tsv)
    assert [r.clip for r in rows] == ["a", "b", "c", "MEAN"]
    assert rows[2].error == "ValueError: boom second line"
    assert math.isnan(rows[2].stoi)
    data = json.loads(js.read_text())
    assert len(data["records"]) == 4 and data["records"][-1]["aggregate"] is True
    assert data["records"][2]["stoi"] is None
    assert (data["clips_ok"], data["clips_total"]) == (2, 3)


def test_report_without_successes():
    with pytest.raises(ValueError, match="no clip"):
        EvalReport([ClipScore("x", error="bad")]).means()
