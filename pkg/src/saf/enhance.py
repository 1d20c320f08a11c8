"""Waveform-in, waveform-out enhancement with a trained parameter set."""

from __future__ import annotations

import numpy as np

from saf import dsp
from saf.dsp import HOP_LENGTH, AudioClip, SpectraBundle
from saf.model import ModelConfig, cast_params, forward, time_context

DEFAULT_CHUNK_FRAMES = 1500


def inference_params(params):
    """float32 copies that record no graph."""
    return cast_params(params, np.float32, requires_grad=False)


def _enhance_grid(bundle: SpectraBundle, params, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    enh, _ = forward(bundle, params, cfg)
    return enh.s_r.data, enh.s_i.data


def enhance_spectra(bundle: SpectraBundle, params, cfg: ModelConfig,
                    chunk_frames: int = DEFAULT_CHUNK_FRAMES) -> tuple[np.ndarray, np.ndarray]:
    """Enhanced compressed RI spectra for ``bundle``.

    Long inputs run in chunks of ``chunk_frames`` frames, each padded with the
    network's full time context from its neighbours, so every kept frame sees
    the same inputs it would in a single pass.
    """
    t = bundle.n_frames
    if t <= chunk_frames:
        return _enhance_grid(bundle, params, cfg)
    ctx = time_context(cfg)
    s_r = np.empty(bundle.M.shape, dtype=np.float32)
    s_i = np.empty_like(s_r)
    for lo in range(0, t, chunk_frames):
        hi = min(t, lo + chunk_frames)
        a, b = max(0, lo - ctx), min(t, hi + ctx)
        part = SpectraBundle(bundle.M[a:b], bundle.theta[a:b], bundle.S_r[a:b], bundle.S_i[a:b])
        pr, pi = _enhance_grid(part, params, cfg)
        s_r[lo:hi], s_i[lo:hi] = pr[lo - a : hi - a], pi[lo - a : hi - a]
    return s_r, s_i


def pad_for_analysis(n: int) -> tuple[int, int]:
    """Head/tail zero padding that puts every input sample under two frames."""
    head = HOP_LENGTH
    tail = HOP_LENGTH + (-n) % HOP_LENGTH
    return head, tail


def enhance(clip: AudioClip, params, cfg: ModelConfig, chunk_frames: int = DEFAULT_CHUNK_FRAMES) -> AudioClip:
    """Enhance ``clip``; the output has exactly ``len(clip)`` samples."""
    if clip.sample_rate != dsp.SAMPLE_RATE:
        raise ValueError(f"enhance expects {dsp.SAMPLE_RATE} Hz audio, got {clip.sample_rate}")
    n = len(clip)
    head, tail = pad_for_analysis(n)
    padded = AudioClip(np.pad(clip.samples, (head, tail)))
    bundle = dsp.make_bundle(padded)
    s_r, s_i = enhance_spectra(bundle, params, cfg, chunk_frames)
    wave = dsp.spectra_to_waveform(s_r, s_i, len(padded))
    return AudioClip(wave[head : head + n])
