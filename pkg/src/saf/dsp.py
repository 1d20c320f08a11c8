"""Waveform <-> spectra front-end.

Analysis uses a 320-sample periodic Hann window, 160-sample hop and a 320-point
FFT (161 one-sided bins), with no centering: frame ``t`` covers samples
``[160 t, 160 t + 320)``. Magnitudes are power-compressed with exponent 0.5 and
the real/imaginary views are taken in the compressed domain.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
WIN_LENGTH = 320
HOP_LENGTH = 160
N_FFT = 320
N_BINS = N_FFT // 2 + 1
COMPRESSION = 0.5

_WINDOW = get_window("hann", WIN_LENGTH, fftbins=True)
_WINDOW.setflags(write=False)


def hann_window() -> np.ndarray:
    """The (read-only) periodic Hann analysis/synthesis window."""
    return _WINDOW


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"audio must be mono 1-D, got shape {self.samples.shape}")
        if self.samples.size == 0:
            raise ValueError("audio clip is empty")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class SpectraBundle:
    """Compressed magnitude, phase and real/imaginary spectra on a ``T x F`` grid."""

    M: np.ndarray
    theta: np.ndarray
    S_r: np.ndarray
    S_i: np.ndarray
    n_samples: int = 0
    win_length: int = WIN_LENGTH
    hop_length: int = HOP_LENGTH
    n_fft: int = N_FFT
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.M.shape[0]

    @property
    def n_bins(self) -> int:
        return self.M.shape[1]

    def crop(self, n_frames: int) -> "SpectraBundle":
        """First ``n_frames`` frames (drops batch padding)."""
        return SpectraBundle(
            self.M[:n_frames], self.theta[:n_frames], self.S_r[:n_frames], self.S_i[:n_frames],
            n_samples=self.n_samples, meta=dict(self.meta),
        )

    def astype(self, dtype) -> "SpectraBundle":
        return SpectraBundle(
            self.M.astype(dtype), self.theta.astype(dtype), self.S_r.astype(dtype), self.S_i.astype(dtype),
            n_samples=self.n_samples, meta=dict(self.meta),
        )


@dataclass
class TargetSpectra:
    M_star: np.ndarray
    S_star_r: np.ndarray
    S_star_i: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.M_star.shape[0]

    def crop(self, n_frames: int) -> "TargetSpectra":
        return TargetSpectra(self.M_star[:n_frames], self.S_star_r[:n_frames], self.S_star_i[:n_frames])

    def astype(self, dtype) -> "TargetSpectra":
        return TargetSpectra(self.M_star.astype(dtype), self.S_star_r.astype(dtype), self.S_star_i.astype(dtype))


def n_frames_for(n_samples: int) -> int:
    if n_samples < WIN_LENGTH:
        raise ValueError(f"need at least {WIN_LENGTH} samples for one frame, got {n_samples}")
    return (n_samples - WIN_LENGTH) // HOP_LENGTH + 1


def stft(clip: AudioClip | np.ndarray) -> np.ndarray:
    """Complex ``T x 161`` spectrogram, no centering."""
    x = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    t = n_frames_for(x.size)
    frames = np.lib.stride_tricks.sliding_window_view(x, WIN_LENGTH)[::HOP_LENGTH][:t]
    return np.fft.rfft(frames * _WINDOW, n=N_FFT, axis=-1)


def istft(spec: np.ndarray, length: int) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`.

    Each frame is windowed again and the sum is divided by the summed squared
    window; samples no frame covers (or where that sum vanishes) come out 0.
    """
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[1] != N_BINS:
        raise ValueError(f"istft expects a T x {N_BINS} grid, got {spec.shape}")
    t = spec.shape[0]
    span = (t - 1) * HOP_LENGTH + WIN_LENGTH
    frames = np.fft.irfft(spec, n=N_FFT, axis=-1)[:, :WIN_LENGTH] * _WINDOW
    out = np.zeros(max(span, length))
    wsum = np.zeros_like(out)
    w2 = _WINDOW * _WINDOW
    for i in range(t):
        s = i * HOP_LENGTH
        out[s : s + WIN_LENGTH] += frames[i]
        wsum[s : s + WIN_LENGTH] += w2
    nz = wsum > 1e-10
    out[nz] /= wsum[nz]
    out[~nz] = 0.0
    return out[:length]


def compress(mag: np.ndarray, c: float = COMPRESSION) -> np.ndarray:
    mag = np.asarray(mag)
    if np.any(mag < 0):
        raise ValueError("compress: magnitudes must be non-negative")
    return mag**c


def decompress(mag: np.ndarray, c: float = COMPRESSION) -> np.ndarray:
    mag = np.asarray(mag)
    if np.any(mag < 0):
        raise ValueError("decompress: magnitudes must be non-negative")
    return mag ** (1.0 / c)


def polar_compressed(spec: np.ndarray, dtype=np.float64) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """``(M, theta, S_r, S_i)`` for a complex spectrogram, magnitude compressed.

    The RI views are formed in ``dtype`` from the rounded ``M`` and ``theta``, so
    ``S_r == M * cos(theta)`` holds bitwise for the returned arrays.
    """
    mag = compress(np.abs(spec)).astype(dtype)
    theta = np.angle(spec)
    theta[theta <= -math.pi] = math.pi  # half-open range (-pi, pi]
    theta[mag == 0] = 0.0
    theta = theta.astype(dtype)
    return mag, theta, mag * np.cos(theta), mag * np.sin(theta)


def make_bundle(clip: AudioClip, dtype=np.float32) -> SpectraBundle:
    m, theta, sr, si = polar_compressed(stft(clip), dtype)
    return SpectraBundle(m, theta, sr, si, n_samples=len(clip))


def make_target(clip: AudioClip, dtype=np.float32) -> TargetSpectra:
    m, _, sr, si = polar_compressed(stft(clip), dtype)
    return TargetSpectra(m, sr, si)


def spectra_to_waveform(s_r: np.ndarray, s_i: np.ndarray, length: int) -> np.ndarray:
    """Undo compression on compressed-domain RI spectra and invert the STFT."""
    s_r = np.asarray(s_r, dtype=np.float64)
    s_i = np.asarray(s_i, dtype=np.float64)
    mag = np.hypot(s_r, s_i)
    phase = np.arctan2(s_i, s_r)
    return istft(decompress(mag) * np.exp(1j * phase), length)


# -- mixing --------------------------------------------------------------------


@dataclass
class MixResult:
    noisy: AudioClip
    clean: AudioClip
    scale: float  # peak-protection gain applied to both signals (1.0 if none)


def fit_length(x: np.ndarray, n: int) -> np.ndarray:
    """Loop or crop ``x`` to exactly ``n`` samples."""
    if x.size >= n:
        return x[:n]
    reps = -(-n // x.size)
    return np.tile(x, reps)[:n]


def mix_at_snr(clean: AudioClip, noise: AudioClip, snr_db: float) -> MixResult:
    """Add ``noise`` to ``clean`` scaled so the mean-power SNR equals ``snr_db``."""
    c = clean.samples
    n = fit_length(noise.samples, c.size)
    p_clean = float(np.mean(c * c))
    p_noise = float(np.mean(n * n))
    if p_clean == 0.0:
        raise ValueError("mix_at_snr: clean signal has zero power")
    if p_noise == 0.0:
        raise ValueError("mix_at_snr: noise has zero power")
    gain = math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    noisy = c + gain * n
    peak = float(np.max(np.abs(noisy)))
    scale = 1.0 / peak if peak > 1.0 else 1.0
    return MixResult(
        AudioClip(noisy * scale, clean.sample_rate), AudioClip(c * scale, clean.sample_rate), scale
    )


# -- WAV I/O -------------------------------------------------------------------


def resample(x: np.ndarray, sr_from: int, sr_to: int) -> np.ndarray:
    """Polyphase resampling (Kaiser-windowed FIR from scipy)."""
    if sr_from == sr_to:
        return np.asarray(x, dtype=np.float64)
    g = math.gcd(sr_from, sr_to)
    return resample_poly(np.asarray(x, dtype=np.float64), sr_to // g, sr_from // g)


def read_wav(path: str | Path) -> AudioClip:
    """Load a mono 16-bit PCM or 32-bit float WAV at 16 or 48 kHz as a 16 kHz clip."""
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype} (need PCM16 or float32)")
    if rate == 48000:
        x = resample(x, 48000, SAMPLE_RATE)
    elif rate != SAMPLE_RATE:
        raise ValueError(f"{path}: unsupported sample rate {rate} (need 16000 or 48000)")
    return AudioClip(x, SAMPLE_RATE)


def write_wav(path: str | Path, clip: AudioClip) -> None:
    """Write 16-bit PCM mono. Samples outside [-1, 1] are clipped."""
    if clip.sample_rate != SAMPLE_RATE:
        raise ValueError(f"refusing to write {clip.sample_rate} Hz audio; expected {SAMPLE_RATE}")
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), SAMPLE_RATE, pcm)
