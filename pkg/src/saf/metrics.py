"""Objective speech metrics: STOI, segmental SNR and SI-SDR.

All three take time-aligned ``(clean, processed)`` pairs of equal length.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from saf import dsp
from saf.dsp import AudioClip

_EPS = np.finfo(np.float64).eps

# STOI constants of the reference procedure.
STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30  # frames, 384 ms
STOI_BETA_DB = -15.0
STOI_DYN_RANGE_DB = 40.0

SSNR_FRAME_S = 0.032
SSNR_HOP_S = 0.016
SSNR_MIN_DB = -10.0
SSNR_MAX_DB = 35.0
SSNR_FLOOR_DBFS = -40.0

SI_SDR_CAP_DB = 60.0


def _pair(clean, proc, name: str) -> tuple[np.ndarray, np.ndarray, int]:
    rate = clean.sample_rate if isinstance(clean, AudioClip) else dsp.SAMPLE_RATE
    if isinstance(proc, AudioClip) and proc.sample_rate != rate:
        raise ValueError(f"{name}: sample rates differ ({rate} vs {proc.sample_rate})")
    c = clean.samples if isinstance(clean, AudioClip) else np.asarray(clean, dtype=np.float64)
    p = proc.samples if isinstance(proc, AudioClip) else np.asarray(proc, dtype=np.float64)
    if c.shape != p.shape or c.ndim != 1:
        raise ValueError(f"{name}: clean and processed must be 1-D of equal length, got {c.shape} and {p.shape}")
    return c, p, rate


# -- STOI ---------------------------------------------------------------------


def third_octave_bands(fs: int = STOI_FS, nfft: int = STOI_NFFT, n_bands: int = STOI_BANDS,
                       min_freq: float = STOI_MIN_FREQ) -> np.ndarray:
    """``n_bands x (nfft/2+1)`` 0/1 matrix grouping FFT bins into 1/3-octave bands."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(n_bands)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((n_bands, f.size))
    for i in range(n_bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm


_OBM = third_octave_bands()


def _frames(x: np.ndarray, size: int, hop: int) -> np.ndarray:
    w = np.hanning(size + 2)[1:-1]
    starts = range(0, x.size - size, hop)
    return np.array([w * x[i : i + size] for i in starts]).reshape(-1, size)


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    n, size = frames.shape
    out = np.zeros((n - 1) * hop + size) if n else np.zeros(0)
    for i in range(n):
        out[i * hop : i * hop + size] += frames[i]
    return out


def remove_silent_frames(x: np.ndarray, y: np.ndarray, dyn_range: float = STOI_DYN_RANGE_DB,
                         size: int = STOI_FRAME, hop: int = STOI_FRAME // 2) -> tuple[np.ndarray, np.ndarray]:
    """Drop frames more than ``dyn_range`` dB below the loudest frame of ``x``."""
    xf, yf = _frames(x, size, hop), _frames(y, size, hop)
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = (np.max(energy) - dyn_range - energy) < 0 if energy.size else np.zeros(0, bool)
    return _overlap_add(xf[keep], hop), _overlap_add(yf[keep], hop)


def _band_envelopes(x: np.ndarray) -> np.ndarray:
    spec = np.fft.rfft(_frames(x, STOI_FRAME, STOI_FRAME // 2), n=STOI_NFFT, axis=1).T
    return np.sqrt(_OBM @ np.abs(spec) ** 2)


def stoi(clean, proc) -> float:
    """Short-time objective intelligibility in [0, 1] (nominally).

    Inputs are resampled to 10 kHz, silent frames removed, and 384 ms segments
    of 1/3-octave envelopes correlated after normalization and clipping.
    """
    x, y, rate = _pair(clean, proc, "stoi")
    if rate != STOI_FS:
        x, y = dsp.resample(x, rate, STOI_FS), dsp.resample(y, rate, STOI_FS)
    x, y = remove_silent_frames(x, y)
    if x.size <= STOI_FRAME:
        raise ValueError("stoi: no speech-active signal after silence removal")
    x_tob, y_tob = _band_envelopes(x), _band_envelopes(y)
    n_frames = x_tob.shape[1]
    if n_frames < STOI_SEGMENT:
        raise ValueError(
            f"stoi: need {STOI_SEGMENT} active frames (384 ms) after silence removal, got {n_frames}"
        )
    xs = np.lib.stride_tricks.sliding_window_view(x_tob, STOI_SEGMENT, axis=1).transpose(1, 0, 2)
    ys = np.lib.stride_tricks.sliding_window_view(y_tob, STOI_SEGMENT, axis=1).transpose(1, 0, 2)

    gain = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + _EPS)
    clip = 10.0 ** (-STOI_BETA_DB / 20.0)
    y_prim = np.minimum(ys * gain, xs * (1.0 + clip))

    y_prim = y_prim - y_prim.mean(axis=2, keepdims=True)
    xc = xs - xs.mean(axis=2, keepdims=True)
    y_prim /= np.linalg.norm(y_prim, axis=2, keepdims=True) + _EPS
    xc /= np.linalg.norm(xc, axis=2, keepdims=True) + _EPS
    return float(np.sum(y_prim * xc) / (xs.shape[0] * xs.shape[1]))


# -- SSNR / SI-SDR ------------------------------------------------------------


def ssnr(clean, proc) -> float:
    """Mean per-frame SNR (dB, clamped to [-10, 35]) over frames louder than -40 dBFS."""
    c, p, rate = _pair(clean, proc, "ssnr")
    size = int(round(SSNR_FRAME_S * rate))
    hop = int(round(SSNR_HOP_S * rate))
    if c.size < size:
        cf, ef = c[None, :], (c - p)[None, :]
    else:
        n = (c.size - size) // hop + 1
        idx = np.arange(size)[None, :] + hop * np.arange(n)[:, None]
        cf, ef = c[idx], (c - p)[idx]
    sig = np.sum(cf * cf, axis=1)
    err = np.sum(ef * ef, axis=1)
    active = sig / cf.shape[1] > 10.0 ** (SSNR_FLOOR_DBFS / 10.0)
    if not np.any(active):
        raise ValueError("ssnr: clean signal has no frame above the -40 dBFS floor")
    sig, err = sig[active], err[active]
    with np.errstate(divide="ignore"):
        per_frame = np.where(err > 0, 10.0 * np.log10(sig / np.where(err > 0, err, 1.0)), SSNR_MAX_DB)
    return float(np.mean(np.clip(per_frame, SSNR_MIN_DB, SSNR_MAX_DB)))


def si_sdr(clean, proc) -> float:
    """Scale-invariant SDR in dB, limited to [-60, 60]."""
    c, p, _ = _pair(clean, proc, "si_sdr")
    cc = float(np.dot(c, c))
    if cc == 0.0:
        raise ValueError("si_sdr: clean signal is all zeros")
    target = (float(np.dot(p, c)) / cc) * c
    noise = p - target
    t_e, n_e = float(np.dot(target, target)), float(np.dot(noise, noise))
    if t_e == 0.0:
        return -SI_SDR_CAP_DB
    if n_e == 0.0:
        return SI_SDR_CAP_DB
    return float(np.clip(10.0 * math.log10(t_e / n_e), -SI_SDR_CAP_DB, SI_SDR_CAP_DB))


# -- reports ------------------------------------------------------------------

METRICS = ("stoi", "ssnr", "si_sdr")
MEAN_ID = "MEAN"


@dataclass
class ClipScore:
    clip: str
    stoi: float = math.nan
    ssnr: float = math.nan
    si_sdr: float = math.nan
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


def score_clip(clip_id: str, clean, proc) -> ClipScore:
    return ClipScore(clip_id, stoi(clean, proc), ssnr(clean, proc), si_sdr(clean, proc))


@dataclass
class EvalReport:
    records: list = field(default_factory=list)

    def add(self, score: ClipScore) -> None:
        self.records.append(score)

    @property
    def succeeded(self) -> list:
        return [r for r in self.records if r.ok]

    def means(self) -> dict:
        ok = self.succeeded
        if not ok:
            raise ValueError("no clip was scored successfully")
        return {m: float(np.mean([getattr(r, m) for r in ok])) for m in METRICS}

    def aggregate(self) -> ClipScore:
        return ClipScore(MEAN_ID, **self.means())

    def to_tsv(self) -> str:
        lines = ["clip\tstoi\tssnr_db\tsi_sdr_db\terror"]
        for r in [*self.records, self.aggregate()]:
            err = " ".join(r.error.split())
            lines.append(f"{r.clip}\t{r.stoi:.6f}\t{r.ssnr:.4f}\t{r.si_sdr:.4f}\t{err}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        def rec(r: ClipScore, aggregate: bool) -> dict:
            d = asdict(r)
            for m in METRICS:
                d[m] = None if math.isnan(d[m]) else d[m]
            d["aggregate"] = aggregate
            return d

        body = [rec(r, False) for r in self.records] + [rec(self.aggregate(), True)]
        return json.dumps({"records": body, "clips_ok": len(self.succeeded), "clips_total": len(self.records)},
                          indent=2) + "\n"

    def write(self, stem: str | Path) -> tuple[Path, Path]:
        """Write ``<stem>.tsv`` and ``<stem>.json``; returns both paths."""
        stem = Path(stem)
        if stem.suffix in (".tsv", ".json"):
            stem = stem.with_suffix("")
        tsv, js = stem.with_suffix(".tsv"), stem.with_suffix(".json")
        tsv.write_text(self.to_tsv())
        js.write_text(self.to_json())
        return tsv, js


def read_tsv(path: str | Path) -> list[ClipScore]:
    rows = Path(path).read_text().splitlines()[1:]
    out = []
    for row in rows:
        clip, a, b, c, *err = row.split("\t")
        out.append(ClipScore(clip, float(a), float(b), float(c), err[0] if err else ""))
    return out

