"""Datasets, Adam and the training loop.

Every random choice (epoch order, crop offsets, SNR draws) comes from a
generator seeded by ``(seed, epoch, batch)``, so a run is a pure function of
its configs and data, and a run resumed from any checkpoint continues exactly
as the unbroken one would have.
"""

from __future__ import annotations

import logging
import math
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping, Optional, Sequence

import numpy as np

from saf import checkpoint, dsp
from saf.dsp import AudioClip
from saf.model import ModelConfig, forward, init_params, partial_loss
from saf.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    beta1: float = 0.95
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 4
    max_clip_seconds: float = 3.0
    seed: int = 0
    snr_levels: tuple = (0.0, 5.0, 10.0, 15.0)
    max_steps: int = 0  # 0: no cap beyond ``epochs``
    checkpoint_every: int = 0  # extra mid-epoch checkpoints every N steps; 0: per epoch only

    def __post_init__(self):
        self.snr_levels = tuple(float(s) for s in self.snr_levels)
        self.validate()

    def validate(self) -> None:
        rates = (self.learning_rate, self.adam_eps, self.max_clip_seconds)
        if min(rates) <= 0:
            raise ValueError("learning_rate, adam_eps and max_clip_seconds must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.max_steps < 0 or self.checkpoint_every < 0:
            raise ValueError("max_steps and checkpoint_every must be >= 0")
        if not self.snr_levels:
            raise ValueError("snr_levels must not be empty")
        if dsp.n_frames_for(self.max_samples) < 1:
            raise ValueError("max_clip_seconds is shorter than one frame")

    @property
    def max_samples(self) -> int:
        return int(round(self.max_clip_seconds * dsp.SAMPLE_RATE))


# -- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: Mapping[str, Tensor], state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update of every parameter, in place.

    Uses the folded form ``p -= lr * sqrt(1 - b2^t) / (1 - b1^t) * m / (sqrt(v) + eps)``.
    """
    missing = [n for n, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for {len(missing)} parameter(s), e.g. {missing[:3]}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    step = cfg.learning_rate * math.sqrt(1.0 - b2**state.t) / (1.0 - b1**state.t)
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= step * m / (np.sqrt(v) + cfg.adam_eps)


# -- data ---------------------------------------------------------------------


@dataclass(frozen=True)
class PairRecord:
    noisy: Path
    clean: Path


@dataclass(frozen=True)
class MixRecord:
    clean: Path
    noise: Path
    snr_db: Optional[float]  # None: drawn from TrainConfig.snr_levels


def read_manifest(path: str | Path) -> list:
    """Parse ``noisy<TAB>clean`` or ``clean<TAB>noise<TAB>snr_db`` lines.

    Relative paths resolve against the manifest's directory. Blank lines and
    ``#`` comments are skipped. An SNR of ``*`` draws from ``snr_levels``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.rstrip("\n").split("\t")
        if len(cols) == 2:
            records.append(PairRecord(base / cols[0], base / cols[1]))
        elif len(cols) == 3:
            try:
                snr = None if cols[2].strip() == "*" else float(cols[2])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: snr_db must be a number or '*', got {cols[2]!r}") from None
            records.append(MixRecord(base / cols[0], base / cols[1], snr))
        else:
            raise ValueError(f"{path}:{lineno}: expected 2 or 3 tab-separated fields, got {len(cols)}")
    if not records:
        raise ValueError(f"{path}: manifest has no records")
    return records


class PairedDataset:
    """Noisy/clean training pairs with a seeded, per-epoch shuffle."""

    def __init__(self, records: Sequence, seed: int = 0, snr_levels: Sequence[float] = (0.0, 5.0, 10.0, 15.0)):
        if not records:
            raise ValueError("dataset is empty")
        self.records = list(records)
        self.seed = int(seed)
        self.snr_levels = tuple(snr_levels)

    @classmethod
    def from_manifest(cls, path, seed: int = 0, snr_levels=(0.0, 5.0, 10.0, 15.0)) -> "PairedDataset":
        return cls(read_manifest(path), seed, snr_levels)

    def __len__(self) -> int:
        return len(self.records)

    def order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.records))

    def load(self, index: int, rng: np.random.Generator) -> tuple[AudioClip, AudioClip]:
        """``(noisy, clean)`` for one record; in-memory records pass through."""
        rec = self.records[index]
        if isinstance(rec, tuple) and len(rec) == 2 and isinstance(rec[0], AudioClip):
            return rec
        if isinstance(rec, PairRecord):
            noisy, clean = dsp.read_wav(rec.noisy), dsp.read_wav(rec.clean)
            if len(noisy) != len(clean):
                raise ValueError(f"{rec.noisy} and {rec.clean} differ in length ({len(noisy)} vs {len(clean)})")
            return noisy, clean
        snr = rec.snr_db if rec.snr_db is not None else float(rng.choice(self.snr_levels))
        mix = dsp.mix_at_snr(dsp.read_wav(rec.clean), dsp.read_wav(rec.noise), snr)
        return mix.noisy, mix.clean


@dataclass
class Batch:
    bundles: list  # SpectraBundle per clip, zero-padded to the batch's longest clip
    targets: list  # TargetSpectra per clip, same padding
    valid_frames: list  # frames per clip that hold real signal

    def __len__(self) -> int:
        return len(self.bundles)


def prepare_batch(
    dataset: PairedDataset, indices: Sequence[int], max_samples: int, rng: np.random.Generator
) -> Batch:
    """Load, crop to ``max_samples`` at a random offset, pad to a common length."""
    pairs = []
    for i in indices:
        try:
            noisy, clean = dataset.load(int(i), rng)
        except (OSError, ValueError) as e:
            logger.warning("skipping record %d: %s", i, e)
            continue
        n = len(noisy)
        if n < dsp.WIN_LENGTH:
            logger.warning("skipping record %d: %d samples is shorter than one frame", i, n)
            continue
        if n > max_samples:
            off = int(rng.integers(0, n - max_samples + 1))
            noisy = AudioClip(noisy.samples[off : off + max_samples])
            clean = AudioClip(clean.samples[off : off + max_samples])
        pairs.append((noisy, clean))
    if not pairs:
        raise ValueError(f"batch {list(indices)} has no loadable clips")

    longest = max(len(noisy) for noisy, _ in pairs)
    batch = Batch([], [], [])
    for noisy, clean in pairs:
        pad = longest - len(noisy)
        batch.valid_frames.append(dsp.n_frames_for(len(noisy)))
        batch.bundles.append(dsp.make_bundle(AudioClip(np.pad(noisy.samples, (0, pad)))))
        batch.targets.append(dsp.make_target(AudioClip(np.pad(clean.samples, (0, pad)))))
    return batch


# -- loss + gradients ---------------------------------------------------------


@dataclass
class StepLoss:
    l_mag: float
    l_ri: float
    l_total: float

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.l_mag, self.l_ri, self.l_total))


def accumulate_gradients(batch: Batch, params, cfg: ModelConfig, backward: bool = True) -> StepLoss:
    """Batch loss over valid frames; grads land in ``params[*].grad``.

    Clips run one at a time. Padded frames are cropped before the network, so
    they influence neither the loss nor the gradient.
    """
    n_total = sum(v * b.n_bins for v, b in zip(batch.valid_frames, batch.bundles))
    sums = [0.0, 0.0, 0.0]
    for bundle, target, valid in zip(batch.bundles, batch.targets, batch.valid_frames):
        enh, _ = forward(bundle.crop(valid), params, cfg)
        terms = partial_loss(enh, target.crop(valid), n_total)
        for k, v in enumerate(terms.values()):
            sums[k] += v
        if backward:
            terms.l_total.backward()
    return StepLoss(*sums)


# -- loop ---------------------------------------------------------------------


class NonFiniteLoss(RuntimeError):
    pass


LOSS_LOG = "loss.log"
BEST_MANIFEST = "best.txt"


@dataclass
class TrainResult:
    history: list  # (step, StepLoss)
    final_checkpoint: Path
    best_checkpoint: Optional[Path]
    params: dict


def _n_threads() -> int:
    try:
        return max(0, int(os.environ.get("SAF_THREADS", "0") or 0))
    except ValueError:
        return 0


def _schedule(dataset: PairedDataset, cfg: TrainConfig, start_epoch: int, start_batch: int) -> Iterator:
    """``(epoch, batch, indices)`` for every remaining step, in training order."""
    per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    for epoch in range(start_epoch, cfg.epochs):
        order = dataset.order(epoch)
        for b in range(start_batch if epoch == start_epoch else 0, per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            yield epoch, b, idx


def _load_job(dataset: PairedDataset, cfg: TrainConfig, epoch: int, b: int, idx) -> Batch:
    rng = np.random.default_rng([cfg.seed, epoch, b])
    return prepare_batch(dataset, idx, cfg.max_samples, rng)


def _format_loss(step: int, loss: StepLoss) -> str:
    return f"{step}\t{loss.l_mag!r}\t{loss.l_ri!r}\t{loss.l_total!r}"


def read_loss_log(path: str | Path) -> list[tuple[int, StepLoss]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") or not line.strip():
            continue
        step, *vals = line.split("\t")
        out.append((int(step), StepLoss(*(float(v) for v in vals))))
    return out


class _Run:
    """Mutable state of one training run; everything here goes into checkpoints."""

    def __init__(self, model_cfg, train_cfg, dataset, out: Path, params, state: AdamState, step: int):
        self.model_cfg, self.train_cfg, self.dataset, self.out = model_cfg, train_cfg, dataset, out
        self.params, self.state, self.step = params, state, step
        self.per_epoch = math.ceil(len(dataset) / train_cfg.batch_size)
        self.best_loss, self.best_name = math.inf, ""
        self.epoch_sum, self.epoch_count = 0.0, 0

    def bookkeeping(self) -> dict:
        epoch, batch = divmod(self.step, self.per_epoch)
        return {
            "step": self.step, "epoch": epoch, "batch": batch, "adam_t": self.state.t,
            "seed": self.train_cfg.seed, "best_loss": repr(self.best_loss), "best_name": self.best_name,
            "epoch_loss_sum": repr(self.epoch_sum), "epoch_loss_count": self.epoch_count,
        }

    def restore(self, saved: Mapping[str, str]) -> None:
        self.best_loss = float(saved.get("best_loss", "inf"))
        self.best_name = saved.get("best_name", "")
        self.epoch_sum = float(saved.get("epoch_loss_sum", "0.0"))
        self.epoch_count = int(saved.get("epoch_loss_count", 0))

    def save(self, name: str) -> Path:
        return checkpoint.save(self.out / name, self.model_cfg, self.params, self.bookkeeping(),
                               self.state.m, self.state.v)

    def run_step(self, batch: Batch) -> StepLoss:
        for p in self.params.values():
            p.grad = None
        loss = accumulate_gradients(batch, self.params, self.model_cfg)
        step = self.step + 1
        if not loss.is_finite():
            epoch, b = divmod(self.step, self.per_epoch)
            raise NonFiniteLoss(
                f"non-finite loss at step {step} (epoch {epoch + 1}, batch {b + 1}): "
                f"l_mag={loss.l_mag} l_ri={loss.l_ri} l_total={loss.l_total}"
            )
        adam_step(self.params, self.state, self.train_cfg)
        self.step = step
        self.epoch_sum += loss.l_total
        self.epoch_count += 1
        return loss

    def after_step(self) -> None:
        epoch, batch = divmod(self.step, self.per_epoch)
        if batch == 0:
            mean = self.epoch_sum / self.epoch_count
            self.epoch_sum, self.epoch_count = 0.0, 0
            name = f"epoch_{epoch:03d}.saf"
            improved = mean < self.best_loss
            if improved:
                self.best_loss, self.best_name = mean, name
            self.save(name)
            if improved:
                (self.out / BEST_MANIFEST).write_text(
                    f"epoch\tstep\tmean_l_total\tcheckpoint\n{epoch}\t{self.step}\t{mean!r}\t{name}\n"
                )
                _link_best(self.out, name)
        elif self.train_cfg.checkpoint_every and self.step % self.train_cfg.checkpoint_every == 0:
            self.save(f"step_{self.step:06d}.saf")


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: PairedDataset,
    out_dir: str | Path,
    resume: Optional[str | Path] = None,
    on_step: Optional[Callable[[int, StepLoss], None]] = None,
) -> TrainResult:
    """Run Adam over ``dataset``, writing checkpoints and ``loss.log`` to ``out_dir``.

    ``epoch_XXX.saf`` is written after every epoch (plus ``step_XXXXXX.saf``
    every ``checkpoint_every`` steps), ``final.saf`` holds the last state, and
    ``best.txt`` / ``best.saf`` point at the epoch with the lowest mean loss.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"checkpoint directory is not writable: {out}")

    history: list = []
    if resume is not None:
        ckpt = checkpoint.load(resume, expect=model_cfg)
        state = AdamState(dict(ckpt.adam_m), dict(ckpt.adam_v), int(ckpt.state.get("adam_t", 0)))
        if state.m.keys() != ckpt.params.keys():
            raise checkpoint.CheckpointError(f"{resume}: optimizer state does not cover the parameters")
        run = _Run(model_cfg, train_cfg, dataset, out, ckpt.params, state, int(ckpt.state.get("step", 0)))
        run.restore(ckpt.state)
        if (out / LOSS_LOG).exists():
            history = [h for h in read_loss_log(out / LOSS_LOG) if h[0] <= run.step]
    else:
        run = _Run(model_cfg, train_cfg, dataset, out, init_params(model_cfg, train_cfg.seed), AdamState(), 0)

    limit = run.per_epoch * train_cfg.epochs
    if train_cfg.max_steps:
        limit = min(limit, train_cfg.max_steps)
    jobs = list(_schedule(dataset, train_cfg, *divmod(run.step, run.per_epoch)))[: max(0, limit - run.step)]

    threads = _n_threads()
    with open(out / LOSS_LOG, "w") as log, ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        log.write("# step\tl_mag\tl_ri\tl_total\n")
        for s, loss in history:
            log.write(_format_loss(s, loss) + "\n")
        # Batches are prepared up to ``threads`` ahead but always consumed in order.
        ahead = [pool.submit(_load_job, dataset, train_cfg, *job) for job in jobs[:threads]]
        for k, job in enumerate(jobs):
            if threads:
                if k + threads < len(jobs):
                    ahead.append(pool.submit(_load_job, dataset, train_cfg, *jobs[k + threads]))
                batch = ahead.pop(0).result()
            else:
                batch = _load_job(dataset, train_cfg, *job)
            loss = run.run_step(batch)
            history.append((run.step, loss))
            log.write(_format_loss(run.step, loss) + "\n")
            log.flush()
            if on_step is not None:
                on_step(run.step, loss)
            run.after_step()

    final = run.save("final.saf")
    best = out / run.best_name if run.best_name else None
    return TrainResult(history, final, best, run.params)


def _link_best(out: Path, name: str) -> None:
    link = out / "best.saf"
    if link.is_symlink() or link.exists():
        link.unlink()
    try:
        link.symlink_to(name)
    except OSError:
        shutil.copyfile(out / name, link)
