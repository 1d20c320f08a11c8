"""``saf`` command-line entry point.

Subcommands: ``train``, ``enhance``, ``eval``, ``params`` and ``selfcheck``.
Each prints its effective configuration (as a loadable ``key=value`` file)
before doing any work. Exit status is 0 on success, 1 on a runtime failure
and 2 on a usage or validation error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from saf import checkpoint, config, dsp, metrics
from saf.checkpoint import CheckpointError
from saf.config import ConfigError, RunConfig

logger = logging.getLogger("saf")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _threads() -> int:
    raw = os.environ.get("SAF_THREADS", "0") or "0"
    try:
        return max(0, int(raw))
    except ValueError:
        raise UsageError(f"SAF_THREADS must be an integer, got {raw!r}") from None


def _echo(cfg: RunConfig | None, **extra) -> None:
    if cfg is not None:
        sys.stdout.write(cfg.render())
    for key, value in extra.items():
        sys.stdout.write(f"# {key}={value}\n")
    sys.stdout.flush()


def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_run_config(args) -> RunConfig:
    path = Path(args.config) if args.config else None
    if path is not None:
        _require_file(path, "config file")
    return config.load(path, args.set or ())


def _load_model(path: Path, expect=None) -> checkpoint.Checkpoint:
    _require_file(path, "checkpoint")
    return checkpoint.load(path, expect=expect)


# -- subcommands --------------------------------------------------------------


def cmd_train(args) -> int:
    from saf import plotting
    from saf.training import PairedDataset, train

    cfg = _load_run_config(args)
    manifest = _require_file(Path(args.data), "training manifest")
    out = Path(args.out)
    _echo(cfg, data=manifest, out=out, resume=args.resume or "")
    try:
        dataset = PairedDataset.from_manifest(manifest, cfg.train.seed, cfg.train.snr_levels)
    except ValueError as e:
        raise UsageError(str(e)) from None
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.render())

    every = max(1, args.log_every)

    def report(step, loss):
        if step % every == 0:
            print(f"step {step}\tl_mag {loss.l_mag:.6g}\tl_ri {loss.l_ri:.6g}\tl_total {loss.l_total:.6g}", flush=True)

    result = train(cfg.model, cfg.train, dataset, out, resume=args.resume, on_step=report)
    figure = plotting.loss_curve(result.history, out / "loss_curve.png") if result.history else None
    last = result.history[-1][1].l_total if result.history else float("nan")
    print(
        f"done steps={len(result.history)} final_l_total={last:.6g} checkpoint={result.final_checkpoint}"
        f" best={result.best_checkpoint or '-'} loss_log={out / 'loss.log'} figure={figure or '-'}"
    )
    return EXIT_OK


def _wav_jobs(src: Path, dst: Path) -> list[tuple[Path, Path]]:
    if src.is_dir():
        files = sorted(src.glob("*.wav"))
        if not files:
            raise UsageError(f"no .wav files in {src}")
        dst.mkdir(parents=True, exist_ok=True)
        return [(f, dst / f.name) for f in files]
    _require_file(src, "input audio")
    if dst.is_dir():
        return [(src, dst / src.name)]
    return [(src, dst)]


def cmd_enhance(args) -> int:
    from saf.enhance import enhance, inference_params

    expect = _load_run_config(args).model if args.config or args.set else None
    ckpt = _load_model(Path(args.model), expect)
    _echo(RunConfig(model=ckpt.config), model=args.model, input=args.input, output=args.output)
    params = inference_params(ckpt.params)
    jobs = _wav_jobs(Path(args.input), Path(args.output))
    for src, dst in jobs:
        clip = dsp.read_wav(src)
        dsp.write_wav(dst, enhance(clip, params, ckpt.config))
        print(f"{src} -> {dst} ({len(clip)} samples)")
    return EXIT_OK


def _read_pairs(path: Path) -> list[tuple[Path, Path]]:
    from saf.training import PairRecord, read_manifest

    try:
        records = read_manifest(_require_file(path, "pair manifest"))
    except ValueError as e:
        raise UsageError(str(e)) from None
    bad = [r for r in records if not isinstance(r, PairRecord)]
    if bad:
        raise UsageError(f"{path}: eval needs noisy<TAB>clean lines, found a mix spec")
    return [(r.noisy, r.clean) for r in records]


def _score(job) -> tuple[metrics.ClipScore, Optional[metrics.ClipScore]]:
    clip_id, noisy_path, clean_path, params, model_cfg = job
    try:
        noisy, clean = dsp.read_wav(noisy_path), dsp.read_wav(clean_path)
        if len(noisy) != len(clean):
            raise ValueError(f"length mismatch ({len(noisy)} vs {len(clean)} samples)")
        if params is None:
            return metrics.score_clip(clip_id, clean, noisy), None
        from saf.enhance import enhance

        enhanced = enhance(noisy, params, model_cfg)
        return metrics.score_clip(clip_id, clean, enhanced), metrics.score_clip(clip_id, clean, noisy)
    except Exception as e:  # noqa: BLE001  per-clip isolation
        logger.warning("clip %s failed: %s", clip_id, e)
        failed = metrics.ClipScore(clip_id, error=f"{type(e).__name__}: {e}")
        return failed, failed


def cmd_eval(args) -> int:
    from saf import plotting
    from saf.enhance import inference_params

    pairs = _read_pairs(Path(args.pairs))
    params = model_cfg = None
    if args.model:
        ckpt = _load_model(Path(args.model))
        params, model_cfg = inference_params(ckpt.params), ckpt.config
        _echo(RunConfig(model=model_cfg), model=args.model, pairs=args.pairs, report=args.report)
    else:
        _echo(None, model="none (scoring the noisy input)", pairs=args.pairs, report=args.report)

    ids = _clip_ids(pairs)
    jobs = [(cid, n, c, params, model_cfg) for cid, (n, c) in zip(ids, pairs)]
    threads = _threads()
    if threads:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scored = list(pool.map(_score, jobs))  # map keeps manifest order
    else:
        scored = [_score(j) for j in jobs]

    report = metrics.EvalReport([s for s, _ in scored])
    if not report.succeeded:
        logger.error("no clip could be evaluated")
        return EXIT_RUNTIME
    baseline = metrics.EvalReport([b for _, b in scored]) if params is not None else None
    stem = Path(args.report)
    stem.parent.mkdir(parents=True, exist_ok=True)
    tsv, js = report.write(stem)
    fig = plotting.metrics_figure(report, tsv.with_suffix(".png"), baseline)
    means = report.means()
    print(
        f"clips={len(report.records)} ok={len(report.succeeded)} stoi={means['stoi']:.4f}"
        f" ssnr={means['ssnr']:.3f} si_sdr={means['si_sdr']:.3f} report={tsv} json={js} figure={fig}"
    )
    if baseline is not None and baseline.succeeded:
        b = baseline.means()
        print(f"noisy stoi={b['stoi']:.4f} ssnr={b['ssnr']:.3f} si_sdr={b['si_sdr']:.3f}")
    return EXIT_OK


def _clip_ids(pairs) -> list[str]:
    ids, seen = [], {}
    for noisy, _ in pairs:
        stem = noisy.stem
        seen[stem] = seen.get(stem, 0) + 1
        ids.append(stem if seen[stem] == 1 else f"{stem}#{seen[stem]}")
    return ids


def cmd_params(args) -> int:
    from saf.model import count_by_module, count_params

    cfg = _load_run_config(args)
    _echo(cfg)
    for module, n in count_by_module(cfg.model).items():
        print(f"{module}\t{n}")
    print(f"total\t{count_params(cfg.model)}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from saf.selfcheck import run_all

    _echo(RunConfig())
    results = run_all()
    failed = [r.name for r in results if not r.ok]
    print(f"selfcheck: {len(results) - len(failed)}/{len(results)} passed")
    return EXIT_RUNTIME if failed else EXIT_OK


# -- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="saf", description="Spectrum attention fusion speech enhancement.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")

    t = sub.add_parser("train", help="train a model on a manifest of pairs")
    with_config(t)
    t.add_argument("--data", required=True, help="manifest: noisy<TAB>clean or clean<TAB>noise<TAB>snr_db")
    t.add_argument("--out", required=True, help="directory for checkpoints, loss log and figure")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--log-every", type=int, default=10, help="print the loss every N steps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enhance", help="enhance a WAV file (or a directory of them)")
    with_config(e)
    e.add_argument("--model", required=True, help="checkpoint file")
    e.add_argument("--in", dest="input", required=True, help="noisy WAV file or directory")
    e.add_argument("--out", dest="output", required=True, help="output WAV file or directory")
    e.set_defaults(func=cmd_enhance)

    v = sub.add_parser("eval", help="score clean/processed pairs")
    v.add_argument("--model", help="checkpoint; without it the noisy input itself is scored")
    v.add_argument("--pairs", required=True, help="manifest of noisy<TAB>clean lines")
    v.add_argument("--report", required=True, help="output stem; writes .tsv, .json and .png")
    v.set_defaults(func=cmd_eval)

    s = sub.add_parser("params", help="print trainable parameter counts")
    with_config(s)
    s.set_defaults(func=cmd_params)

    c = sub.add_parser("selfcheck", help="run gradient, signal-path and optimizer checks")
    c.set_defaults(func=cmd_selfcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError, FileNotFoundError) as e:
        print(f"saf {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001  top-level: report, never traceback-dump by default
        logger.debug("unhandled error", exc_info=True)
        print(f"saf {args.command}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
