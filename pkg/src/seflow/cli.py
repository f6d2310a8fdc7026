"""``seflow`` command-line interface.

Subcommands: ``mix``, ``train``, ``enhance``, ``evaluate`` and ``check``.
Exit codes are 0 on success, 1 for usage or configuration errors, 2 for
data errors (missing or malformed files) and 3 for numeric failures
(non-finite loss, singular flow, failed invariant checks).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import sys
import zlib
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio import AudioBuffer, MixManifest, load_pairs, mix_at_snr, read_wav, write_wav
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config, write_run_config
from .errors import AudioFormatError, CheckpointError, ConfigError, SEFlowError
from .flow import FlowModel, enhance
from .metrics import evaluate_pairs, write_comparison_csv
from .selfcheck import run_checks
from .training import train, write_history

logger = logging.getLogger("seflow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RESOLVED_FIELDS = ("clean", "noisy", "noise", "snr_db", "measured_snr_db", "split")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Raise instead of exiting with status 2 so usage errors map to exit 1."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def file_rng(seed: int, name: str) -> np.random.Generator:
    """Per-file generator, independent of processing order."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    return cfg.override(seed=args.seed)


# ------------------------------------------------------------------- mix


def measured_snr(clean: np.ndarray, noisy: np.ndarray) -> float:
    residual = np.sum((noisy.astype(np.float64) - clean) ** 2)
    return 10.0 * math.log10(np.sum(clean.astype(np.float64) ** 2) / residual) if residual > 0 else math.inf


def cmd_mix(args) -> int:
    manifest = MixManifest.read(args.manifest)
    seed = _load_config(args).seed
    out = Path(args.out)
    names = [r.clean_path.stem + ".wav" for r in manifest.records]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise AudioFormatError(f"duplicate output names in manifest: {', '.join(dupes)}")
    (out / "noisy").mkdir(parents=True, exist_ok=True)
    (out / "clean").mkdir(parents=True, exist_ok=True)
    rows, failures = [], 0
    for rec, name in zip(manifest.records, names):
        try:
            clean = read_wav(manifest.resolve(rec.clean_path))
            noise = read_wav(manifest.resolve(rec.noise_path))
            mix = mix_at_snr(clean, noise, rec.snr_db, file_rng(seed, name))
            write_wav(out / "noisy" / name, mix.noisy)
            write_wav(out / "clean" / name, mix.clean)
            snr = measured_snr(read_wav(out / "clean" / name).samples, read_wav(out / "noisy" / name).samples)
        except (SEFlowError, OSError) as exc:
            failures += 1
            logger.error("record %s failed: %s", rec.clean_path, exc)
            continue
        rows.append({
            "clean": f"clean/{name}",
            "noisy": f"noisy/{name}",
            "noise": str(manifest.resolve(rec.noise_path).resolve()),
            "snr_db": repr(rec.snr_db),
            "measured_snr_db": f"{snr:.6f}",
            "split": rec.split,
        })
        logger.info("%s: target %.2f dB, measured %.4f dB", name, rec.snr_db, snr)
    with open(out / "manifest.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=RESOLVED_FIELDS)
        w.writeheader()
        w.writerows(rows)
    if failures:
        logger.error("%d of %d records failed", failures, len(names))
        return EXIT_DATA
    return EXIT_OK


def read_resolved_manifest(path: str | Path) -> list[dict]:
    """Rows of a manifest written by ``seflow mix``, with absolute paths."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != RESOLVED_FIELDS:
            raise AudioFormatError(f"{path}: not a resolved manifest (header {reader.fieldnames})")
        rows = list(reader)
    for row in rows:
        for key in ("clean", "noisy"):
            p = Path(row[key])
            row[key] = p if p.is_absolute() else path.parent / p
    return rows


# ----------------------------------------------------------------- train


class _StopRequested(Exception):
    pass


def cmd_train(args) -> int:
    cfg = _load_config(args).override(
        manifest=Path(args.manifest) if args.manifest else None,
        out_dir=Path(args.out) if args.out else None,
    )
    if cfg.manifest is None:
        raise ConfigError("no manifest given (set [Paths] manifest or pass --manifest)")
    if cfg.out_dir is None:
        raise ConfigError("no output directory given (set [Paths] out_dir or pass --out)")
    cfg.validate_paths()
    rows = read_resolved_manifest(cfg.manifest)
    pairs = {s: [(r["clean"], r["noisy"]) for r in rows if r["split"] == s] for s in ("train", "val")}
    if not pairs["train"] or not pairs["val"]:
        raise AudioFormatError(f"{cfg.manifest}: need at least one train and one val record")
    train_set, val_set = load_pairs(pairs["train"]), load_pairs(pairs["val"])

    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    state = None
    if args.resume:
        model, state = load_checkpoint(args.resume, cfg.flow)
        if state is None:
            raise CheckpointError(f"{args.resume}: no training state stored")
        if model.mu != cfg.model_mu:
            raise ConfigError(f"{args.resume}: companding mu={model.mu} does not match config mu={cfg.model_mu}")
    else:
        model = FlowModel(cfg.flow, cfg.seed, mu=cfg.model_mu, dtype=np.float32)
    final_ckpt = out / "model.seflow"
    write_run_config(cfg, out / "config.ini")

    def on_epoch_end(m, st):
        save_checkpoint(m, st, out / "last.seflow")
        write_history(out / "history.csv", st.history)
        if args.stop_after is not None and st.epoch >= args.stop_after and st.phase != "done":
            raise _StopRequested

    try:
        result = train(model, train_set, val_set, cfg.train_config(), state=state, on_epoch_end=on_epoch_end)
    except _StopRequested:
        logger.info("stopped after epoch %d; resume with --resume %s", args.stop_after, out / "last.seflow")
        return EXIT_OK
    save_checkpoint(result.model, None, final_ckpt)
    write_history(out / "history.csv", result.history)
    write_run_config(dataclasses.replace(cfg, checkpoint=final_ckpt), out / "config.ini")
    logger.info(
        "best validation NLL %.4f (baseline %.4f); wrote %s",
        result.best_val_nll, result.state.baseline_val_nll, final_ckpt,
    )
    return EXIT_OK


# --------------------------------------------------------------- enhance


def _wav_inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(path.glob("*.wav"))
        if not files:
            raise FileNotFoundError(f"no .wav files in {path}")
        return files
    if not path.exists():
        raise FileNotFoundError(f"input not found: {path}")
    return [path]


def cmd_enhance(args) -> int:
    cfg = _load_config(args)
    model, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out) if args.out else cfg.out_dir
    if out is None:
        raise ConfigError("no output directory given (--out)")
    out.mkdir(parents=True, exist_ok=True)
    sigma = model.config.sigma_infer if args.sigma is None else args.sigma
    for path in _wav_inputs(Path(args.input)):
        y = read_wav(path)
        x = enhance(y, model, sigma, rng=file_rng(cfg.seed, path.name))
        write_wav(out / path.name, x)
        logger.info("enhanced %s (%.2f s)", path.name, y.duration)
    return EXIT_OK


# -------------------------------------------------------------- evaluate


def _load_matched(ref_dir: Path, test_dir: Path, what: str) -> list[tuple[str, AudioBuffer, AudioBuffer]]:
    for d in (ref_dir, test_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"not a directory: {d}")
    ref = {p.name for p in ref_dir.glob("*.wav")}
    test = {p.name for p in test_dir.glob("*.wav")}
    if ref != test:
        missing = [f"{n} (no {what} file)" for n in sorted(ref - test)]
        missing += [f"{n} (no clean file)" for n in sorted(test - ref)]
        raise AudioFormatError("unmatched files: " + "; ".join(missing))
    if not ref:
        raise FileNotFoundError(f"no .wav files in {ref_dir}")
    return [(n, read_wav(ref_dir / n), read_wav(test_dir / n)) for n in sorted(ref)]


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    items = _load_matched(Path(args.clean_dir), Path(args.test_dir), "test")
    report = evaluate_pairs(items)
    baseline = None
    if args.noisy:
        baseline = evaluate_pairs(_load_matched(Path(args.clean_dir), Path(args.noisy), "noisy"))
    out = Path(args.out) if args.out else (cfg.out_dir or Path("."))
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.csv"
    if baseline is None:
        report.write_csv(path)
    else:
        write_comparison_csv(path, report, baseline)
    print(f"{len(report.rows)} utterances: mean segSNR {report.mean_seg_snr_db:.3f} dB, "
          f"mean global SNR {report.mean_global_snr_db:.3f} dB")
    if baseline is not None:
        print(f"segSNR improvement over noisy: {report.mean_seg_snr_db - baseline.mean_seg_snr_db:+.3f} dB")
    print(f"report written to {path}")
    return EXIT_OK


# ----------------------------------------------------------------- check


def cmd_check(args) -> int:
    cfg = _load_config(args)
    model = None
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
    results = run_checks(args.level, cfg.seed, model=model)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_NUMERIC


# ------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run configuration INI file")
    common.add_argument("--seed", type=int, help="random seed (overrides [Run] seed)")
    common.add_argument("--out", help="output directory")

    parser = _Parser(prog="seflow", description="Flow-based speech enhancement in the time domain.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("mix", parents=[common], help="mix clean and noise files at target SNRs")
    p.add_argument("manifest", help="CSV with columns clean,noise,snr_db,split")
    p.set_defaults(func=cmd_mix, out_required=True)

    p = sub.add_parser("train", parents=[common], help="train a model on a mixed manifest")
    p.add_argument("--manifest", help="resolved manifest written by 'seflow mix'")
    p.add_argument("--resume", help="checkpoint with training state (last.seflow) to continue from")
    p.add_argument("--stop-after", type=int, metavar="N", help="stop once N epochs have completed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", parents=[common], help="enhance a WAV file or a directory of WAVs")
    p.add_argument("checkpoint", help="model checkpoint")
    p.add_argument("input", help="noisy WAV file or directory")
    p.add_argument("--sigma", type=float, help="latent standard deviation (default: the model's sigma_infer)")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", parents=[common], help="segmental and global SNR report")
    p.add_argument("clean_dir")
    p.add_argument("test_dir")
    p.add_argument("--noisy", help="directory of noisy inputs; adds improvement columns")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("check", parents=[common], help="run the invariant self-check suites")
    p.add_argument("--level", choices=("fast", "full"), default="fast")
    p.add_argument("--checkpoint", help="also check bijectivity of this checkpoint")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "out_required", False) and not args.out:
            parser.error(f"{args.command}: --out is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except ArithmeticError as exc:
        logger.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (SEFlowError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
