"""Command-line entry point wiring the pipeline into reproducible runs.

Subcommands::

    hbrnet phantom       --out DIR   synthesize the cohort onto disk
    hbrnet train-stage1  --out DIR   fit the corrector, write its checkpoint
    hbrnet train-stage2  --out DIR   fit the classifier against the frozen corrector
    hbrnet eval          --out DIR   score the held-out split from the checkpoints
    hbrnet cv            --out DIR   k-fold cross-validation report
    hbrnet heatmap       --out DIR   probability-map stack for one patient

Common flags: ``--config FILE`` (key=value lines, '#' comments), repeated
``--set key=value`` overrides, ``--out DIR`` (shorthand for ``--set
out=DIR``).  Flags override file values override defaults.  Every run
writes the fully resolved table to ``<out>/config.resolved`` and takes an
exclusive lock file on the output directory for its duration.

Exit codes: 0 success, 1 usage or config error, 2 missing prerequisite
artifact, 3 runtime failure.  ``HBRNET_THREADS`` caps the worker count;
every step currently runs single-process, so the cap only validates.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import read_checkpoint, write_checkpoint
from .config import ConfigError, RunConfig, parse_config
from .detector import Detector, predict_patches, train_stage2
from .evaluate import _flatten_2d, cross_validate, make_folds, render_heatmap, \
    score_predictions, write_heatmap_pgm
from .figures import fold_metrics_figure, heatmap_montage_figure, save_figure, \
    split_metrics_figure, training_curve_figure
from .hunet import HUNet, freeze, train_stage1
from .patches import build_dataset
from .phantom import generate_cohort, load_cohort, write_cohort
from .rng import RngStream

__all__ = ["main", "run", "DependencyError"]

SUBCOMMANDS = ("phantom", "train-stage1", "train-stage2", "eval", "cv", "heatmap")


class DependencyError(RuntimeError):
    """A required artifact from an earlier subcommand is missing."""


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); keep codes stable
        raise _UsageError(message)


def thread_cap() -> int:
    """Validated worker cap from HBRNET_THREADS (default 1)."""
    raw = os.environ.get("HBRNET_THREADS")
    if raw is None:
        return 1
    try:
        cap = int(raw)
    except ValueError:
        cap = 0
    if cap < 1:
        raise ConfigError(f"HBRNET_THREADS must be a positive integer, got {raw!r}")
    return cap


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_log(path: Path, lines) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing {path}; run '{hint}' first")
    return path


def _load_records(out: Path):
    manifest = _require(out / "cohort" / "manifest.json", "phantom")
    return load_cohort(manifest)


def _split(records, cfg: RunConfig):
    """Deterministic stratified holdout: one validation fold of the
    round(1/holdout_fraction)-way split."""
    frac = cfg["eval.holdout_fraction"]
    k = max(2, int(round(1.0 / frac)))
    folds = make_folds([(r.patient_id, r.has_cancer) for r in records], k, cfg.seed)
    held = set(folds.validation(0))
    train = [r for r in records if r.patient_id not in held]
    holdout = [r for r in records if r.patient_id in held]
    return train, holdout


def _load_stage1(out: Path, cfg: RunConfig):
    path = _require(out / "stage1" / "checkpoint.npz", "train-stage1")
    net = HUNet(cfg.hunet_config(), rng=RngStream(cfg.seed).derive("stage1-init"))
    net.load_arrays(read_checkpoint(path))
    return freeze(net)


def _load_stage2(out: Path, cfg: RunConfig) -> Detector:
    path = _require(out / "stage2" / "checkpoint.npz", "train-stage2")
    det = Detector(cfg.resnet_config(), rng=RngStream(cfg.seed).derive("stage2-init"))
    det.load_arrays(read_checkpoint(path))
    det.eval()
    return det


def _check_stage_pairing(out: Path, frozen) -> None:
    hash_path = out / "stage2" / "stage1_hash.txt"
    if not hash_path.exists():
        return
    recorded = hash_path.read_text().strip()
    current = "none" if frozen is None else frozen.hash
    if recorded != current:
        raise DependencyError(
            "stage-2 checkpoint was trained against a different stage-1 corrector "
            f"(recorded {recorded[:12]}, loaded {current[:12]}); rerun train-stage2"
        )


def _cmd_phantom(cfg: RunConfig, out: Path) -> None:
    records, _ = generate_cohort(cfg.cohort_spec())
    write_cohort(records, out / "cohort")


def _cmd_train_stage1(cfg: RunConfig, out: Path) -> None:
    train, _ = _split(_load_records(out), cfg)
    net, log = train_stage1(train, cfg.hunet_config(), cfg.stage1_hyper())
    (out / "stage1").mkdir(parents=True, exist_ok=True)
    write_checkpoint(out / "stage1" / "checkpoint.npz", net.named_arrays())
    _write_log(out / "stage1" / "train_log.csv", log)
    save_figure(training_curve_figure(log), out / "stage1" / "training_curve.png")


def _cmd_train_stage2(cfg: RunConfig, out: Path) -> None:
    records = _load_records(out)
    train, _ = _split(records, cfg)
    frozen = _load_stage1(out, cfg) if cfg["eval.use_stage1"] else None
    ds = build_dataset(train, frozen, cfg.patch_config(), split="train")
    if cfg["eval.two_d_only"]:
        ds.data[...] = _flatten_2d(ds.data)
    det, log = train_stage2(ds, frozen, cfg.stage2_hyper(), cfg.resnet_config())
    (out / "stage2").mkdir(parents=True, exist_ok=True)
    write_checkpoint(out / "stage2" / "checkpoint.npz", det.named_arrays())
    _write_log(out / "stage2" / "train_log.csv", log)
    hash_text = "none" if frozen is None else frozen.hash
    (out / "stage2" / "stage1_hash.txt").write_text(hash_text + "\n")
    save_figure(training_curve_figure(log), out / "stage2" / "training_curve.png")


def _prepare_inference(cfg: RunConfig, out: Path):
    frozen = _load_stage1(out, cfg) if cfg["eval.use_stage1"] else None
    det = _load_stage2(out, cfg)
    _check_stage_pairing(out, frozen)
    return frozen, det


def _cmd_eval(cfg: RunConfig, out: Path) -> None:
    records = _load_records(out)
    _, holdout = _split(records, cfg)
    frozen, det = _prepare_inference(cfg, out)
    patch_cfg = cfg.patch_config()
    ds = build_dataset(holdout, frozen, patch_cfg, split="eval")
    if cfg["eval.two_d_only"]:
        ds.data[...] = _flatten_2d(ds.data)
    probs = predict_patches(ds.data, det)
    scored = score_predictions(holdout, ds, probs, cfg.cv_config(), patch_cfg)
    scored["holdout"] = sorted(r.patient_id for r in holdout)
    _write_json(out / "eval" / "metrics.json", scored)
    save_figure(split_metrics_figure(scored), out / "eval" / "metrics.png")


def _cmd_cv(cfg: RunConfig, out: Path) -> None:
    report = cross_validate(_load_records(out), cfg.cv_config())
    _write_json(out / "cv" / "report.json", report)
    save_figure(fold_metrics_figure(report), out / "cv" / "fold_metrics.png")


def _cmd_heatmap(cfg: RunConfig, out: Path) -> None:
    records = _load_records(out)
    wanted = cfg["eval.heatmap_patient"]
    matches = [r for r in records if r.patient_id == wanted]
    if not matches:
        raise ConfigError(
            f"key 'eval.heatmap_patient': no patient {wanted!r} in the cohort"
        )
    rec = matches[0]
    frozen, det = _prepare_inference(cfg, out)
    patch_cfg = cfg.patch_config()
    ds = build_dataset([rec], frozen, patch_cfg, split="eval")
    if cfg["eval.two_d_only"]:
        ds.data[...] = _flatten_2d(ds.data)
    probs = predict_patches(ds.data, det)
    heat = render_heatmap(
        probs, ds.slices, ds.centers, rec.observed.data.shape[1:], rec.prostate_mask,
        patch_size=patch_cfg.patch_size, dilate_radius=patch_cfg.dilate_radius,
    )
    hm_dir = out / "heatmap"
    hm_dir.mkdir(parents=True, exist_ok=True)
    write_heatmap_pgm(heat, hm_dir, rec.patient_id)
    fig = heatmap_montage_figure(heat, rec.prostate_mask.values)
    save_figure(fig, hm_dir / f"{rec.patient_id}_montage.png")


_COMMANDS = {
    "phantom": _cmd_phantom,
    "train-stage1": _cmd_train_stage1,
    "train-stage2": _cmd_train_stage2,
    "eval": _cmd_eval,
    "cv": _cmd_cv,
    "heatmap": _cmd_heatmap,
}


def run(subcommand: str, cfg: RunConfig) -> int:
    """Execute one subcommand under the output-directory lock; returns the
    process exit code and prints failures to stderr."""
    if subcommand not in _COMMANDS:
        print(f"usage error: unknown subcommand {subcommand!r}", file=sys.stderr)
        return 1
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / "run.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        print(
            f"error: output directory {out} is locked by another run "
            f"(remove {lock} if that run is dead)",
            file=sys.stderr,
        )
        return 3
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(f"pid={os.getpid()} subcommand={subcommand}\n")
        (out / "config.resolved").write_text(cfg.resolved_text())
        _COMMANDS[subcommand](cfg, out)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    finally:
        if lock.exists():
            lock.unlink()


def main(argv=None) -> int:
    parser = _Parser(prog="hbrnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="subcommand")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, add_help=True)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--out", default=None, help="output directory (overrides 'out')")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       dest="sets", help="override one config key")
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        thread_cap()
        sets = list(args.sets)
        if args.out is not None:
            sets.append(f"out={args.out}")
        cfg = parse_config(args.config, sets)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    return run(args.subcommand, cfg)


if __name__ == "__main__":
    sys.exit(main())
