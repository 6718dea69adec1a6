"""prompt-adapt command line: gen-data, train-source, adapt, sweep, report."""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import ckpt
from . import classifier as clf
from . import report as rpt
from .adapt import AdaptState, NumericError, evaluate_frozen, run_stream
from .config import ConfigError, RunConfig, load_config, parse_fixed
from .data import build_stream, generate_glyphs, load_dataset, save_dataset
from .prompts import PromptPair, init_prompts, save_prompts

log = logging.getLogger("prompt_adapt")

EXIT_OK, EXIT_REFUSED, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3, 4


class MissingArtifact(FileNotFoundError):
    pass


class Refused(RuntimeError):
    pass


def _train_path(cfg: RunConfig) -> Path:
    return cfg.data_dir / "train.tensors.gz"


def _test_path(cfg: RunConfig) -> Path:
    return cfg.data_dir / "test.tensors.gz"


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{path} not found (run `prompt-adapt {hint}` first)")
    return path


def _echo(cfg: RunConfig) -> dict:
    # location fields do not influence results, so they stay out of the echo
    d = cfg.to_dict()
    d.pop("output_dir")
    d.pop("run_name")
    return d


def _write_meta(directory: Path, command: str, started: float) -> None:
    meta = {
        "command": command,
        "started_unix": started,
        "finished_unix": time.time(),
        "wall_seconds": time.time() - started,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    (directory / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig, force: bool = False) -> dict:
    d = cfg.data
    train = generate_glyphs(d.n_train, d.num_classes, seed=d.seed)
    test = generate_glyphs(d.n_test, d.num_classes, seed=d.seed + 1)
    cfg.data_dir.mkdir(parents=True, exist_ok=True)
    save_dataset(train, _train_path(cfg))
    save_dataset(test, _test_path(cfg))
    manifest = {
        "train": {"file": _train_path(cfg).name, "n": len(train), "sha256": ckpt.file_sha256(_train_path(cfg))},
        "test": {"file": _test_path(cfg).name, "n": len(test), "sha256": ckpt.file_sha256(_test_path(cfg))},
        "num_classes": d.num_classes,
        "seed": d.seed,
    }
    (cfg.data_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(train)} train / {len(test)} test glyphs to {cfg.data_dir}")
    return manifest


def cmd_train_source(cfg: RunConfig, force: bool = False) -> float:
    train = load_dataset(_require(_train_path(cfg), "gen-data"))
    test = load_dataset(_require(_test_path(cfg), "gen-data"))
    if cfg.checkpoint_path.exists() and not force:
        raise Refused(f"{cfg.checkpoint_path} exists; pass --force to retrain")
    if train.num_classes != cfg.data.num_classes:
        raise ConfigError(f"dataset has {train.num_classes} classes, config says {cfg.data.num_classes}")
    model = clf.build_default(train.num_classes, train.images.shape[1:], seed=cfg.seed)
    curve = clf.train_source(model, train.images, train.labels, cfg.train_config())
    if not all(np.isfinite(curve)):
        raise NumericError(len(curve), "training loss")
    model.freeze()
    acc = clf.accuracy(model, test.images, test.labels)
    clf.save(model, cfg.checkpoint_path, extra_meta={"clean_test_accuracy": acc, "train_loss": curve})
    print(f"clean test accuracy {100 * acc:.2f}%  ({model.param_count()} parameters, checkpoint {cfg.checkpoint_path})")
    return acc


def run_adapt(cfg: RunConfig, run_dir: Path) -> dict:
    """One full adaptation run into ``run_dir``; returns the summary."""
    ckpt_path = _require(cfg.checkpoint_path, "train-source")
    train = load_dataset(_require(_train_path(cfg), "gen-data"))
    test = load_dataset(_require(_test_path(cfg), "gen-data"))
    ckpt_before = ckpt.file_sha256(ckpt_path)
    model = clf.load(ckpt_path).freeze()
    params_before = model.checksum()

    acfg = cfg.adapt_config()
    stream = build_stream(test, cfg.schedule_dict(), batch_size=acfg.batch_size, seed=cfg.seed)
    pair = PromptPair.zeros(
        model.geometry[0], acfg.dsp_size, acfg.dap_size,
        policy=acfg.placement, fixed_anchor=acfg.fixed_anchor, offset=acfg.offset,
    )
    log.info("warm-up: %d epochs on %d source images", acfg.warmup_epochs, len(train))
    pair = init_prompts(
        pair, train.images, train.labels, model,
        epochs=acfg.warmup_epochs, lr=acfg.lr, batch_size=acfg.batch_size, seed=cfg.seed,
        train_dsp=not acfg.disable_dsp, train_dap=not acfg.disable_dap,
    )
    log.info("adapting over %d batches", len(stream))
    state = AdaptState.start(pair, acfg)
    metrics = run_stream(state, model, stream)
    source = evaluate_frozen(model, stream)

    if model.checksum() != params_before or ckpt.file_sha256(ckpt_path) != ckpt_before:
        raise RuntimeError("classifier changed during adaptation")

    run_dir.mkdir(parents=True, exist_ok=True)
    metrics.write_csv(run_dir / "metrics.csv")
    save_prompts(run_dir / "prompts.ckpt", teacher=state.teacher, student=state.student)
    domains = [(d.family, d.severity, d.round) for d in stream.domains]
    summary = rpt.summarize(
        metrics.rows, metrics.rounds, source, domains,
        extra={
            "config": _echo(cfg),
            "seed": cfg.seed,
            "checksums": {
                "classifier_file": ckpt_before,
                "classifier_params": params_before,
                "metrics_csv": ckpt.file_sha256(run_dir / "metrics.csv"),
                "prompts": ckpt.file_sha256(run_dir / "prompts.ckpt"),
            },
        },
    )
    rpt.write_summary(run_dir / "summary.json", summary)
    (run_dir / "report.txt").write_text(rpt.run_report_text(run_dir.name, summary))
    return summary


def cmd_adapt(cfg: RunConfig, force: bool = False) -> dict:
    started = time.time()
    summary = run_adapt(cfg, cfg.run_dir)
    _write_meta(cfg.run_dir, "adapt", started)
    print((cfg.run_dir / "report.txt").read_text(), end="")
    return summary


def sweep_point(cfg: RunConfig, axis: str, value) -> RunConfig:
    point = copy.deepcopy(cfg)
    if axis == "prompt_size":
        point.adapt.dsp_size = point.adapt.dap_size = int(value)
    elif axis == "relative_offset":
        point.adapt.offset = int(value)
    elif axis == "alpha":
        point.adapt.alpha = float(value)
        point.ablation.alpha_zero = False
    elif axis == "placement":
        if value == "random":
            point.adapt.placement = "random"
        else:
            point.adapt.placement = "fixed"
            point.adapt.fixed_anchor = list(parse_fixed(value))
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    return point.validate()


def cmd_sweep(cfg: RunConfig, force: bool = False) -> list[dict]:
    axis, values = cfg.sweep.axis, list(cfg.sweep.values)
    if not values:
        raise ConfigError("sweep.values is empty")
    points = [sweep_point(cfg, axis, v) for v in values]  # validate every point before running any
    started = time.time()
    base = cfg.out / "sweeps" / axis
    rows = []
    for i, (value, point) in enumerate(zip(values, points)):
        log.info("sweep %s = %r (%d/%d)", axis, value, i + 1, len(values))
        s = run_adapt(point, base / f"{i:02d}")
        rows.append(
            {
                "axis": axis,
                "value": value,
                "mean_error_pct": s["mean_error_pct"],
                "source_error_pct": s["source_mean_error_pct"],
                "gain_pct": s["gain_pct"],
            }
        )
    with open(base / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    _write_meta(base, "sweep", started)
    for r in rows:
        print(f"{axis}={r['value']!s:>12}  mean error {r['mean_error_pct']:.2f}%  gain {r['gain_pct']:+.2f}")
    return rows


def cmd_report(cfg: RunConfig, force: bool = False) -> str:
    if cfg.report.runs:
        dirs = [Path(p) if Path(p).is_absolute() else cfg.out / "runs" / p for p in cfg.report.runs]
    else:
        root = cfg.out / "runs"
        dirs = sorted(p for p in root.iterdir() if (p / "summary.json").exists()) if root.is_dir() else []
    if not dirs:
        raise MissingArtifact(f"no completed runs under {cfg.out / 'runs'}")
    for d in dirs:
        _require(d / "summary.json", "adapt")
    text, table = rpt.consolidate(dirs)
    (cfg.out / "report.txt").write_text(text)
    (cfg.out / "report.csv").write_text(table)
    print(text, end="")
    return text


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-source": cmd_train_source,
    "adapt": cmd_adapt,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prompt-adapt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--force", action="store_true", help="overwrite an existing checkpoint")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        COMMANDS[args.command](cfg, force=args.force)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, ckpt.CheckpointError, rpt.ReportError) as exc:
        print(f"missing or unreadable artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Refused as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
