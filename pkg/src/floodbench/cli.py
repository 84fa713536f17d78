"""Command-line benchmark runner.

    floodbench synth --scenes 40 --seed 7 --out data/synth
    floodbench train --data data/synth --model spaunet --out runs/sup
    floodbench ssl --data data/synth --strategy 1 --label-ratio 0.1 --out runs/ssl
    floodbench eval --checkpoint runs/ssl/checkpoint.ntf --data data/synth
    floodbench benchmark --data data/synth --config grid.cfg --out runs/grid
    floodbench gradcheck

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from .config import RunConfig, format_config, load_config, resolve
from .data import (SplitSpec, SynthConfig, TileSet, class_ratios, dataset_digest, generate_synthetic,
                   load_scene_dir, sample_labeled, split_scenes, synth_config_dict, write_scene_dir)
from .errors import ConfigError, DataError, FloodBenchError
from .metrics import TABLE_COLUMNS, evaluate_maps, rows_to_csv, table_row
from .models import build_model
from .ssl import Strategy, ssl_train
from .training import TrainResult, predict, pretrain

log = logging.getLogger("floodbench")

HISTORY_HEAD = ("epoch", "L_s", "L_entropy", "L_kl", "total", "lr")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


# ---------------------------------------------------------------- data plumbing


class Workspace:
    """Scenes, splits and tile sets for one resolved config."""

    def __init__(self, cfg: RunConfig):
        if cfg.data is None:
            raise ConfigError("data: a dataset directory is required (--data)")
        root = Path(cfg.data)
        if not root.is_dir():
            raise DataError(f"{root}: dataset directory not found")
        self.scenes = load_scene_dir(root)
        if not self.scenes:
            raise DataError(f"{root}: no scenes found")
        self.digest = dataset_digest(self.scenes)
        self.train, self.val, self.test = split_scenes(self.scenes, SplitSpec(cfg.split, cfg.seed))
        labeled, unlabeled = sample_labeled(self.train, cfg.label_ratio, cfg.seed)
        self.labeled = TileSet.from_scenes(labeled, cfg.tile, cfg.train_stride)
        # label_ratio 1.0 leaves nothing unlabeled; ssl_train rejects the empty pool itself
        self.unlabeled = (TileSet.from_scenes(unlabeled, cfg.tile, cfg.train_stride) if unlabeled
                          else self.labeled.subset([]))
        self.labeled_ids = sorted({s.scene_id for s in labeled})
        self.cfg = cfg

    def eval_tiles(self) -> TileSet:
        pick = {"train": self.train, "val": self.val, "test": self.test, "all": self.scenes}[self.cfg.eval_split]
        if not pick:
            raise DataError(f"eval_split: the {self.cfg.eval_split} split is empty")
        stride = self.cfg.train_stride if self.cfg.eval_split == "train" else self.cfg.eval_stride
        return TileSet.from_scenes(pick, self.cfg.tile, stride)


def report_dict(reports: dict) -> dict:
    return {"four_class": reports["four_class"].to_dict(), "binary": reports["binary"].to_dict()}


def _history_rows(phase: str, result: TrainResult, cfg: RunConfig, strategy) -> list[dict]:
    rows = []
    for h in result.history:
        row = dict(h)
        row.setdefault("strategy", "none" if strategy is None else int(strategy))
        row.setdefault("label_ratio", cfg.label_ratio)
        row.setdefault("seed", cfg.seed)
        row["phase"] = phase
        rows.append(row)
    return rows


def history_csv(rows: list[dict]) -> str:
    extra = []
    for r in rows:
        for k in r:
            if k not in HISTORY_HEAD and k not in extra:
                extra.append(k)
    kl = sorted(k for k in extra if k.startswith("kl_q"))
    rest = [k for k in ("phase", "strategy", "label_ratio", "seed") if k in extra]
    return rows_to_csv(rows, list(HISTORY_HEAD) + rest + kl)


# ---------------------------------------------------------------- runs


def run_cell(cfg: RunConfig, ws: Workspace | None = None) -> dict:
    """Train one configuration (supervised or SSL) and evaluate it.

    Returns the model, histories and reports. With ``strategy = none`` the
    supervised run lasts ``epochs + ssl_epochs`` so its budget matches an
    SSL run (pre-training for ``epochs``, then ``ssl_epochs`` of SSL). An
    ``init`` checkpoint replaces the random initialisation; SSL runs then
    skip pre-training.
    """
    ws = ws or Workspace(cfg)
    model = build_model(cfg.model, cfg.model_config())
    if len(ws.labeled) == 0:
        raise DataError("no labeled tiles; check tile size against the scene size")
    history: list[dict] = []
    strategy = None if cfg.strategy is None else Strategy(cfg.strategy)
    if cfg.init is not None:
        state = checkpoint.load(cfg.init)
        try:
            model.load_state_dict(state)
        except FloodBenchError as exc:
            raise DataError(f"{cfg.init}: {exc}") from None
    if strategy is None:
        res = pretrain(model, ws.labeled, cfg.train_config(cfg.epochs + cfg.ssl_epochs))
        history += _history_rows("supervised", res, cfg, None)
    else:
        if cfg.init is None:
            res = pretrain(model, ws.labeled, cfg.train_config(cfg.epochs))
            history += _history_rows("pretrain", res, cfg, None)
        res = ssl_train(model, ws.labeled, ws.unlabeled, strategy, cfg.train_config(cfg.ssl_epochs))
        history += _history_rows("ssl", res, cfg, strategy)
    tiles = ws.eval_tiles()
    preds = predict(model, tiles.pre, tiles.post)
    reports = evaluate_maps(tiles.labels, preds)
    return {"model": model, "history": history, "reports": reports,
            "pixel_accuracy": float((preds == tiles.labels).mean()), "workspace": ws}


def _save_run(cfg: RunConfig, out: dict, started: str, command: str) -> dict:
    root = Path(cfg.out)
    root.mkdir(parents=True, exist_ok=True)
    ckpt = root / "checkpoint.ntf"
    checkpoint.save(ckpt, out["model"].state_dict())
    (root / "history.csv").write_text(history_csv(out["history"]))
    report = report_dict(out["reports"])
    report["pixel_accuracy"] = out["pixel_accuracy"]
    report["params"] = out["model"].num_parameters()
    _write_json(root / "report.json", report)
    ws = out["workspace"]
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config": cfg.to_dict(),
        "dataset_digest": ws.digest,
        "labeled_scenes": ws.labeled_ids,
        "started": started,
        "finished": _now(),
        "final_metrics": {
            "macro_f1": out["reports"]["four_class"].macro_f1,
            "oa": out["reports"]["four_class"].oa,
            "kappa": out["reports"]["four_class"].kappa,
            "binary_kappa": out["reports"]["binary"].kappa,
            "pixel_accuracy": out["pixel_accuracy"],
        },
        "params": out["model"].num_parameters(),
        "checkpoint": str(ckpt),
        "history": str(root / "history.csv"),
        "report": str(root / "report.json"),
    }
    _write_json(root / "manifest.json", manifest)
    return manifest


def _print_summary(manifest: dict) -> None:
    m = manifest["final_metrics"]
    print(f"{manifest['config']['model']}: params={manifest['params']} macro_f1={m['macro_f1']:.4f} "
          f"oa={m['oa']:.4f} kappa={m['kappa']:.4f} pixel_accuracy={m['pixel_accuracy']:.4f}")
    print(f"wrote {manifest['checkpoint']}")


def cmd_synth(cfg: RunConfig) -> int:
    synth = SynthConfig(scenes=cfg.scenes, size=cfg.size, class_ratios=cfg.class_ratios)
    root = Path(cfg.data or cfg.out)
    scenes = generate_synthetic(synth, seed=cfg.seed)
    manifest = write_scene_dir(root, scenes, {"seed": cfg.seed, **synth_config_dict(synth)})
    got = class_ratios([s.label for s in scenes])
    target = np.asarray(synth.class_ratios) / sum(synth.class_ratios)
    print(f"wrote {len(scenes)} scenes of {cfg.size}x{cfg.size} to {root}")
    print(f"digest {manifest['digest']}")
    print("class        target    actual    diff(pp)")
    for name, t, g in zip(("no-damage", "minor", "major", "destroyed"), target, got):
        flag = "" if abs(g - t) <= 0.02 else "  OUT OF TOLERANCE"
        print(f"{name:<12} {100 * t:7.2f}%  {100 * g:7.2f}%  {100 * (g - t):+7.2f}{flag}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    started = _now()
    cfg = cfg.with_(strategy=None, ssl_epochs=0)
    _print_summary(_save_run(cfg, run_cell(cfg), started, "train"))
    return 0


def cmd_ssl(cfg: RunConfig) -> int:
    if cfg.strategy is None:
        raise ConfigError("strategy: ssl needs a strategy in 1-4 (--strategy)")
    started = _now()
    _print_summary(_save_run(cfg, run_cell(cfg), started, "ssl"))
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    if cfg.checkpoint is None:
        raise ConfigError("checkpoint: a checkpoint file is required (--checkpoint)")
    state = checkpoint.load(cfg.checkpoint)
    model = build_model(cfg.model, cfg.model_config())
    try:
        model.load_state_dict(state)
    except FloodBenchError as exc:
        raise DataError(f"{cfg.checkpoint}: {exc}") from None
    ws = Workspace(cfg)
    tiles = ws.eval_tiles()
    reports = evaluate_maps(tiles.labels, predict(model, tiles.pre, tiles.post))
    root = Path(cfg.out)
    report = report_dict(reports)
    report.update({"checkpoint": str(cfg.checkpoint), "dataset_digest": ws.digest,
                   "eval_split": cfg.eval_split, "params": model.num_parameters()})
    _write_json(root / "report.json", report)
    print(f"four-class: macro_f1={reports['four_class'].macro_f1:.4f} oa={reports['four_class'].oa:.4f} "
          f"kappa={reports['four_class'].kappa:.4f}")
    print(f"binary:     f1_damaged={reports['binary'].f1[1]:.4f} kappa={reports['binary'].kappa:.4f}")
    print(f"wrote {root / 'report.json'}")
    return 0


BENCH_COLUMNS = ("model", "strategy", "label_ratio", "seed", "macro_f1") + TABLE_COLUMNS


def benchmark_rows(cfg: RunConfig) -> list[dict]:
    rows = []
    workspaces: dict[tuple, Workspace] = {}
    for ratio in cfg.grid_label_ratios:
        for seed in cfg.grid_seeds:
            for model in cfg.grid_models:
                for strat in cfg.grid_strategies:
                    cell = cfg.with_(model=model, strategy=None if strat == "none" else int(strat),
                                     label_ratio=float(ratio), seed=int(seed))
                    key = (ratio, seed)
                    if key not in workspaces:
                        workspaces[key] = Workspace(cell)
                    out = run_cell(cell, workspaces[key])
                    row = {"model": model, "strategy": strat, "label_ratio": ratio, "seed": seed,
                           "macro_f1": out["reports"]["four_class"].macro_f1}
                    row.update(table_row(out["reports"]["binary"], out["model"].num_parameters()))
                    rows.append(row)
                    log.info("cell %s", row)
    means = []
    for strat in cfg.grid_strategies:
        for ratio in cfg.grid_label_ratios:
            group = [r for r in rows if r["strategy"] == strat and r["label_ratio"] == ratio]
            mean = {"model": "mean", "strategy": strat, "label_ratio": ratio, "seed": "all"}
            for col in ("macro_f1",) + TABLE_COLUMNS:
                mean[col] = float(np.mean([r[col] for r in group]))
            means.append(mean)
    return rows + means


def cmd_benchmark(cfg: RunConfig) -> int:
    started = _now()
    rows = benchmark_rows(cfg)
    root = Path(cfg.out)
    root.mkdir(parents=True, exist_ok=True)
    (root / "table.csv").write_text(rows_to_csv(rows, BENCH_COLUMNS))
    _write_json(root / "manifest.json", {"command": "benchmark", "tool_version": __version__,
                                         "config": cfg.to_dict(), "started": started, "finished": _now(),
                                         "table": str(root / "table.csv"), "cells": len(rows)})
    print(rows_to_csv(rows, ("model", "strategy", "label_ratio", "seed", "macro_f1", "f1_damaged", "kappa")),
          end="")
    print(f"wrote {root / 'table.csv'}")
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    from .gradcheck import run_suite

    res = run_suite(cfg.seed)
    for r in res["ops"]:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<24} worst rel-err {r.rel_err:.3e}  (< {r.tol:g})")
    for name, r in res["worst_model"].items():
        print(f"{'PASS' if r.passed else 'FAIL'}  {name + ' end-to-end':<24} worst rel-err {r.rel_err:.3e}  "
              f"(< {r.tol:g}, at {r.name})")
    print(f"{'all checks passed' if res['passed'] else 'gradient check FAILED'} in {res['seconds']:.1f}s")
    return 0 if res["passed"] else 4


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "ssl": cmd_ssl, "eval": cmd_eval,
            "benchmark": cmd_benchmark, "gradcheck": cmd_gradcheck}


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("-v", "--verbose", action="store_true")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        common.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())
    common.add_argument("--lambda", dest="lam", default=None, help=argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="floodbench", description="Flood damage assessment benchmark")
    parser.add_argument("--version", action="version", version=f"floodbench {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _manifest_values(checkpoint_path: str | None) -> dict:
    """Resolved config stored next to a checkpoint, if any."""
    if checkpoint_path is None:
        return {}
    manifest = Path(checkpoint_path).parent / "manifest.json"
    if not manifest.is_file():
        return {}
    stored = json.loads(manifest.read_text()).get("config", {})
    keep = {"model", "channels", "bit_channels", "lam", "tokens", "heads", "head_dim", "dtype", "tile",
            "train_stride", "eval_stride", "split", "label_ratio", "seed", "preset", "data"}
    return {k: v for k, v in stored.items() if k in keep}


def thread_limit():
    value = os.environ.get("FLOODBENCH_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"FLOODBENCH_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigError("FLOODBENCH_THREADS must be at least 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    try:
        if args.command == "eval" and args.config is None:
            cfg = resolve(_manifest_values(args.checkpoint), overrides)
        else:
            cfg = load_config(args.config, overrides)
        log.info("resolved config:\n%s", format_config(cfg))
        with thread_limit():
            return COMMANDS[args.command](cfg)
    except FloodBenchError as exc:
        print(f"floodbench {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
