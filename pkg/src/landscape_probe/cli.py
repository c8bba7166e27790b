"""``landscape-probe`` command line: train, attack, trace, ablate.

Exit status is 0 only when every artifact of the command was written. On
failure a single JSON object is printed to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as cfgmod
from .config import ConfigError, RunConfig
from .data import DATA_ENV, Dataset, SyntheticSpec, load_cifar10, make_synthetic, subsample
from .model.checkpoint import CheckpointError, load_checkpoint, save_checkpoint, spec_to_dict
from .model.net import ConfigError as NetConfigError
from .probe import reports
from .probe.experiments import (
    AblationCell,
    ExperimentReport,
    ablation_sweep,
    attack_for,
    attack_rows,
    gradient_concentration,
    train_configured,
    write_ablation_csv,
)
from .probe.trace import median_recovery_ratio, recovery_margin, trace_attack
from .sbde import FillScheme, expand

log = logging.getLogger("landscape_probe")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


class ArtifactError(RuntimeError):
    pass


class MismatchError(ValueError):
    pass


@dataclass
class Splits:
    train: Dataset
    test: Dataset


# ---------------------------------------------------------------- shared plumbing

def load_data(cfg: RunConfig) -> Splits:
    if cfg["data.source"] == "cifar10":
        root = cfg["data.root"]
        train, test = load_cifar10(root, "train"), load_cifar10(root, "test")
        n_train = cfg["data.n_train"] or len(train)
        n_test = cfg["data.n_test"] or len(test)
        train, test = subsample((train, test), n_train, n_test, cfg["data.subset_seed"])
        return Splits(train, test)
    common = dict(classes=cfg["data.classes"], height=cfg["data.height"], width=cfg["data.width"],
                  channels=cfg["data.channels"], pattern=cfg["data.pattern"], noise=cfg["data.noise"])
    train = make_synthetic(SyntheticSpec(per_class=cfg["data.per_class"], seed=cfg["data.seed"], split="train", **common))
    test = make_synthetic(SyntheticSpec(per_class=cfg["data.test_per_class"], seed=cfg["data.seed"] + 1,
                                        split="test", **common))
    if cfg["data.n_train"] or cfg["data.n_test"]:
        train, test = subsample((train, test), cfg["data.n_train"] or len(train), cfg["data.n_test"] or len(test),
                                cfg["data.subset_seed"])
    return Splits(train, test)


def eval_set(cfg: RunConfig, test: Dataset) -> Dataset:
    n = cfg["attack.n_eval"]
    return test if n is None or n >= len(test) else test.take(np.arange(n))


def build_setup(cfg: RunConfig, splits: Splits) -> tuple:
    c, h, w = splits.train.image_shape
    spec = cfgmod.expansion_spec(cfg, c, h, w)
    net = cfgmod.net_config(cfg, splits.train.num_classes, c)
    return net, spec


def load_compatible(cfg: RunConfig, checkpoint: Path, splits: Splits) -> tuple:
    model, spec, header = load_checkpoint(checkpoint)
    net, want_spec = build_setup(cfg, splits)
    if header["net_config"] != net.to_dict():
        raise MismatchError(f"checkpoint {checkpoint} was trained with model {header['net_config']}, "
                            f"config describes {net.to_dict()}")
    if spec_to_dict(spec) != spec_to_dict(want_spec):
        raise MismatchError(f"checkpoint {checkpoint} uses expansion {spec_to_dict(spec)}, "
                            f"config describes {spec_to_dict(want_spec)}")
    model.eval()
    return model, spec


def _dtype(cfg: RunConfig):
    return np.float64 if cfg["model.dtype"] == "float64" else np.float32


def _require(paths) -> list:
    missing = [str(p) for p in paths if not Path(p).is_file()]
    if missing:
        raise ArtifactError(f"artifacts not written: {', '.join(missing)}")
    return [str(p) for p in paths]


# ---------------------------------------------------------------- commands

def cmd_train(cfg: RunConfig, out: Path) -> list:
    splits = load_data(cfg)
    net, spec = build_setup(cfg, splits)
    model, history = train_configured(net, splits.train, splits.test, spec, cfgmod.train_config(cfg), _dtype(cfg))
    ckpt = out / cfg["output.checkpoint"]
    save_checkpoint(ckpt, model, spec, extra={"train": cfg.section("train")})
    hist = out / "history.csv"
    reports.write_csv(hist, ("epoch", "train_loss", "test_acc"),
                      ([r["epoch"], r["train_loss"], r["test_acc"]] for r in history))
    return [ckpt, hist, cfg.write_echo(out)]


def robustness_report(cfg: RunConfig, model, spec, dataset: Dataset) -> ExperimentReport:
    label = "Natural" if spec is None else "SBDE"
    rows = attack_rows(model, dataset, spec, cfgmod.attack_specs(cfg), label,
                       projection=cfg["attack.projection"], batch=cfg["attack.batch"])
    return ExperimentReport(rows)


def cmd_attack(cfg: RunConfig, out: Path, checkpoint: Path) -> list:
    splits = load_data(cfg)
    model, spec = load_compatible(cfg, checkpoint, splits)
    report = robustness_report(cfg, model, spec, eval_set(cfg, splits.test))
    csv_path, json_path = out / "robustness.csv", out / "robustness.json"
    report.write_csv(csv_path)
    reports.write_json(json_path, report.to_json())
    return [csv_path, json_path, cfg.write_echo(out)]


def cmd_trace(cfg: RunConfig, out: Path, checkpoint: Path) -> list:
    splits = load_data(cfg)
    model, spec = load_compatible(cfg, checkpoint, splits)
    if spec is None:
        raise ConfigError("trace needs an sbde section: the natural model has no auxiliary coordinates", cfg.source)
    ds = eval_set(cfg, splits.test)
    n = min(cfg["probe.n_samples"], len(ds))
    x0 = expand(ds.images[:n], spec).astype(model.dtype)
    y = ds.labels[:n]
    attack = attack_for(spec, cfgmod.attack_specs(cfg)[0])
    pixel = cfg["probe.tracked_pixel"]
    result = trace_attack(model, x0, y, attack, spec, tuple(pixel) if pixel != "random" else "random",
                          channel=cfg["probe.channel"], seed=cfg["probe.seed"])
    traj = out / "trajectory.csv"
    reports.write_csv(traj, ("sample", "step", "loss", "x_sig", "y_aux", "mass_aux", "mass_sig"),
                      ([s, r.step, r.loss, r.x_sig, r.y_aux, r.mass_aux, r.mass_sig]
                       for s, recs in enumerate(result.records) for r in recs))
    rec = out / "recovery.csv"
    reports.write_csv(rec, ("sample", "loss_clean", "loss_adv", "loss_projected", "pred_clean", "pred_adv",
                            "pred_projected", "recovered"),
                      ([s, r.loss_clean, r.loss_adv, r.loss_projected, r.pred_clean, r.pred_adv,
                        r.pred_projected, int(r.recovered)] for s, r in enumerate(result.reports)))
    summary = out / "trace.json"
    reports.write_json(summary, {
        "attack": attack.kind,
        "pixel": list(result.pixel),
        "samples": n,
        "median_recovery_ratio": median_recovery_ratio(result.reports),
        "recovery_margin_0.9": recovery_margin(result.reports, 0.9),
        "recovered_fraction": float(np.mean([r.recovered for r in result.reports])),
        "grad_ratio_aux_over_sig": gradient_concentration(model, x0, y, spec),
    })
    return [traj, rec, summary, cfg.write_echo(out)]


def cmd_ablate(cfg: RunConfig, out: Path, jobs: int = 1) -> list:
    splits = load_data(cfg)
    net, _ = build_setup(cfg, splits)
    fills = [FillScheme.parse(f) for f in cfg["probe.fills"]]
    cells = ablation_sweep(cfg["probe.factors"], cfg["probe.strides"], fills, splits.train,
                           eval_set(cfg, splits.test), net, cfgmod.train_config(cfg), cfgmod.attack_specs(cfg),
                           seeds=cfg["probe.seeds"], jobs=jobs, batch=cfg["attack.batch"], dtype=_dtype(cfg))
    csv_path, json_path = out / "ablation.csv", out / "ablation.json"
    write_ablation_csv(csv_path, cells)
    reports.write_json(json_path, {"columns": list(AblationCell.HEADER),
                                   "cells": [dict(zip(AblationCell.HEADER, c.cells()), robust_without_projection=c.robust_without)
                                             for c in cells]})
    return [csv_path, json_path, cfg.write_echo(out)]


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="landscape-probe", description="Train, attack and probe dimension-expanded classifiers.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, needs_ckpt in (("train", False), ("attack", True), ("trace", True), ("ablate", False)):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="YAML run configuration")
        if needs_ckpt:
            s.add_argument("--checkpoint", help="checkpoint from 'train' (default: <out>/<output.checkpoint>)")
        s.add_argument("--out", help=f"output directory (default: output.dir); dataset root via ${DATA_ENV}")
        s.add_argument("--seed", type=int, help="overrides train.seed, attack.seed and probe.seed")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a dotted config key")
        if name == "ablate":
            s.add_argument("--jobs", type=int, default=1, help="parallel cells (default 1)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _resolve(args) -> tuple:
    cfg = cfgmod.load_config(args.config).with_overrides(args.set)
    if args.seed is not None:
        cfg = cfg.with_overrides([f"train.seed={args.seed}", f"attack.seed={args.seed}", f"probe.seed={args.seed}"])
    out = Path(args.out or cfg["output.dir"])
    if args.out:
        cfg = cfg.with_overrides([f"output.dir={json.dumps(str(out))}"])
    return cfg, out


def run(args) -> list:
    cfg, out = _resolve(args)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.checkpoint) if getattr(args, "checkpoint", None) else out / cfg["output.checkpoint"]
    if args.command == "train":
        written = cmd_train(cfg, out)
    elif args.command == "attack":
        written = cmd_attack(cfg, out, ckpt)
    elif args.command == "trace":
        written = cmd_trace(cfg, out, ckpt)
    else:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        written = cmd_ablate(cfg, out, args.jobs)
    return _require(written)


def _error_record(command: str, exc: BaseException) -> str:
    rec = {"status": "error", "command": command, "error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        rec.update(source=exc.source, line=exc.line)
    return json.dumps(rec, sort_keys=True)


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        with threadpool_limits(limits=1):
            written = run(args)
    except (ConfigError, NetConfigError, MismatchError, CheckpointError) as exc:
        print(_error_record(args.command, exc), file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # every failure must surface as a parseable record
        log.debug("command failed", exc_info=True)
        print(_error_record(args.command, exc), file=sys.stderr)
        return EXIT_FAILED
    print(json.dumps({"status": "ok", "command": args.command, "artifacts": written}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
