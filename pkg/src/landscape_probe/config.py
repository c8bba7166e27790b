"""Run configuration: a YAML document of sections addressed by dotted keys.

Every accepted key is listed in ``SCHEMA``; anything else is rejected with
the file and line it appeared on. ``--set key=value`` overrides go through
the same validation. The resolved configuration is echoed back in canonical
form so a run can be reproduced from its output directory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

import yaml

SECTIONS = ("data", "model", "sbde", "train", "attack", "probe", "output")


class ConfigError(ValueError):
    def __init__(self, message: str, source: Optional[str] = None, line: Optional[int] = None):
        self.source = source
        self.line = line
        where = f"{source or '<config>'}:{line}: " if line is not None else (f"{source}: " if source else "")
        super().__init__(where + message)


# ---------------------------------------------------------------- value checkers

def _int(lo=None):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, int):
            raise ValueError(f"expected an integer, got {v!r}")
        if lo is not None and v < lo:
            raise ValueError(f"must be >= {lo}, got {v}")
        return v
    return check


def _float(lo=None):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ValueError(f"expected a number, got {v!r}")
        v = float(v)
        if not math.isfinite(v):
            raise ValueError(f"must be finite, got {v}")
        if lo is not None and v < lo:
            raise ValueError(f"must be >= {lo}, got {v}")
        return v
    return check


def _bool(v):
    if not isinstance(v, bool):
        raise ValueError(f"expected true or false, got {v!r}")
    return v


def _choice(*options):
    def check(v):
        if v not in options:
            raise ValueError(f"expected one of {list(options)}, got {v!r}")
        return v
    return check


def _projection(v):
    # YAML 1.1 reads bare on/off as booleans
    if isinstance(v, bool):
        v = "on" if v else "off"
    return _choice("on", "off", "both")(v)


def _opt(inner):
    def check(v):
        return None if v is None else inner(v)
    return check


def _str(v):
    if not isinstance(v, str):
        raise ValueError(f"expected a string, got {v!r}")
    return v


def _list(inner, nonempty=False):
    def check(v):
        if not isinstance(v, list):
            v = [v]
        if nonempty and not v:
            raise ValueError("list must not be empty")
        return [inner(x) for x in v]
    return check


def _fill(v):
    from .sbde import FillScheme
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        v = str(float(v))
    return FillScheme.parse(_str(v)).label


def _attack_kind(v):
    v = _str(v).upper()
    return _choice("PGD", "BIM", "APGD")(v)


def _stages(v):
    if not isinstance(v, list) or not v:
        raise ValueError("stages must be a non-empty list of [blocks, width] pairs")
    out = []
    for s in v:
        if not isinstance(s, list) or len(s) != 2:
            raise ValueError(f"stage {s!r} is not a [blocks, width] pair")
        out.append([_int(1)(s[0]), _int(1)(s[1])])
    return out


def _pixel(v):
    if v == "random":
        return v
    if isinstance(v, list) and len(v) == 2:
        return [_int(0)(v[0]), _int(0)(v[1])]
    raise ValueError(f"expected 'random' or [i, j], got {v!r}")


# dotted key -> (default, checker)
SCHEMA: dict = {
    "data.source": ("synthetic", _choice("synthetic", "cifar10")),
    "data.root": (None, _opt(_str)),
    "data.n_train": (None, _opt(_int(1))),
    "data.n_test": (None, _opt(_int(1))),
    "data.subset_seed": (0, _int(0)),
    "data.classes": (10, _int(2)),
    "data.per_class": (100, _int(1)),
    "data.test_per_class": (20, _int(1)),
    "data.height": (32, _int(1)),
    "data.width": (32, _int(1)),
    "data.channels": (3, _int(1)),
    "data.pattern": ("gratings", _choice("gratings", "blobs")),
    "data.noise": (0.1, _float(0.0)),
    "data.seed": (0, _int(0)),
    "model.scale": ("desk", _choice("desk", "full")),
    "model.stride": (2, _int(1)),
    "model.kernel": (7, _int(1)),
    "model.padding": (3, _int(0)),
    "model.stem_channels": (32, _int(1)),
    "model.stages": ([[2, 32], [2, 64]], _stages),
    "model.dtype": ("float32", _choice("float32", "float64")),
    "sbde.factor": (5, _int(1)),
    "sbde.fill": ("0.0", _fill),
    "train.lr0": (0.1, _float(0.0)),
    "train.lr_min": (1e-5, _float(0.0)),
    "train.epochs": (30, _int(1)),
    "train.batch": (128, _int(1)),
    "train.momentum": (0.9, _float(0.0)),
    "train.weight_decay": (5e-4, _float(0.0)),
    "train.seed": (0, _int(0)),
    "train.crop_pad": (4, _int(0)),
    "train.hflip": (True, _bool),
    "train.crop": (True, _bool),
    "attack.kinds": (["PGD", "BIM", "APGD"], _list(_attack_kind, nonempty=True)),
    "attack.epsilon": (8 / 255, _float(0.0)),
    "attack.pgd_alpha": (None, _opt(_float(0.0))),
    "attack.pgd_steps": (20, _int(1)),
    "attack.bim_steps": (10, _int(1)),
    "attack.apgd_steps": (20, _int(1)),
    "attack.seed": (0, _int(0)),
    "attack.batch": (128, _int(1)),
    "attack.n_eval": (None, _opt(_int(1))),
    "attack.projection": ("both", _projection),
    "probe.n_samples": (16, _int(1)),
    "probe.tracked_pixel": ("random", _pixel),
    "probe.channel": (0, _int(0)),
    "probe.seed": (0, _int(0)),
    "probe.factors": ([4, 5], _list(_int(1))),
    "probe.strides": ([2], _list(_int(1))),
    "probe.fills": (["0.0"], _list(_fill)),
    "probe.seeds": ([0, 1, 2], _list(_int(0))),
    "output.dir": ("runs/default", _str),
    "output.checkpoint": ("model.ckpt", _str),
}


# ---------------------------------------------------------------- parsing

def _flatten(node: yaml.Node, prefix: str, source: str, out: dict) -> None:
    """Collect ``dotted key -> (python value, line)`` from a composed mapping node."""
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError("expected a mapping", source, node.start_mark.line + 1)
    for key_node, value_node in node.value:
        key = key_node.value
        if not isinstance(key, str) or not key:
            raise ConfigError(f"invalid key {key!r}", source, key_node.start_mark.line + 1)
        dotted = f"{prefix}.{key}" if prefix else key
        line = key_node.start_mark.line + 1
        if dotted in out:
            raise ConfigError(f"duplicate key '{dotted}'", source, line)
        if not prefix and key not in SECTIONS and key not in SCHEMA:
            raise ConfigError(f"unknown section '{key}' (expected one of {', '.join(SECTIONS)})", source, line)
        if dotted in SCHEMA:
            value = yaml.safe_load(yaml.serialize(value_node))
            out[dotted] = (value, line)
        elif isinstance(value_node, yaml.MappingNode) and not prefix:
            out[dotted] = (None, line)  # section marker, so an empty section is still "present"
            _flatten(value_node, dotted, source, out)
        elif not prefix and isinstance(value_node, yaml.ScalarNode) and value_node.value in ("", "~", "null"):
            out[dotted] = (None, line)
        else:
            raise ConfigError(f"unknown key '{dotted}'", source, line)


@dataclass
class RunConfig:
    values: dict
    sections: frozenset  # sections present in the source document
    source: Optional[str] = None

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def section(self, name: str) -> dict:
        p = name + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def has(self, section: str) -> bool:
        return section in self.sections

    def with_overrides(self, pairs) -> "RunConfig":
        values = dict(self.values)
        sections = set(self.sections)
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not of the form key=value", "--set")
            key, raw = pair.split("=", 1)
            key = key.strip()
            if key not in SCHEMA:
                raise ConfigError(f"unknown key '{key}'", "--set")
            values[key] = _check(key, yaml.safe_load(raw), "--set", None)
            sections.add(key.split(".")[0])
        return RunConfig(values, frozenset(sections), self.source)

    def canonical(self) -> dict:
        out: dict = {}
        for key in sorted(self.values):
            section, name = key.split(".", 1)
            if section == "sbde" and not self.has("sbde"):
                continue
            out.setdefault(section, {})[name] = self.values[key]
        return out

    def dump(self) -> str:
        return yaml.safe_dump(self.canonical(), sort_keys=True, default_flow_style=False)

    def write_echo(self, out_dir) -> Path:
        path = Path(out_dir) / "config.yaml"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dump(), encoding="utf-8")
        return path


def _check(key: str, value, source, line) -> Any:
    checker: Callable = SCHEMA[key][1]
    try:
        return checker(value)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid value for '{key}': {exc}", source, line) from None


def parse_config(text: str, source: Optional[str] = None) -> RunConfig:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed YAML: {getattr(exc, 'problem', exc)}", source,
                          mark.line + 1 if mark else None) from None
    found: dict = {}
    if root is not None:
        _flatten(root, "", source, found)
    values = {k: _check(k, default, "<defaults>", None) for k, (default, _) in SCHEMA.items()}
    sections = set()
    for key, (value, line) in found.items():
        sections.add(key.split(".")[0])
        if key in SCHEMA:
            values[key] = _check(key, value, source, line)
    cfg = RunConfig(values, frozenset(sections), source)
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return parse_config(text, str(path))


def validate(cfg: RunConfig) -> None:
    """Cross-field checks that no single key can express."""
    if cfg["train.lr_min"] > cfg["train.lr0"]:
        raise ConfigError("train.lr_min must not exceed train.lr0", cfg.source)
    pa = cfg["attack.pgd_alpha"]
    if pa is not None and cfg["attack.epsilon"] > 0 and not 0 < pa <= cfg["attack.epsilon"]:
        raise ConfigError("attack.pgd_alpha must satisfy 0 < alpha <= epsilon", cfg.source)
    if cfg["model.kernel"] % 2 == 0:
        raise ConfigError("model.kernel must be odd", cfg.source)


# ---------------------------------------------------------------- typed views

def expansion_spec(cfg: RunConfig, channels: int, height: int, width: int):
    from .sbde import ExpansionSpec, FillScheme
    if not cfg.has("sbde"):
        return None
    return ExpansionSpec(cfg["sbde.factor"], FillScheme.parse(cfg["sbde.fill"]), channels, height, width)


def net_config(cfg: RunConfig, num_classes: int, in_channels: int):
    from .model.net import NetConfig, StemConfig, full_config
    if cfg["model.scale"] == "full":
        base = full_config(cfg["model.stride"], num_classes)
        return NetConfig(StemConfig(cfg["model.kernel"], cfg["model.stride"], cfg["model.padding"], base.stem.out_channels),
                         base.stages, num_classes, in_channels, "full")
    return NetConfig(StemConfig(cfg["model.kernel"], cfg["model.stride"], cfg["model.padding"], cfg["model.stem_channels"]),
                     tuple(tuple(s) for s in cfg["model.stages"]), num_classes, in_channels, "desk")


def train_config(cfg: RunConfig):
    from .model.train import TrainConfig
    return TrainConfig(**cfg.section("train"))


def attack_specs(cfg: RunConfig) -> list:
    from .attacks import AttackSpec
    eps = cfg["attack.epsilon"]
    out = []
    for kind in cfg["attack.kinds"]:
        if kind == "PGD":
            out.append(AttackSpec("PGD", eps, alpha=cfg["attack.pgd_alpha"], steps=cfg["attack.pgd_steps"],
                                  seed=cfg["attack.seed"]))
        elif kind == "BIM":
            out.append(AttackSpec("BIM", eps, steps=cfg["attack.bim_steps"], seed=cfg["attack.seed"]))
        else:
            out.append(AttackSpec("APGD", eps, steps=cfg["attack.apgd_steps"], seed=cfg["attack.seed"]))
    return out
