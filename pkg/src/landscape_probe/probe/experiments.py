"""Clean/robust/recovery measurements and the expansion-factor x stride x fill sweep."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from ..attacks import AttackSpec, loss_and_grad, run_attack
from ..data import Dataset
from ..model.net import Model, NetConfig, StemConfig, build_model
from ..model.train import TrainConfig, evaluate_clean, fit_normalization, train
from ..sbde import ExpansionSpec, FillScheme, expand, project
from . import reports
from .geometry import mean_abs_ratio

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- robustness

@dataclass
class RobustOutcome:
    clean: float
    without_projection: float
    with_projection: float


def attack_for(spec: Optional[ExpansionSpec], attack: AttackSpec) -> AttackSpec:
    """The attack with its box widened to cover the fill values of ``spec``."""
    if spec is None:
        return attack
    lo, hi = spec.default_box()
    return attack.with_box((min(lo, attack.box[0]), max(hi, attack.box[1])))


def robust_outcome(model: Model, dataset: Dataset, spec: Optional[ExpansionSpec], attack: AttackSpec,
                   batch: int = 128) -> RobustOutcome:
    """One attack pass, scored on the raw adversarial input and after the auxiliary reset."""
    model.eval()
    attack = attack_for(spec, attack)
    n = len(dataset)
    clean = adv_ok = proj_ok = 0
    for b, s in enumerate(range(0, n, batch)):
        raw = dataset.images[s:s + batch]
        y = dataset.labels[s:s + batch]
        x0 = expand(raw, spec) if spec is not None else raw
        x0 = x0.astype(model.dtype, copy=False)
        res = run_attack(model, x0, y, replace(attack, seed=attack.seed + b))
        clean += int((model.logits(x0).argmax(axis=1) == y).sum())
        adv_ok += int((model.logits(res.adversarial).argmax(axis=1) == y).sum())
        if spec is not None:
            proj_ok += int((model.logits(project(res.adversarial, spec)).argmax(axis=1) == y).sum())
    with_proj = proj_ok / n if spec is not None else adv_ok / n
    return RobustOutcome(clean / n, adv_ok / n, with_proj)


def evaluate_robust(model: Model, dataset: Dataset, spec: Optional[ExpansionSpec], attack: AttackSpec,
                    apply_projection: bool, batch: int = 128) -> float:
    out = robust_outcome(model, dataset, spec, attack, batch)
    return out.with_projection if apply_projection else out.without_projection


def gradient_concentration(model: Model, x: np.ndarray, y: np.ndarray, spec: ExpansionSpec, batch: int = 64) -> float:
    """Mean |dL/dx| over auxiliary coordinates over the mean over signal coordinates, at clean inputs."""
    model.eval()
    grads = []
    for s in range(0, len(x), batch):
        _, g, _ = loss_and_grad(model, x[s:s + batch].astype(model.dtype, copy=False), np.asarray(y[s:s + batch]))
        grads.append(g)
    return mean_abs_ratio(np.concatenate(grads), spec.mask)


# ---------------------------------------------------------------- robustness table

@dataclass
class ReportRow:
    method: str
    clean: float
    attacks: dict  # column name -> accuracy in percent, None when not implemented

    @property
    def average(self) -> float:
        vals = [v for v in self.attacks.values() if v is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def cells(self) -> list:
        return [self.method, self.clean] + [self.attacks.get(c) for c in reports.ATTACK_COLUMNS] + [self.average]


@dataclass
class ExperimentReport:
    rows: list = field(default_factory=list)

    HEADER = ("Method", "Clean") + reports.ATTACK_COLUMNS + ("AVG",)

    def row(self, method: str) -> ReportRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def write_csv(self, path) -> None:
        reports.write_csv(path, self.HEADER, (r.cells() for r in self.rows))

    def to_json(self) -> dict:
        return {"columns": list(self.HEADER),
                "rows": [dict(zip(self.HEADER, r.cells())) for r in self.rows]}


def _pct(x: float) -> float:
    return 100.0 * x


def robustness_table(models: dict, dataset: Dataset, attacks: Sequence[AttackSpec],
                      spec: ExpansionSpec, batch: int = 128) -> ExperimentReport:
    """Rows Natural / SBDE (without Π) / SBDE (with Π); ``models`` maps 'natural' and 'sbde'."""
    report = ExperimentReport()
    if "natural" in models:
        m = models["natural"]
        cols = {c: None for c in reports.ATTACK_COLUMNS}
        for a in attacks:
            cols[a.kind] = _pct(robust_outcome(m, dataset, None, a, batch).without_projection)
        report.rows.append(ReportRow("Natural", _pct(evaluate_clean(m, dataset, None)), cols))
    if "sbde" in models:
        m = models["sbde"]
        without = {c: None for c in reports.ATTACK_COLUMNS}
        with_p = dict(without)
        clean = _pct(evaluate_clean(m, dataset, spec))
        for a in attacks:
            out = robust_outcome(m, dataset, spec, a, batch)
            without[a.kind] = _pct(out.without_projection)
            with_p[a.kind] = _pct(out.with_projection)
        report.rows.append(ReportRow("SBDE (without Π)", clean, without))
        report.rows.append(ReportRow("SBDE (with Π)", clean, with_p))
    return report


def attack_rows(model: Model, dataset: Dataset, spec: Optional[ExpansionSpec], attacks: Sequence[AttackSpec],
                label: str, projection: str = "both", batch: int = 128) -> list:
    """Table-shaped rows for one trained model; ``projection`` is 'on', 'off' or 'both'."""
    clean = _pct(evaluate_clean(model, dataset, spec))
    without = {c: None for c in reports.ATTACK_COLUMNS}
    with_p = dict(without)
    for a in attacks:
        out = robust_outcome(model, dataset, spec, a, batch)
        without[a.kind] = _pct(out.without_projection)
        with_p[a.kind] = _pct(out.with_projection)
    rows = []
    if spec is None:
        return [ReportRow(label, clean, without)]
    if projection in ("off", "both"):
        rows.append(ReportRow(f"{label} (without Π)", clean, without))
    if projection in ("on", "both"):
        rows.append(ReportRow(f"{label} (with Π)", clean, with_p))
    return rows


# ---------------------------------------------------------------- training one configuration

def train_configured(net: NetConfig, train_set: Dataset, test_set: Optional[Dataset], spec: Optional[ExpansionSpec],
                     config: TrainConfig, dtype=np.float32) -> tuple:
    """Seeded build + normalisation fit + training; the single path every entry point uses."""
    h, w = train_set.image_shape[1:]
    if spec is not None:
        h, w = h * spec.factor, w * spec.factor
    model = build_model(net, seed=config.seed, dtype=dtype, input_hw=(h, w))
    fit_normalization(model, train_set)
    return train(model, train_set, spec, config, test=test_set)


# ---------------------------------------------------------------- ablation

@dataclass
class AblationCell:
    factor: int
    stride: int
    fill: FillScheme
    seed: object  # int for a single run, "mean" / "min" for seed aggregates
    clean: float
    robust: dict  # attack column -> post-projection accuracy in percent (None = not implemented)
    robust_without: dict = field(default_factory=dict)

    @property
    def average(self) -> float:
        vals = [v for v in self.robust.values() if v is not None]
        return float(np.mean(vals)) if vals else float("nan")

    HEADER = ("factor", "stride", "fill", "seed", "Clean") + reports.ATTACK_COLUMNS + ("AVG",)

    def cells(self) -> list:
        return ([self.factor, self.stride, self.fill.label, self.seed, self.clean]
                + [self.robust.get(c) for c in reports.ATTACK_COLUMNS] + [self.average])


def with_stride(net: NetConfig, stride: int) -> NetConfig:
    st = net.stem
    return replace(net, stem=StemConfig(st.kernel, stride, st.padding, st.out_channels))


def run_cell(factor: int, stride: int, fill: FillScheme, seed: int, train_set: Dataset, test_set: Dataset,
             net: NetConfig, config: TrainConfig, attacks: Sequence[AttackSpec], batch: int = 128,
             dtype=np.float32) -> AblationCell:
    """Train with ``seed`` and score; attacks keep their own seeds so a cell equals a train + attack run."""
    c, h, w = train_set.image_shape
    spec = ExpansionSpec(factor, fill, c, h, w)
    cfg = replace(config, seed=seed)
    model, _ = train_configured(with_stride(net, stride), train_set, None, spec, cfg, dtype)
    clean = _pct(evaluate_clean(model, test_set, spec))
    robust = {k: None for k in reports.ATTACK_COLUMNS}
    without = dict(robust)
    for a in attacks:
        out = robust_outcome(model, test_set, spec, a, batch)
        robust[a.kind] = _pct(out.with_projection)
        without[a.kind] = _pct(out.without_projection)
    log.info("cell F=%d s=%d fill=%s seed=%d clean=%.2f robust=%s", factor, stride, fill.label, seed, clean, robust)
    return AblationCell(factor, stride, fill, seed, clean, robust, without)


def _run_cell_args(args):
    return run_cell(*args)


def aggregate(cells: Sequence[AblationCell], how: str) -> AblationCell:
    fn = {"mean": np.mean, "min": np.min}[how]
    first = cells[0]

    def agg(key_dicts):
        keys = key_dicts[0].keys()
        out = {}
        for k in keys:
            vals = [d[k] for d in key_dicts]
            out[k] = None if any(v is None for v in vals) else float(fn(vals))
        return out

    return AblationCell(first.factor, first.stride, first.fill, how, float(fn([c.clean for c in cells])),
                        agg([c.robust for c in cells]), agg([c.robust_without for c in cells]))


def ablation_sweep(factors: Sequence[int], strides: Sequence[int], fills: Sequence[FillScheme],
                   train_set: Dataset, test_set: Dataset, net: NetConfig, config: TrainConfig,
                   attacks: Sequence[AttackSpec], seeds: Sequence[int] = (0, 1, 2),
                   jobs: int = 1, batch: int = 128, dtype=np.float32) -> list:
    """One cell per (factor, stride, fill, seed), followed by seed mean and min per triple."""
    triples = [(f, s, fl) for f in factors for s in strides for fl in fills]
    if not triples or not seeds:
        raise ValueError("empty ablation grid")
    work = [(f, s, fl, seed, train_set, test_set, net, config, tuple(attacks), batch, dtype)
            for f, s, fl in triples for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell_args, work))
    else:
        results = [_run_cell_args(w) for w in work]
    cells = []
    k = len(seeds)
    for t in range(len(triples)):
        group = results[t * k:(t + 1) * k]
        cells.extend(group)
        cells.append(aggregate(group, "mean"))
        cells.append(aggregate(group, "min"))
    return cells


def write_ablation_csv(path, cells: Sequence[AblationCell]) -> None:
    reports.write_csv(path, AblationCell.HEADER, (c.cells() for c in cells))


def seed_mean(cells: Sequence[AblationCell], factor: int, stride: int, fill: Optional[FillScheme] = None) -> AblationCell:
    for c in cells:
        if c.seed == "mean" and c.factor == factor and c.stride == stride and (fill is None or c.fill == fill):
            return c
    raise KeyError((factor, stride, fill))
