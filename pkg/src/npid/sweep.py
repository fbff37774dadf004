"""Grid sweeps: one training run plus evaluation per cell, and an aggregate table.

A sweep file is a run config with an extra ``[sweep]`` section::

    [sweep]
    objective = parametric, full, nce
    m = 1, 16, 256
    budget = 64
    protocols = knn, probe

Axes not listed keep the base config's value.
"""
from __future__ import annotations

import copy
import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .config import (RunConfig, load_data, parse_config, parse_float_list, parse_int_list,
                     read_ini)
from .encoder import ConfigError

log = logging.getLogger("npid")

AXES = {
    "objective": lambda s: [v.strip() for v in s.split(",") if v.strip()],
    "m": parse_int_list,
    "lam": parse_float_list,
    "embed_dim": parse_int_list,
    "fraction": parse_float_list,
}
AGGREGATE_FIELDS = ("cell", "objective", "m", "lam", "embed_dim", "fraction", "status",
                    "knn_top1", "probe_top1", "error")


@dataclass
class ExperimentSpec:
    base: RunConfig
    axes: dict[str, list] = field(default_factory=dict)
    output: str = "sweep"
    budget: int = 64
    protocols: tuple[str, ...] = ("knn",)

    def __post_init__(self):
        for name, values in self.axes.items():
            if name not in AXES:
                raise ConfigError(f"unknown sweep axis {name!r}; expected one of {tuple(AXES)}")
            if not values:
                raise ConfigError(f"sweep axis {name!r} is empty")
        for p in self.protocols:
            if p not in ("knn", "probe"):
                raise ConfigError(f"sweep protocol must be knn or probe, got {p!r}")
        if self.size() > self.budget:
            raise ConfigError(f"sweep has {self.size()} cells, over the budget of {self.budget}")

    def size(self) -> int:
        n = 1
        for v in self.axes.values():
            n *= len(v)
        return n

    def cells(self) -> list[dict]:
        names = list(self.axes)
        return [dict(zip(names, combo)) for combo in itertools.product(*self.axes.values())]


def apply_cell(base: RunConfig, cell: dict) -> RunConfig:
    cfg = copy.deepcopy(base)
    for name, value in cell.items():
        if name == "objective":
            cfg.train.objective = value
        elif name == "m":
            cfg.train.nce.m = value
        elif name == "lam":
            cfg.train.prox.lam = value
        elif name == "embed_dim":
            cfg.encoder.embed_dim = value
        elif name == "fraction":
            cfg.data.fraction = value
    # re-run validation on the modified dataclasses
    return RunConfig.from_dict(cfg.to_dict())


def load_spec(path, output=None) -> ExperimentSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"sweep file {path} does not exist")
    text = path.read_text()
    base = parse_config(text, str(path), extra_sections=("sweep",))
    cp = read_ini(text, str(path))
    if not cp.has_section("sweep"):
        raise ConfigError(f"{path}: missing [sweep] section")
    axes, budget, protocols = {}, 64, ("knn",)
    for key, raw in cp.items("sweep"):
        if key == "budget":
            budget = int(raw)
        elif key == "protocols":
            protocols = tuple(v.strip() for v in raw.split(",") if v.strip())
        elif key in AXES:
            try:
                axes[key] = AXES[key](raw)
            except ValueError as exc:
                raise ConfigError(f"{path}: bad sweep.{key}: {exc}") from None
        else:
            raise ConfigError(f"{path}: unknown key sweep.{key}")
    return ExperimentSpec(base, axes, output or "sweep", budget, protocols)


def _cell_name(i: int, cell: dict) -> str:
    bits = "-".join(f"{k}{v}" for k, v in cell.items())
    return f"cell{i:03d}" + (f"-{bits}" if bits else "")


def run_cell(cfg_dict: dict, cell_dir: str, protocols, data_path=None) -> dict:
    """Train and evaluate one cell. Top-level so worker processes can pickle it."""
    from .cli import evaluate_features, render_csv, resolve, run_training, METRIC_FIELDS

    cfg = RunConfig.from_dict(cfg_dict)
    train_ds, test_ds = load_data(cfg.data, data_path)
    cfg = resolve(cfg, train_ds)
    # evaluation always sees the full training split, whatever fraction was trained on
    if cfg.data.fraction < 1:
        eval_cfg = RunConfig.from_dict(cfg.to_dict())
        eval_cfg.data.fraction = 1.0
        full_train, _ = load_data(eval_cfg.data, data_path)
    else:
        full_train = train_ds
    out = Path(cell_dir)
    state = run_training(cfg, train_ds, test_ds, out)
    rows = []
    for p in protocols:
        # re-encode so every cell is scored against the same bank of images
        rows.append(evaluate_features(cfg, state.encoder, state.bank.export_f32(), full_train,
                                      test_ds, p, reencode=True))
    (out / "metrics.csv").write_text(render_csv(METRIC_FIELDS, rows, cfg.sha256()))
    return {f"{r['protocol']}_top1": r["top1"] for r in rows}


def run_sweep(spec: ExperimentSpec, data_path=None, force: bool = False,
              workers: int = 1) -> list[dict]:
    from .cli import guard_outputs, render_csv

    out = Path(spec.output)
    agg = out / "aggregate.csv"
    guard_outputs([agg], force)
    out.mkdir(parents=True, exist_ok=True)
    cells = spec.cells()
    jobs = []
    for i, cell in enumerate(cells):
        cfg = apply_cell(spec.base, cell)
        cell_dir = out / _cell_name(i, cell)
        guard_outputs([cell_dir / "checkpoint.npid"], force)
        jobs.append((cfg.to_dict(), str(cell_dir), spec.protocols, data_path))

    results = []
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            futures = [pool.submit(run_cell, *job) for job in jobs]
            outcomes = []
            for fut in futures:
                try:
                    outcomes.append((fut.result(), None))
                except Exception as exc:  # recorded per cell; the sweep goes on
                    outcomes.append((None, exc))
    else:
        outcomes = []
        for job in jobs:
            try:
                outcomes.append((run_cell(*job), None))
            except Exception as exc:
                outcomes.append((None, exc))

    for i, (cell, (metrics, exc)) in enumerate(zip(cells, outcomes)):
        cfg = apply_cell(spec.base, cell)
        row = {"cell": _cell_name(i, cell), "objective": cfg.train.objective,
               "m": cfg.train.nce.m, "lam": cfg.train.prox.lam,
               "embed_dim": cfg.encoder.embed_dim, "fraction": cfg.data.fraction}
        if exc is None:
            row.update(status="ok", **metrics)
        else:
            log.error("cell %s failed: %s", row["cell"], exc)
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        results.append(row)
    agg.write_text(render_csv(AGGREGATE_FIELDS, results, spec.base.sha256()))
    return results
