"""Metrics, baselines, and parameter sweeps over simulated runs."""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .sim import MODES, RunLog, ScenarioConfig, run_scenario

REL_RANGE_FLOOR = 0.1  # meters; keeps relative error finite for nearby objects
SWEEP_VARIABLES = ("latency", "robots", "noise")


@dataclass(frozen=True)
class MetricsReport:
    de: float  # mean distance error, meters
    rel_de: float  # mean error over object range (floored)
    per_object: dict  # object_id -> mean distance error
    rows: int  # measured (post warm-up, finite) rows
    seed_count: int = 1
    de_std: float = 0.0  # across seeds when aggregated


def compute_metrics(logs) -> MetricsReport:
    """Distance error of the fused estimate against the true position.

    Warm-up ticks and non-finite rows are excluded. Positions are logged in
    each robot's own sensor frame, so the range used by the relative error
    is the robot-to-object distance.
    """
    if isinstance(logs, RunLog):
        logs = [logs]
    logs = list(logs)
    errors, rels = [], []
    per_object = {}
    for log in logs:
        for rid in sorted(log.rows):
            for row in log.rows[rid]:
                if row.tick < log.warmup_ticks:
                    continue
                if not (np.isfinite(row.fused).all() and np.isfinite(row.truth).all()):
                    continue
                e = float(np.linalg.norm(row.fused - row.truth))
                errors.append(e)
                rels.append(e / max(float(np.linalg.norm(row.truth)), REL_RANGE_FLOOR))
                per_object.setdefault(row.object_id, []).append(e)
    if not errors:
        raise ValueError("no measured rows after warm-up")
    return MetricsReport(
        de=float(np.mean(errors)),
        rel_de=float(np.mean(rels)),
        per_object={k: float(np.mean(v)) for k, v in per_object.items()},
        rows=len(errors),
        seed_count=len(logs),
    )


def _aggregate(reports) -> MetricsReport:
    des = [r.de for r in reports]
    ids = sorted({k for r in reports for k in r.per_object})
    per_object = {
        k: float(np.mean([r.per_object[k] for r in reports if k in r.per_object])) for k in ids
    }
    return MetricsReport(
        de=float(np.mean(des)),
        rel_de=float(np.mean([r.rel_de for r in reports])),
        per_object=per_object,
        rows=sum(r.rows for r in reports),
        seed_count=len(reports),
        de_std=float(np.std(des)),
    )


def run_baseline(kind: str, config: ScenarioConfig, predictor=None, compensator=None,
                 seeds=(0,), compensation=True) -> MetricsReport:
    """One pipeline variant over several seeds, averaged per seed."""
    if kind not in MODES:
        raise ValueError(f"unknown baseline {kind!r}; expected one of {MODES}")
    seeds = tuple(seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    reports = []
    for seed in seeds:
        log = run_scenario(dataclasses.replace(config, seed=seed), predictor, compensator,
                           mode=kind, compensation=compensation)
        reports.append(compute_metrics(log))
    return _aggregate(reports)


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepResult:
    variable: str
    grid: tuple
    mean_de: tuple
    std_de: tuple  # across seeds, per grid point
    auc: float  # trapezoid area under mean_de over the grid


def _config_for(config: ScenarioConfig, variable: str, value) -> ScenarioConfig:
    if variable == "latency":
        robots = [dataclasses.replace(r, latency=float(value)) for r in config.robots]
        return dataclasses.replace(config, robots=robots, warmup_ticks=None)
    if variable == "robots":
        return dataclasses.replace(config, active_robots=int(value), warmup_ticks=None)
    if variable == "noise":
        if value <= 0:
            raise ValueError("noise scale must be positive")
        robots = [
            dataclasses.replace(r, noise_a=r.noise_a * float(value),
                                noise_b=r.noise_b * float(value))
            for r in config.robots
        ]
        return dataclasses.replace(config, robots=robots, warmup_ticks=None)
    raise ValueError(f"unknown sweep variable {variable!r}; expected one of {SWEEP_VARIABLES}")


def sweep(variable: str, grid, config: ScenarioConfig, predictor=None, compensator=None,
          seeds=(0,), kind: str = "full", threads: int = 1,
          compensation: bool = True) -> SweepResult:
    """Mean distance error along one scenario axis.

    Every (grid value, seed) pair is an independent run; with threads > 1
    the runs execute concurrently but results are merged by index, so the
    output never depends on completion order.
    """
    grid = tuple(float(v) for v in grid)
    if len(grid) < 2:
        raise ValueError("sweep grid needs at least two points")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("sweep grid must be strictly increasing")
    seeds = tuple(seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    if kind not in MODES:
        raise ValueError(f"unknown baseline {kind!r}; expected one of {MODES}")

    tasks = []
    for gi, value in enumerate(grid):
        derived = _config_for(config, variable, value)
        for seed in seeds:
            tasks.append((gi, dataclasses.replace(derived, seed=seed)))

    def run_one(task_config):
        log = run_scenario(task_config, predictor, compensator, mode=kind,
                           compensation=compensation)
        return compute_metrics(log).de

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            des = list(pool.map(run_one, [c for _, c in tasks]))
    else:
        des = [run_one(c) for _, c in tasks]

    by_point = [[] for _ in grid]
    for (gi, _), de in zip(tasks, des):
        by_point[gi].append(de)
    mean_de = tuple(float(np.mean(v)) for v in by_point)
    std_de = tuple(float(np.std(v)) for v in by_point)
    return SweepResult(variable, grid, mean_de, std_de, float(np.trapezoid(mean_de, grid)))


def sweep_to_csv(result: SweepResult) -> str:
    lines = ["x,mean_de,std_de"]
    for x, m, s in zip(result.grid, result.mean_de, result.std_de):
        lines.append(f"{x!r},{m!r},{s!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# trend checking


def isotonic_fit(values, increasing: bool = True) -> np.ndarray:
    """Best monotone fit under squared error, by pooling adjacent violators."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or len(v) == 0:
        raise ValueError("values must be a non-empty 1-D sequence")
    if not increasing:
        return -isotonic_fit(-v, increasing=True)
    blocks = []  # [total, count]
    for x in v:
        blocks.append([x, 1])
        while len(blocks) > 1 and blocks[-2][0] * blocks[-1][1] > blocks[-1][0] * blocks[-2][1]:
            s, c = blocks.pop()
            blocks[-1][0] += s
            blocks[-1][1] += c
    out = np.empty(len(v))
    at = 0
    for s, c in blocks:
        out[at:at + c] = s / c
        at += c
    return out


def trend_residual(values, increasing: bool = True) -> float:
    """Largest deviation from the best monotone fit; zero iff already monotone."""
    v = np.asarray(values, dtype=np.float64)
    return float(np.abs(v - isotonic_fit(v, increasing)).max())
