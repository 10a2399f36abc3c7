"""Experiment plans: attack pools, campaign grids and report emission.

A plan is a grid of cells (variant x scale x learning rate x mu).  Every cell
attacks the same per-scale pool of samples that the locator classifies with
all labels correct; per-cell and per-sample random streams are derived by
stable hashing from one master seed, so cells are order-independent and a
whole plan is reproducible bit for bit.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..attacks import (AttackConfig, AttackResult, perturbation_metrics,
                       run_attack, sample_uncontrolled_meters)
from ..errors import PlanError, PoolError
from ..fdia import Dataset, GenerationConfig, generate_dataset
from ..gridcase import GridModel
from ..neural.network import NalModel
from ..rng import derive_rng, derive_seed

RESULT_COLUMNS = ("case", "variant", "scale", "lr", "mu", "n",
                  "success_rate", "rho_c", "rho_a", "mean_iters", "wall_s")


@dataclass(frozen=True)
class ExperimentPlan:
    case_name: str
    variants: tuple[str, ...]
    scales: tuple[float, ...]
    lrs: tuple[float, ...]
    mus: tuple[float, ...]
    n_attack_samples: int
    seed: int
    uncontrolled_frac: float = 0.0
    max_iter: int = 500
    workers: int = 1

    def __post_init__(self):
        if self.n_attack_samples < 1:
            raise PlanError("n_attack_samples must be >= 1")
        if not (self.variants and self.scales and self.lrs and self.mus):
            raise PlanError("plan must list at least one variant, scale, lr and mu")


@dataclass(frozen=True)
class CellResult:
    case: str
    variant: str
    scale: float
    lr: float
    mu: float
    n: int
    success_rate: float
    rho_c: float | None
    rho_a: float | None
    mean_iters: float
    wall_s: float

    def to_json(self) -> dict:
        return {"case": self.case, "variant": self.variant, "scale": self.scale,
                "lr": self.lr, "mu": self.mu, "n": self.n,
                "success_rate": self.success_rate, "rho_c": self.rho_c,
                "rho_a": self.rho_a, "mean_iters": self.mean_iters,
                "wall_s": self.wall_s}


# ---------------------------------------------------------------------------
# attack pools
# ---------------------------------------------------------------------------

def select_attack_pool(model: NalModel, dataset: Dataset, n: int, seed: int,
                       scale_variance: float | None = None,
                       restrict_to: np.ndarray | None = None) -> list[int]:
    """Indices of n attacked samples the locator classifies with every label
    correct, sampled uniformly among the eligible ones."""
    candidates = dataset.attacked_indices(scale_variance)
    if restrict_to is not None:
        allowed = set(int(i) for i in restrict_to)
        candidates = np.array([i for i in candidates if int(i) in allowed], dtype=int)
    if candidates.size == 0:
        raise PoolError("dataset has no attacked samples for the requested scale")
    predictions = model.predict_labels_batch(dataset.z[candidates])
    eligible = candidates[np.all(predictions == dataset.y[candidates], axis=1)]
    if eligible.size < n:
        raise PoolError(
            f"only {eligible.size} completely correctly predicted samples "
            f"available, need {n}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(eligible, size=n, replace=False)
    return [int(i) for i in chosen]


def generate_attack_pool(model: NalModel, grid: GridModel, scale_variance: float,
                         n: int, seed: int, oversample: int = 8) -> tuple[Dataset, list[int]]:
    """A fresh single-scale dataset plus a correctly-predicted pool drawn from it,
    for attack runs that do not reference a stored dataset."""
    config = GenerationConfig(n_normal=1, n_attacked_per_scale=max(oversample * n, n + 20),
                              seed=derive_seed(seed, "attack-pool", scale_variance),
                              scales=(scale_variance,))
    dataset = generate_dataset(grid, config)
    pool = select_attack_pool(model, dataset, n,
                              derive_seed(seed, "pool-pick", scale_variance),
                              scale_variance)
    return dataset, pool


# ---------------------------------------------------------------------------
# campaign execution
# ---------------------------------------------------------------------------

_WORKER_STATE: dict = {}


def _init_worker(model: NalModel, grid: GridModel) -> None:
    _WORKER_STATE["model"] = model
    _WORKER_STATE["grid"] = grid


def _attack_job(args) -> AttackResult:
    z_a, fdia, config = args
    return run_attack(_WORKER_STATE["model"], _WORKER_STATE["grid"],
                      z_a, fdia, config)


def run_cell(model: NalModel, grid: GridModel, dataset: Dataset,
             pool: list[int], variant: str, scale: float, lr: float, mu: float,
             seed: int, uncontrolled_frac: float = 0.0, max_iter: int = 500,
             workers: int = 1) -> tuple[CellResult, list[AttackResult]]:
    """Attack every pool sample under one (variant, scale, lr, mu) setting."""
    cell_key = (variant, scale, lr, mu)
    jobs = []
    for pos, idx in enumerate(pool):
        sample = dataset.sample(idx)
        if sample.fdia is None:
            raise PoolError(f"pool sample {idx} is not an attacked sample")
        if not np.array_equal(model.predict_labels(sample.z), sample.y):
            raise PoolError(f"pool sample {idx} is no longer correctly predicted")
        job_seed = derive_seed(seed, "attack", *cell_key, pos)
        uncontrolled: frozenset[int] = frozenset()
        if uncontrolled_frac > 0:
            uncontrolled = sample_uncontrolled_meters(
                sample.fdia, uncontrolled_frac, derive_rng(job_seed, "uncontrolled"))
        config = AttackConfig(variant=variant, mu=mu, lr=lr, max_iter=max_iter,
                              uncontrolled_meters=uncontrolled, seed=job_seed)
        jobs.append((sample.z, sample.fdia, config))

    start = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                 initargs=(model, grid)) as pool_exec:
            results = list(pool_exec.map(_attack_job, jobs))
    else:
        _init_worker(model, grid)
        results = [_attack_job(job) for job in jobs]
    wall = time.perf_counter() - start

    metrics = perturbation_metrics(results)
    cell = CellResult(
        case=grid.case_name, variant=variant, scale=scale, lr=lr, mu=mu,
        n=len(results), success_rate=metrics.success_rate,
        rho_c=metrics.rho_c, rho_a=metrics.rho_a,
        mean_iters=float(np.mean([r.iterations_used for r in results])),
        wall_s=wall)
    return cell, results


def run_plan(plan: ExperimentPlan, model: NalModel, grid: GridModel,
             dataset: Dataset | None = None,
             pool_indices: np.ndarray | None = None) -> list[CellResult]:
    """Run every grid cell of the plan.

    When no dataset is supplied, a fresh single-scale pool is generated per
    scale; otherwise pools are drawn from the given dataset (optionally
    restricted, e.g. to its held-out split).
    """
    pools: dict[float, tuple[Dataset, list[int]]] = {}
    for scale in plan.scales:
        if dataset is None:
            pools[scale] = generate_attack_pool(
                model, grid, scale, plan.n_attack_samples,
                derive_seed(plan.seed, "pool", scale))
        else:
            pool = select_attack_pool(
                model, dataset, plan.n_attack_samples,
                derive_seed(plan.seed, "pool", scale), scale,
                restrict_to=pool_indices)
            pools[scale] = (dataset, pool)

    cells: list[CellResult] = []
    for variant in plan.variants:
        for scale in plan.scales:
            ds, pool = pools[scale]
            for lr in plan.lrs:
                for mu in plan.mus:
                    cell, _ = run_cell(
                        model, grid, ds, pool, variant, scale, lr, mu,
                        seed=plan.seed, uncontrolled_frac=plan.uncontrolled_frac,
                        max_iter=plan.max_iter, workers=plan.workers)
                    cells.append(cell)
    return cells


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def emit_report(results: list[CellResult], out_dir) -> tuple[Path, Path]:
    """Write results.csv (one row per cell) and results.json (same content)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "results.csv"
    json_path = out / "results.json"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for cell in results:
            row = cell.to_json()
            writer.writerow([
                row["case"], row["variant"], repr(row["scale"]), repr(row["lr"]),
                repr(row["mu"]), row["n"], repr(row["success_rate"]),
                "" if row["rho_c"] is None else repr(row["rho_c"]),
                "" if row["rho_a"] is None else repr(row["rho_a"]),
                repr(row["mean_iters"]), repr(row["wall_s"])])
    with open(json_path, "w") as fh:
        json.dump({"results": [cell.to_json() for cell in results]}, fh, indent=1)
        fh.write("\n")
    return csv_path, json_path


def read_report_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({
                "case": row["case"], "variant": row["variant"],
                "scale": float(row["scale"]), "lr": float(row["lr"]),
                "mu": float(row["mu"]), "n": int(row["n"]),
                "success_rate": float(row["success_rate"]),
                "rho_c": None if row["rho_c"] == "" else float(row["rho_c"]),
                "rho_a": None if row["rho_a"] == "" else float(row["rho_a"]),
                "mean_iters": float(row["mean_iters"]),
                "wall_s": float(row["wall_s"])})
    return rows


# ---------------------------------------------------------------------------
# plain-text key/value configuration
# ---------------------------------------------------------------------------

def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; '#' starts a comment; later keys win."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PlanError(f"config line {lineno} is not 'key = value': {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _parse_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def plan_from_config(cfg: dict[str, str], case_name: str) -> ExperimentPlan:
    from ..fdia import SCALE_NAMES

    def scale_value(token: str) -> float:
        return SCALE_NAMES[token] if token in SCALE_NAMES else float(token)

    scales = tuple(scale_value(s) for s in _parse_list(cfg.get("scales", "small")))
    return ExperimentPlan(
        case_name=case_name,
        variants=tuple(_parse_list(cfg.get("variants", "lesson1,lesson2,lesson3,lesson4"))),
        scales=scales,
        lrs=tuple(float(v) for v in _parse_list(cfg.get("lrs", "0.001"))),
        mus=tuple(float(v) for v in _parse_list(cfg.get("mus", "1.0"))),
        n_attack_samples=int(cfg.get("n", "100")),
        seed=int(cfg.get("seed", "0")),
        uncontrolled_frac=float(cfg.get("uncontrolled_frac", "0.0")),
        max_iter=int(cfg.get("max_iter", "500")),
        workers=int(cfg.get("workers", "1")))
