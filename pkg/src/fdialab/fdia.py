"""Stealthy attack-vector construction and labeled dataset synthesis.

An attack shifts the state estimate by c while leaving the weighted residual
unchanged: the injected measurement perturbation is a = H c, which the
chi-square test cannot see.  Datasets mix normal samples (label row of zeros)
with attacked samples (z + a, labels marking the meters that a actually
touches) at three attack scales.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import ContractError, ObservabilityError
from .gridcase import GridModel
from .rng import derive_rng

LABEL_EPSILON = 1e-8  # per-unit; guards float dust on structural zeros of H c
SIGMA_FLOOR = 1e-4    # per-unit; keeps R invertible for near-zero-mean meters
DEFAULT_SCALES = (0.02, 0.1, 0.5)
SCALE_NAMES = {"small": 0.02, "medium": 0.1, "large": 0.5}

LOAD_LOW, LOAD_HIGH = 0.8, 1.2

DATASET_META_VERSION = 1

_CACHE_KEY = "dc_flow_cholesky"


@dataclass(frozen=True)
class FdiaSpec:
    """A stealthy attack: state error c, measurement vector a = H c."""

    c: np.ndarray
    a: np.ndarray
    target_indices: tuple[int, ...]
    scale_variance: float

    @property
    def support(self) -> np.ndarray:
        """Indices of meters the attack actually touches."""
        return np.flatnonzero(np.abs(self.a) > LABEL_EPSILON)


@dataclass(frozen=True)
class LabeledSample:
    z: np.ndarray
    y: np.ndarray
    fdia: FdiaSpec | None
    x_true: np.ndarray


@dataclass
class Dataset:
    """Sample matrix Z (u x m), label matrix Y (u x m) and per-sample attack specs."""

    z: np.ndarray
    y: np.ndarray
    x_true: np.ndarray
    attacks: dict[int, FdiaSpec]
    meta: dict

    def __len__(self) -> int:
        return self.z.shape[0]

    @property
    def n_meter(self) -> int:
        return self.z.shape[1]

    def sample(self, i: int) -> LabeledSample:
        return LabeledSample(z=self.z[i], y=self.y[i],
                             fdia=self.attacks.get(i), x_true=self.x_true[i])

    def attacked_indices(self, scale_variance: float | None = None) -> np.ndarray:
        idx = sorted(self.attacks)
        if scale_variance is not None:
            idx = [i for i in idx
                   if self.attacks[i].scale_variance == scale_variance]
        return np.array(idx, dtype=int)

    def split_indices(self, train_fraction: float = 2 / 3) -> tuple[np.ndarray, np.ndarray]:
        """Deterministic train/test split derived from the dataset's own seed."""
        rng = derive_rng(self.meta["seed"], "split")
        perm = rng.permutation(len(self))
        cut = int(round(len(self) * train_fraction))
        return perm[:cut], perm[cut:]


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _dc_flow_solver(grid: GridModel):
    """Cholesky factor of the reduced susceptance matrix, cached per model."""
    cached = grid.cache.get(_CACHE_KEY)
    if cached is not None:
        return cached
    state_ids = grid.state_bus_ids
    rows = []
    injection_row = {m.bus: i for i, m in enumerate(grid.meters)
                     if m.kind == "bus_injection"}
    for b in state_ids:
        rows.append(grid.h_matrix[injection_row[b]])
    b_reduced = np.vstack(rows)
    try:
        factor = scipy.linalg.cho_factor(b_reduced)
    except scipy.linalg.LinAlgError as exc:
        raise ObservabilityError("reduced susceptance matrix is singular") from exc
    grid.cache[_CACHE_KEY] = factor
    return factor


def sample_state(grid: GridModel, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw per-bus loads uniformly in [0.8, 1.2] x base and solve the DC flow.

    The residual injection lands on the slack bus, so the system always
    balances; the returned state covers the non-slack buses.
    """
    loads = grid.base_loads * rng.uniform(LOAD_LOW, LOAD_HIGH, size=grid.n_bus)
    slack_pos = grid.bus_index(grid.slack_bus)
    injections = -np.delete(loads, slack_pos)
    factor = _dc_flow_solver(grid)
    x = scipy.linalg.cho_solve(factor, injections)
    return loads, x


def make_measurements(grid: GridModel, x: np.ndarray,
                      rng: np.random.Generator) -> np.ndarray:
    """z = H x + e with independent zero-mean Gaussian meter noise."""
    if grid.noise_sigma is None:
        raise ContractError("make_measurements requires a calibrated noise_sigma")
    return grid.h_matrix @ x + grid.noise_sigma * rng.standard_normal(grid.n_meter)


def calibrate_noise(grid: GridModel, noise_free_samples: np.ndarray,
                    noise_fraction: float = 0.02,
                    sigma_floor: float = SIGMA_FLOOR) -> GridModel:
    """Set sigma_i to noise_fraction times the mean |z_i| over a noise-free pool.

    Absolute values are used because signed flow readings can average to zero.
    """
    samples = np.asarray(noise_free_samples, dtype=float)
    if samples.ndim != 2 or samples.shape[1] != grid.n_meter:
        raise ContractError(
            f"samples must have shape (k, {grid.n_meter}), got {samples.shape}")
    if samples.shape[0] < 100:
        raise ContractError(
            f"noise calibration needs at least 100 samples, got {samples.shape[0]}")
    sigma = np.maximum(noise_fraction * np.mean(np.abs(samples), axis=0), sigma_floor)
    return grid.with_noise_sigma(sigma)


def calibration_pool(grid: GridModel, n_samples: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Noise-free measurement vectors from random load draws."""
    return np.vstack([grid.h_matrix @ sample_state(grid, rng)[1]
                      for _ in range(n_samples)])


# ---------------------------------------------------------------------------
# attack construction
# ---------------------------------------------------------------------------

def labels_from_attack(a: np.ndarray, label_epsilon: float = LABEL_EPSILON) -> np.ndarray:
    """Binary label row: 1 where the attack vector exceeds the epsilon."""
    return (np.abs(np.asarray(a, dtype=float)) > label_epsilon).astype(np.int8)


def random_fdia(grid: GridModel, scale_variance: float,
                rng: np.random.Generator) -> FdiaSpec:
    """Random stealthy attack: k ~ U{1..n/2} target states, errors ~ N(0, nu^2)."""
    if scale_variance <= 0:
        raise ContractError(f"scale_variance must be positive, got {scale_variance}")
    n = grid.n_state
    if n < 2:
        raise ContractError("random_fdia needs at least 2 state variables")
    k = int(rng.integers(1, n // 2 + 1))
    targets = np.sort(rng.choice(n, size=k, replace=False))
    c = np.zeros(n)
    for i in targets:
        value = 0.0
        while value == 0.0:
            value = rng.normal(0.0, np.sqrt(scale_variance))
        c[i] = value
    return FdiaSpec(c=c, a=grid.h_matrix @ c,
                    target_indices=tuple(int(t) for t in targets),
                    scale_variance=scale_variance)


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GenerationConfig:
    n_normal: int
    n_attacked_per_scale: int
    seed: int
    scales: tuple[float, ...] = DEFAULT_SCALES


def generate_dataset(grid: GridModel, config: GenerationConfig) -> Dataset:
    """Synthesize a labeled dataset: a pool of normal samples, a random subset
    of which receives a stealthy attack at one of the configured scales."""
    if grid.noise_sigma is None:
        raise ContractError("generate_dataset requires a calibrated grid model")
    if config.n_normal < 1 or config.n_attacked_per_scale < 1:
        raise ContractError("sample counts must be >= 1")

    rng = np.random.default_rng(config.seed)
    n_attacked = config.n_attacked_per_scale * len(config.scales)
    total = config.n_normal + n_attacked

    x_true = np.empty((total, grid.n_state))
    z = np.empty((total, grid.n_meter))
    for i in range(total):
        _, x = sample_state(grid, rng)
        x_true[i] = x
        z[i] = make_measurements(grid, x, rng)

    y = np.zeros((total, grid.n_meter), dtype=np.int8)
    attacked = rng.choice(total, size=n_attacked, replace=False)
    attacks: dict[int, FdiaSpec] = {}
    for j, sample_idx in enumerate(attacked):
        scale = config.scales[j // config.n_attacked_per_scale]
        spec = random_fdia(grid, scale, rng)
        attacks[int(sample_idx)] = spec
        z[sample_idx] += spec.a
        y[sample_idx] = labels_from_attack(spec.a)

    order = rng.permutation(total)
    z = z[order]
    y = y[order]
    x_true = x_true[order]
    new_pos = {int(old): new for new, old in enumerate(order)}
    attacks = {new_pos[i]: spec for i, spec in attacks.items()}

    per_scale = {repr(s): config.n_attacked_per_scale for s in config.scales}
    meta = {
        "version": DATASET_META_VERSION,
        "case_name": grid.case_name,
        "seed": config.seed,
        "n_samples": total,
        "counts": {"normal": config.n_normal, "attacked": n_attacked,
                   "per_scale": per_scale},
        "noise_sigma": [float(s) for s in grid.noise_sigma],
        "split": "full",
    }
    return Dataset(z=z, y=y, x_true=x_true, attacks=attacks, meta=meta)


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def _format_c(spec: FdiaSpec) -> str:
    return ";".join(f"{i}:{float(spec.c[i])!r}" for i in spec.target_indices)


def _parse_c(text: str, n_state: int) -> np.ndarray:
    c = np.zeros(n_state)
    if text:
        for pair in text.split(";"):
            idx, value = pair.split(":")
            c[int(idx)] = float(value)
    return c


def save_dataset(dataset: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "meta.json", "w") as fh:
        json.dump(dataset.meta, fh, indent=1)
        fh.write("\n")
    np.savetxt(out / "measurements.csv", dataset.z, delimiter=",", fmt="%.17g")
    np.savetxt(out / "labels.csv", dataset.y, delimiter=",", fmt="%d")
    np.savetxt(out / "states.csv", dataset.x_true, delimiter=",", fmt="%.17g")
    with open(out / "attacks.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_index", "scale_variance", "c"])
        for i in sorted(dataset.attacks):
            spec = dataset.attacks[i]
            writer.writerow([i, repr(spec.scale_variance), _format_c(spec)])


def load_dataset(in_dir, grid: GridModel | None = None) -> Dataset:
    """Read a dataset directory back; attack vectors a are recomputed from c
    when a grid model is supplied (they satisfy a = H c by construction)."""
    src = Path(in_dir)
    with open(src / "meta.json") as fh:
        meta = json.load(fh)
    z = np.loadtxt(src / "measurements.csv", delimiter=",", ndmin=2)
    y = np.loadtxt(src / "labels.csv", delimiter=",", dtype=np.int8, ndmin=2)
    x_true = np.loadtxt(src / "states.csv", delimiter=",", ndmin=2)
    n_state = x_true.shape[1]

    attacks: dict[int, FdiaSpec] = {}
    with open(src / "attacks.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            idx = int(row["sample_index"])
            scale = float(row["scale_variance"])
            c = _parse_c(row["c"], n_state)
            if grid is not None:
                a = grid.h_matrix @ c
            else:
                a = np.full(z.shape[1], np.nan)
            attacks[idx] = FdiaSpec(
                c=c, a=a, target_indices=tuple(int(i) for i in np.flatnonzero(c)),
                scale_variance=scale)
    return Dataset(z=z, y=y, x_true=x_true, attacks=attacks, meta=meta)
