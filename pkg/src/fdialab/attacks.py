"""Adversarial perturbation search against the multi-label locator.

The attacker already holds a stealthy attack vector a = H c and wants the
locator to misread the tampered measurements.  Perturbations are searched in
state space (so they stay in the column space of H and remain invisible to
residual-based detection) through a tanh change of variables that keeps every
state perturbation inside (-mu, mu), and driven by Adam on a hinge objective
over the locator's logits.

Four variants pair two objectives:

==========  =================================  ==============================
variant     meters that must read "normal"     original estimation error
==========  =================================  ==============================
lesson1     the attacked meters (support of a) free to drift
lesson2     every meter                        free to drift
lesson3     the attacked meters                preserved exactly (masked)
lesson4     every meter                        preserved exactly (masked)
==========  =================================  ==============================

The targeted variants (3/4) freeze the perturbation on c's support with a
binary mask, so the induced estimation error on the targeted state variables
is untouched.  A cost-constrained mode additionally zeroes the perturbation
on meters the attacker cannot reach; that projection can leave the column
space of H, so the final residual statistic is reported rather than
guaranteed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError
from .estimation import bdd_statistic
from .fdia import LABEL_EPSILON, FdiaSpec
from .gridcase import GridModel
from .neural.layers import sigmoid
from .neural.network import NalModel
from .neural.optim import Adam

VARIANTS = ("lesson1", "lesson2", "lesson3", "lesson4")


@dataclass(frozen=True)
class AttackConfig:
    variant: str
    mu: float = 1.0               # state perturbation bound, radians
    lr: float = 1e-3              # Adam initial learning rate
    max_iter: int = 500
    objective_mode: str = "hinge"  # "hinge" | "penalty"
    penalty_lambda: float = 1.0
    uncontrolled_meters: frozenset[int] = frozenset()
    set_a: frozenset[int] = frozenset()  # meters to force label 1
    seed: int = 0
    n_restarts: int = 0
    record_trace: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}")
        if self.mu <= 0:
            raise ContractError("mu must be positive")
        if self.max_iter < 1:
            raise ContractError("max_iter must be >= 1")
        if self.objective_mode not in ("hinge", "penalty"):
            raise ContractError(f"unknown objective_mode {self.objective_mode!r}")


@dataclass(frozen=True)
class VariantSpec:
    """Label constraints and the state mask of one attack variant."""

    set_a: tuple[int, ...]
    set_b: tuple[int, ...]
    mask: np.ndarray  # 1 where the state may be perturbed, 0 on frozen targets
    require_targeted: bool


@dataclass
class AttackResult:
    success: bool
    iterations_used: int
    zeta: np.ndarray
    theta: np.ndarray  # measurement perturbation after any projection
    z_f: np.ndarray
    predicted_labels: np.ndarray
    bdd_statistic_final: float
    zeta_norm: float
    theta_norm: float     # ||theta||_2 as applied
    h_zeta_norm: float    # ||H zeta||_2 before projection
    loss: float
    variant: str
    trace: list[tuple[int, float, float, int]] | None = None


@dataclass(frozen=True)
class PerturbationMetrics:
    success_rate: float
    rho_c: float | None  # mean ||zeta||_2 over successes
    rho_a: float | None  # mean ||H zeta||_2 over successes


def build_variant(variant: str, fdia: FdiaSpec,
                  set_a: frozenset[int] | tuple[int, ...] = ()) -> VariantSpec:
    """Resolve a variant name into concrete label constraints and mask."""
    if variant not in VARIANTS:
        raise ContractError(f"unknown variant {variant!r}")
    n_meters = len(fdia.a)
    if variant in ("lesson1", "lesson3"):
        set_b = tuple(int(i) for i in fdia.support)
    else:
        set_b = tuple(range(n_meters))
    targeted = variant in ("lesson3", "lesson4")
    mask = np.ones(len(fdia.c))
    if targeted:
        mask[np.asarray(fdia.c) != 0] = 0.0
    set_a = tuple(sorted(int(i) for i in set_a))
    clash = set(set_a) & set(set_b)
    if clash:
        raise ContractError(
            f"set_a and set_b overlap on meters {sorted(clash)}")
    return VariantSpec(set_a=set_a, set_b=set_b, mask=mask,
                       require_targeted=targeted)


def attack_loss(logits: np.ndarray, spec: VariantSpec) -> tuple[float, np.ndarray]:
    """Hinge objective:

        sum_{i in A} max(0, -logit_i) + sum_{j in B} max(0, logit_j)

    Returns the loss and its gradient with respect to the logits.
    """
    loss = 0.0
    grad = np.zeros_like(logits)
    for i in spec.set_a:
        if logits[i] < 0:
            loss += -logits[i]
            grad[i] -= 1.0
    for j in spec.set_b:
        if logits[j] > 0:
            loss += logits[j]
            grad[j] += 1.0
    return float(loss), grad


def constraints_satisfied(labels: np.ndarray, spec: VariantSpec) -> bool:
    """1 on every meter of A, 0 on every meter of B; other meters are free."""
    for i in spec.set_a:
        if labels[i] != 1:
            return False
    for j in spec.set_b:
        if labels[j] != 0:
            return False
    return True


def count_violations(labels: np.ndarray, spec: VariantSpec) -> int:
    return (sum(1 for i in spec.set_a if labels[i] != 1)
            + sum(1 for j in spec.set_b if labels[j] != 0))


def sample_uncontrolled_meters(fdia: FdiaSpec, fraction: float,
                               rng: np.random.Generator) -> frozenset[int]:
    """A random fraction of the non-essential meters (those outside the
    support of a, which the attacker is not forced to control)."""
    if not 0.0 <= fraction <= 1.0:
        raise ContractError(f"fraction must be in [0, 1], got {fraction}")
    essential = set(int(i) for i in fdia.support)
    free = np.array([j for j in range(len(fdia.a)) if j not in essential])
    k = int(round(fraction * len(free)))
    if k == 0:
        return frozenset()
    chosen = rng.choice(free, size=k, replace=False)
    return frozenset(int(j) for j in chosen)


@dataclass
class _Snapshot:
    zeta: np.ndarray
    theta: np.ndarray
    h_zeta_norm: float
    z_f: np.ndarray
    labels: np.ndarray
    loss: float


@dataclass
class _IterationState:
    zeta: np.ndarray
    theta: np.ndarray
    h_zeta_norm: float
    z_f: np.ndarray
    logits: np.ndarray
    labels: np.ndarray
    loss: float
    grad_varpi: np.ndarray


def objective_gradient(model: NalModel, grid: GridModel, z_a: np.ndarray,
                       spec: VariantSpec, config: AttackConfig,
                       varpi: np.ndarray) -> _IterationState:
    """Evaluate the attack objective at varpi and backpropagate it through the
    network, the standardization, the cost projection, H, the mask and the
    tanh reparameterization."""
    h = grid.h_matrix
    mask = spec.mask
    uncontrolled = np.array(sorted(config.uncontrolled_meters), dtype=int)
    lam = config.penalty_lambda if config.objective_mode == "penalty" else 0.0

    t = np.tanh(varpi)
    zeta = mask * (config.mu * t)
    theta = h @ zeta
    h_zeta_norm = float(np.linalg.norm(theta))
    if uncontrolled.size:
        theta = theta.copy()
        theta[uncontrolled] = 0.0
    z_f = z_a + theta
    logits, ctxs = model.forward_batch(z_f[None, :], train=False)
    logits = logits[0]

    loss, dlogits = attack_loss(logits, spec)
    znorm = float(np.linalg.norm(zeta))
    if lam:
        loss += lam * znorm

    _, dz = model.backward_batch(ctxs, dlogits[None, :], train=False)
    dtheta = dz[0]
    if uncontrolled.size:
        dtheta = dtheta.copy()
        dtheta[uncontrolled] = 0.0
    dzeta = h.T @ dtheta
    if lam and znorm > 0:
        dzeta = dzeta + lam * zeta / znorm
    grad_varpi = dzeta * mask * config.mu * (1.0 - t * t)

    labels = (sigmoid(logits) > 0.5).astype(np.int8)
    return _IterationState(zeta=zeta, theta=theta, h_zeta_norm=h_zeta_norm,
                           z_f=z_f, logits=logits, labels=labels, loss=loss,
                           grad_varpi=grad_varpi)


def run_attack(model: NalModel, grid: GridModel, z_a: np.ndarray,
               fdia: FdiaSpec, config: AttackConfig) -> AttackResult:
    """Search for a state perturbation defeating the locator's labels.

    Starts at zeta = 0 (so an already-satisfying sample succeeds at iteration
    0), runs at most max_iter Adam steps, and stops at the first iterate whose
    predicted labels satisfy the variant's constraints.  On exhaustion the
    minimum-loss iterate's diagnostics are returned with success=False.
    """
    if model.mode != "eval":
        raise ContractError("run_attack requires the model in eval mode")
    z_a = np.asarray(z_a, dtype=float)
    if z_a.shape != (grid.n_meter,):
        raise ContractError(
            f"z_a must have length {grid.n_meter}, got {z_a.shape}")

    spec = build_variant(config.variant, fdia, config.set_a)

    trace: list[tuple[int, float, float, int]] | None = \
        [] if config.record_trace else None
    rng = np.random.default_rng(config.seed)
    best: _Snapshot | None = None
    iterations_total = 0

    for restart in range(config.n_restarts + 1):
        if restart == 0:
            varpi = np.zeros(grid.n_state)
        else:
            varpi = 0.1 * rng.standard_normal(grid.n_state)
        optimizer = Adam(lr=config.lr)

        state = objective_gradient(model, grid, z_a, spec, config, varpi)
        for iteration in range(config.max_iter + 1):
            if not np.isfinite(state.loss):
                raise NumericError(f"non-finite attack loss at iteration {iteration}")
            if trace is not None:
                trace.append((iteration, state.loss, bdd_statistic(grid, state.z_f),
                              count_violations(state.labels, spec)))
            if constraints_satisfied(state.labels, spec):
                return AttackResult(
                    success=True, iterations_used=iterations_total + iteration,
                    zeta=state.zeta, theta=state.theta, z_f=state.z_f,
                    predicted_labels=state.labels,
                    bdd_statistic_final=bdd_statistic(grid, state.z_f),
                    zeta_norm=float(np.linalg.norm(state.zeta)),
                    theta_norm=float(np.linalg.norm(state.theta)),
                    h_zeta_norm=state.h_zeta_norm,
                    loss=state.loss, variant=config.variant, trace=trace)
            if best is None or state.loss < best.loss:
                best = _Snapshot(zeta=state.zeta, theta=state.theta,
                                 h_zeta_norm=state.h_zeta_norm, z_f=state.z_f,
                                 labels=state.labels, loss=state.loss)
            if iteration == config.max_iter:
                break
            optimizer.step({"varpi": varpi}, {"varpi": state.grad_varpi})
            state = objective_gradient(model, grid, z_a, spec, config, varpi)

        iterations_total += config.max_iter

    return AttackResult(
        success=False, iterations_used=iterations_total,
        zeta=best.zeta, theta=best.theta, z_f=best.z_f,
        predicted_labels=best.labels,
        bdd_statistic_final=bdd_statistic(grid, best.z_f),
        zeta_norm=float(np.linalg.norm(best.zeta)),
        theta_norm=float(np.linalg.norm(best.theta)),
        h_zeta_norm=best.h_zeta_norm,
        loss=best.loss, variant=config.variant, trace=trace)


def perturbation_metrics(results: list[AttackResult]) -> PerturbationMetrics:
    """Success rate plus mean perturbation norms over the successful runs."""
    if not results:
        return PerturbationMetrics(success_rate=0.0, rho_c=None, rho_a=None)
    successes = [r for r in results if r.success]
    rate = len(successes) / len(results)
    if not successes:
        return PerturbationMetrics(success_rate=rate, rho_c=None, rho_a=None)
    rho_c = float(np.mean([r.zeta_norm for r in successes]))
    rho_a = float(np.mean([r.h_zeta_norm for r in successes]))
    return PerturbationMetrics(success_rate=rate, rho_c=rho_c, rho_a=rho_a)
