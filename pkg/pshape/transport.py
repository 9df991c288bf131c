"""
Earth mover's distance between equal-size point sets.

The exact solver is a minimum-cost perfect matching; above `exact_cap` points an
entropic (Sinkhorn) solver in the log domain is used, whose coupling is rounded to
a feasible one before it is costed. Training losses use the mean cost per point.
"""

import math
from typing import List, NamedTuple, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from pshape import DEFAULT_EXACT_CAP
from pshape.autodiff.tape import Tensor2
from pshape.exceptions import (
    ConfigurationError,
    EmptySetError,
    SolverCapError,
    UnequalCardinalityError,
)
from pshape.logging import LogConfig, Warnings
from pshape.types import Assignment, PointCloud, TransportPlan

NORMS = ("l1", "l2")
SOLVERS = ("auto", "exact", "approx")
MARGINAL_TOLERANCE = 1e-6
STAGE_TOLERANCE = 1e-3
STAGE_ITERS = 200
EPSILON_DECAY = 0.5

Transport = Union[Assignment, TransportPlan]


class TransportSettings(NamedTuple):
    norm: str = "l1"
    solver: str = "auto"
    exact_cap: int = DEFAULT_EXACT_CAP
    epsilon: float = 0.01
    max_iters: int = 50000


def cost_matrix(a: PointCloud, b: PointCloud, norm: str = "l1") -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise EmptySetError("Cannot compare empty point clouds")
    if len(a) != len(b):
        raise UnequalCardinalityError(
            f"Point clouds have {len(a)} and {len(b)} points; resample them first"
        )
    diff = a[:, None, :] - b[None, :, :]
    if norm == "l1":
        return np.abs(diff).sum(axis=-1)
    if norm == "l2":
        return np.sqrt((diff * diff).sum(axis=-1))
    raise ConfigurationError(f"Unknown ground metric '{norm}', expected one of {NORMS}")


def emd_exact(c: np.ndarray, cap: int = DEFAULT_EXACT_CAP) -> Assignment:
    n = c.shape[0]
    if n > cap:
        raise SolverCapError(
            f"{n} points exceed the exact solver cap of {cap}; "
            "use the approximate solver instead"
        )
    rows, mapping = linear_sum_assignment(c)
    # fsum is exactly rounded, hence independent of the matching's row order
    return Assignment(mapping=mapping, cost=math.fsum(c[rows, mapping]))


def _round_to_feasible(plan: np.ndarray, r: np.ndarray, c: np.ndarray) -> np.ndarray:
    row_scale = np.minimum(r / plan.sum(axis=1), 1.0)
    plan = plan * row_scale[:, None]
    col_scale = np.minimum(c / plan.sum(axis=0), 1.0)
    plan = plan * col_scale[None, :]
    err_r = r - plan.sum(axis=1)
    err_c = c - plan.sum(axis=0)
    mass = err_r.sum()
    if mass > 0:
        plan = plan + np.outer(err_r, err_c) / mass
    # the correction can land a hair below zero on entries that were already ~0
    return np.maximum(plan, 0.0)


def epsilon_schedule(c: np.ndarray, epsilon: float) -> List[float]:
    """Geometrically decreasing regularization, from the largest cost down to
    `epsilon`. Each stage warm-starts the next one."""
    schedule = []
    current = float(c.max())
    while current > epsilon:
        schedule.append(current)
        current *= EPSILON_DECAY
    schedule.append(epsilon)
    return schedule


def emd_approx(
    c: np.ndarray, epsilon: float = 0.01, max_iters: int = 50000
) -> TransportPlan:
    if epsilon <= 0:
        raise ConfigurationError(f"Entropic epsilon must be positive, got {epsilon}")
    n = c.shape[0]
    if n == 0:
        raise EmptySetError("Cannot transport an empty point cloud")
    if n == 1:
        return TransportPlan(np.ones((1, 1)), float(c[0, 0]), True, 0)

    log_marginal = np.full(n, -math.log(n))
    marginal = np.full(n, 1.0 / n)
    f, g = np.zeros(n), np.zeros(n)
    schedule = epsilon_schedule(c, epsilon)
    best = (np.inf, f, g, schedule[0])
    converged, iteration = False, 0
    for stage, eps in enumerate(schedule):
        final = stage == len(schedule) - 1
        tolerance = MARGINAL_TOLERANCE if final else STAGE_TOLERANCE
        stage_iters = 0
        while iteration < max_iters and (final or stage_iters < STAGE_ITERS):
            iteration += 1
            stage_iters += 1
            f = eps * (log_marginal - logsumexp((g[None, :] - c) / eps, axis=1))
            g = eps * (log_marginal - logsumexp((f[:, None] - c) / eps, axis=0))
            plan = np.exp((f[:, None] + g[None, :] - c) / eps)
            violation = np.abs(plan.sum(axis=1) - marginal).sum()
            if final and violation < best[0]:
                best = (violation, f, g, eps)
            if violation < tolerance:
                converged = final
                break
        if converged or iteration >= max_iters:
            break
    if not np.isfinite(best[0]):
        # the budget ran out before the final stage; keep the last potentials
        best = (violation, f, g, eps)
    violation, f, g, eps = best
    if not converged:
        Warnings.sinkhorn_not_converged(iteration, violation)
    plan = _round_to_feasible(
        np.exp((f[:, None] + g[None, :] - c) / eps), marginal, marginal
    )
    coupling = plan * n
    return TransportPlan(coupling, float(np.sum(coupling * c)), converged, iteration)


def _directions(diff: np.ndarray, norm: str) -> np.ndarray:
    if norm == "l1":
        return np.sign(diff)
    length = np.sqrt((diff * diff).sum(axis=-1, keepdims=True))
    safe = np.where(length > 0, length, 1.0)
    return np.where(length > 0, diff / safe, 0.0)


def emd_gradient(
    a: PointCloud, b: PointCloud, transport: Transport, norm: str = "l1"
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient of the total transport cost w.r.t. the coordinates of a and b,
    holding the matching (or coupling) fixed."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if isinstance(transport, Assignment):
        mapping = transport.mapping
        grad_a = _directions(a - b[mapping], norm)
        grad_b = np.zeros_like(b)
        grad_b[mapping] = -grad_a
        return grad_a, grad_b
    directions = _directions(a[:, None, :] - b[None, :, :], norm)
    weighted = transport.coupling[:, :, None] * directions
    return weighted.sum(axis=1), -weighted.sum(axis=0)


def solve(a: PointCloud, b: PointCloud, settings: TransportSettings) -> Transport:
    if settings.solver not in SOLVERS:
        raise ConfigurationError(
            f"Unknown EMD solver '{settings.solver}', expected one of {SOLVERS}"
        )
    c = cost_matrix(a, b, settings.norm)
    n = c.shape[0]
    if settings.solver == "exact":
        return emd_exact(c, settings.exact_cap)
    if settings.solver == "auto" and n <= settings.exact_cap:
        return emd_exact(c, settings.exact_cap)
    if settings.solver == "auto":
        Warnings.approximate_solver(n, settings.exact_cap)
    LogConfig.get_logger().debug(f"Entropic EMD on {n} points, eps={settings.epsilon}")
    return emd_approx(c, settings.epsilon, settings.max_iters)


def solver_name(transport: Transport) -> str:
    return "exact" if isinstance(transport, Assignment) else "approx"


def emd(a: PointCloud, b: PointCloud, settings: TransportSettings = None) -> float:
    """Mean per-point transport cost."""
    settings = settings or TransportSettings()
    return solve(a, b, settings).cost / len(a)


def transport_loss(
    a: Tensor2, b, settings: TransportSettings = None
) -> Tensor2:
    """Mean EMD between a recorded cloud and another cloud (recorded or constant).

    The optimal matching is held fixed in the backward pass, which yields the
    envelope (sub)gradient of the optimal cost.
    """
    settings = settings or TransportSettings()
    tape = a.tape
    b_tensor = b if isinstance(b, Tensor2) else tape.constant(b)
    transport = solve(a.value, b_tensor.value, settings)
    n = a.rows
    grad_a, grad_b = emd_gradient(a.value, b_tensor.value, transport, settings.norm)

    def backward(g):
        factor = g[0, 0] / n
        return grad_a * factor, grad_b * factor

    value = np.array([[transport.cost / n]])
    return tape.record("transport_loss", value, (a, b_tensor), backward)
