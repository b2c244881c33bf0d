"""Chamfer and Earth Mover's distances between point clouds."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from .errors import InvalidParameterError

log = logging.getLogger(__name__)

HUNGARIAN_CAP = 512


def _coords(cloud) -> np.ndarray:
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise InvalidParameterError("expected a non-empty (N, 3) point set")
    return pts


def chamfer(a, b) -> float:
    """Mean squared nearest-neighbour distance, averaged in both directions and summed."""
    pa, pb = _coords(a), _coords(b)
    d_ab, _ = cKDTree(pb).query(pa, k=1)
    d_ba, _ = cKDTree(pa).query(pb, k=1)
    return float(np.mean(d_ab ** 2) + np.mean(d_ba ** 2))


def chamfer_point_gradient(moving: np.ndarray, fixed: np.ndarray) -> np.ndarray:
    """Gradient of chamfer(moving, fixed) with respect to the rows of ``moving``."""
    moving = _coords(moving)
    fixed = _coords(fixed)
    grad = np.zeros_like(moving)
    _, nn_fixed = cKDTree(fixed).query(moving, k=1)
    grad += 2.0 * (moving - fixed[nn_fixed]) / len(moving)
    _, nn_moving = cKDTree(moving).query(fixed, k=1)
    np.add.at(grad, nn_moving, 2.0 * (moving[nn_moving] - fixed) / len(fixed))
    return grad


@dataclass(frozen=True)
class TransportPlan:
    cost: float
    coupling: np.ndarray
    solver: str
    converged: bool = True
    marginal_violation: float = 0.0
    iterations: int = 0


def _ground_cost(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    diff = pa[:, None, :] - pb[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _hungarian(cost: np.ndarray) -> TransportPlan:
    n = cost.shape[0]
    rows, cols = linear_sum_assignment(cost)
    coupling = np.zeros_like(cost)
    coupling[rows, cols] = 1.0 / n
    return TransportPlan(cost=float(cost[rows, cols].mean()), coupling=coupling, solver="hungarian-exact")


def sinkhorn(
    cost: np.ndarray,
    reg: Optional[float] = None,
    max_iter: int = 20000,
    tol: float = 1e-6,
) -> TransportPlan:
    """Log-domain Sinkhorn between uniform marginals.

    ``reg`` defaults to 0.01 times the mean ground cost. The reported cost is
    the transport cost <P, C> of the entropic plan, without the entropy term.
    """
    n, m = cost.shape
    if reg is None:
        reg = 0.01 * float(cost.mean()) if cost.mean() > 0 else 1.0
    if reg <= 0:
        raise InvalidParameterError("sinkhorn regularization must be positive")
    log_a = np.full(n, -np.log(n))
    log_b = np.full(m, -np.log(m))
    f = np.zeros(n)
    g = np.zeros(m)
    # epsilon scaling: warm-start the potentials from coarser regularizations
    top = max(float(cost.max()), reg)
    for eps in np.geomspace(top, reg, max(int(np.ceil(np.log2(top / reg))), 1) + 1)[:-1]:
        for _ in range(50):
            f = eps * (log_a - logsumexp((g[None, :] - cost) / eps, axis=1))
            g = eps * (log_b - logsumexp((f[:, None] - cost) / eps, axis=0))
    kern = -cost / reg
    best = None
    violation = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        f = reg * (log_a - logsumexp(kern + g[None, :] / reg, axis=1))
        g = reg * (log_b - logsumexp(kern + f[:, None] / reg, axis=0))
        if it % 10 == 0 or it == max_iter:
            log_p = kern + (f[:, None] + g[None, :]) / reg
            plan = np.exp(log_p)
            violation = float(np.abs(plan.sum(axis=1) - 1.0 / n).sum())
            if best is None or violation < best[1]:
                best = (plan, violation)
            if violation < tol:
                break
    plan, violation = best
    converged = violation < tol
    if not converged:
        log.warning("sinkhorn did not converge in %d iterations (marginal violation %.3g)", max_iter, violation)
    return TransportPlan(
        cost=float((plan * cost).sum()),
        coupling=plan,
        solver="sinkhorn",
        converged=converged,
        marginal_violation=violation,
        iterations=it,
    )


def emd(a, b, solver: str = "auto", reg: Optional[float] = None, max_iter: int = 20000,
        hungarian_cap: int = HUNGARIAN_CAP) -> TransportPlan:
    """Earth Mover's distance with Euclidean ground cost and uniform masses.

    ``solver`` is ``hungarian-exact``, ``sinkhorn`` or ``auto``; ``auto``
    picks the exact assignment for equal sizes up to ``hungarian_cap`` points.
    """
    pa, pb = _coords(a), _coords(b)
    cost = _ground_cost(pa, pb)
    if solver == "auto":
        solver = "hungarian-exact" if len(pa) == len(pb) and len(pa) <= hungarian_cap else "sinkhorn"
    if solver == "hungarian-exact":
        if len(pa) != len(pb):
            raise InvalidParameterError("the exact solver needs equal-size clouds; use sinkhorn")
        if len(pa) > hungarian_cap:
            log.warning("N=%d exceeds the Hungarian cap %d; routing to sinkhorn", len(pa), hungarian_cap)
            return sinkhorn(cost, reg=reg, max_iter=max_iter)
        return _hungarian(cost)
    if solver == "sinkhorn":
        return sinkhorn(cost, reg=reg, max_iter=max_iter)
    raise InvalidParameterError(f"unknown EMD solver {solver!r}")


def cd_bound_check(delta, n: Optional[int] = None, clean=None) -> tuple[float, float]:
    """Chamfer distance of an index-aligned perturbation against 2 ||delta||_F^2 / N.

    ``delta`` is a BandPerturbation or an (N, 3) array. ``clean`` is the
    unperturbed cloud; when omitted a zero-centred reference is impossible, so
    it is required unless ``delta`` is identically zero.
    """
    d = np.asarray(getattr(delta, "delta", delta), dtype=np.float64)
    n = len(d) if n is None else n
    bound = 2.0 * float(np.sum(d * d)) / n
    if clean is None:
        if np.any(d):
            raise InvalidParameterError("cd_bound_check needs the clean cloud for a non-zero perturbation")
        return 0.0, bound
    p = _coords(clean)
    actual = chamfer(p, p + d)
    if actual > bound + 1e-9:
        raise AssertionError(f"chamfer bound violated: {actual} > {bound}")
    return actual, bound


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predictions == labels))
