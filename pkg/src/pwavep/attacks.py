"""Desk-scale attacks used to exercise the defense."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidParameterError, OracleError
from .metrics import chamfer, chamfer_point_gradient
from .oracle import ToyClassifier, pseudo_label
from .pcgeom import PointCloud
from .spectral import SpectralBasis, inject_band_perturbation

KINDS = ("linf-coordinates", "spectral-band", "point-addition")


@dataclass(frozen=True)
class AttackBudget:
    kind: str = "linf-coordinates"
    epsilon: float = 0.05
    steps: int = 20
    step_size: Optional[float] = None
    added_points: int = 0
    cd_weight: float = 1.0
    band_index: int = 10
    band_count: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParameterError(f"attack kind must be one of {KINDS}")
        if self.epsilon < 0:
            raise InvalidParameterError("epsilon must be >= 0")
        if self.steps < 1:
            raise InvalidParameterError("steps must be >= 1")
        if self.added_points < 0:
            raise InvalidParameterError("added_points must be >= 0")

    @property
    def effective_step(self) -> float:
        return self.step_size if self.step_size is not None else 2.5 * self.epsilon / self.steps


def _require_toy(model):
    if not isinstance(model, ToyClassifier):
        raise OracleError("gradient attacks need the analytic toy classifier")


def _target(model, cloud: PointCloud, label):
    if label is not None:
        return int(label)
    if cloud.label is not None:
        return cloud.label
    return pseudo_label(model, cloud)


def pgd_attack(cloud: PointCloud, model, budget: AttackBudget, label: Optional[int] = None) -> PointCloud:
    """Iterated sign-gradient ascent on CE inside an L-inf ball around ``cloud``.

    Returns the highest-loss iterate seen (the clean input counts as iterate 0).
    """
    _require_toy(model)
    y = _target(model, cloud, label)
    x0 = cloud.points
    if budget.epsilon == 0:
        return cloud
    x = x0.copy()
    best_x, best_loss = x0, model.loss_and_gradient(x0, y)[1]
    for _ in range(budget.steps):
        _, _, _, _, grad, _ = model.loss_and_gradient(x, y)
        x = np.clip(x + budget.effective_step * np.sign(grad), x0 - budget.epsilon, x0 + budget.epsilon)
        loss = model.loss_and_gradient(x, y)[1]
        if loss > best_loss:
            best_x, best_loss = x, loss
    return cloud.with_points(best_x)


def fgsm_attack(cloud: PointCloud, model, epsilon: float, label: Optional[int] = None) -> PointCloud:
    return pgd_attack(cloud, model, AttackBudget(epsilon=epsilon, steps=1, step_size=epsilon), label)


def spectral_band_attack(cloud: PointCloud, basis: SpectralBasis, budget: AttackBudget) -> PointCloud:
    """Band-limited random perturbation of Frobenius energy ``budget.epsilon``."""
    attacked, _ = inject_band_perturbation(
        cloud, basis, budget.band_index, budget.band_count, budget.epsilon, budget.seed
    )
    return attacked


def point_addition_attack(cloud: PointCloud, model, budget: AttackBudget, label: Optional[int] = None) -> PointCloud:
    """Append M points and push them up CE - cd_weight * CD(augmented, original).

    New points start as jittered copies of random existing points (sigma =
    0.02 of the bounding-box diagonal); original points never move.
    """
    _require_toy(model)
    m = budget.added_points
    if m == 0:
        return cloud
    y = _target(model, cloud, label)
    rng = np.random.default_rng(budget.seed)
    orig = cloud.points
    diag = float(np.linalg.norm(orig.max(axis=0) - orig.min(axis=0)))
    new = orig[rng.integers(0, len(orig), m)] + 0.02 * diag * rng.standard_normal((m, 3))
    step = budget.effective_step

    def objective(extra):
        aug = np.vstack([orig, extra])
        return model.loss_and_gradient(aug, y)[1] - budget.cd_weight * chamfer(aug, orig)

    best_new, best_obj = new, objective(new)
    for _ in range(budget.steps):
        aug = np.vstack([orig, new])
        _, _, _, _, grad, _ = model.loss_and_gradient(aug, y)
        cd_grad = chamfer_point_gradient(aug, orig)
        g = grad[len(orig):] - budget.cd_weight * cd_grad[len(orig):]
        new = new + step * np.sign(g)
        obj = objective(new)
        if obj > best_obj:
            best_new, best_obj = new, obj
    return cloud.append(best_new)
