"""Synthetic labeled point-cloud datasets (sphere, cube, torus, plane).

Shapes are generated already centred with maximum radius 1, so zero jitter
leaves every sphere point exactly on the unit sphere.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from ..errors import InvalidParameterError
from ..pcgeom import PointCloud

CLASSES = ("sphere", "cube", "torus", "plane")

# tube radius of the torus class; the centre-line radius is 1 - minor so the outer rim sits at radius 1
_TORUS_MINOR = 0.1


def sample_sphere(n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sample_cube(n: int, rng: np.random.Generator) -> np.ndarray:
    half = 1.0 / np.sqrt(3.0)
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-half, half, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        rows = axis == a
        others = [b for b in range(3) if b != a]
        pts[rows, a] = sign[rows] * half
        pts[np.ix_(rows, others)] = uv[rows]
    return pts


def sample_torus(n: int, rng: np.random.Generator, minor: Optional[float] = None) -> np.ndarray:
    small = _TORUS_MINOR if minor is None else minor
    if not 0.0 < small < 0.5:
        raise InvalidParameterError(f"torus minor radius must lie in (0, 0.5), got {small}")
    big = 1.0 - small
    out = np.empty((0, 3))
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        theta = rng.uniform(0, 2 * np.pi, m)
        phi = rng.uniform(0, 2 * np.pi, m)
        # area element is proportional to (R + r cos theta)
        keep = rng.uniform(0, big + small, m) < big + small * np.cos(theta)
        theta, phi = theta[keep], phi[keep]
        ring = big + small * np.cos(theta)
        pts = np.stack([ring * np.cos(phi), ring * np.sin(phi), small * np.sin(theta)], axis=1)
        out = np.vstack([out, pts])
    return out[:n]


def sample_plane(n: int, rng: np.random.Generator) -> np.ndarray:
    half = 1.0 / np.sqrt(2.0)
    xy = rng.uniform(-half, half, size=(n, 2))
    return np.column_stack([xy, np.zeros(n)])


_SAMPLERS = {"sphere": sample_sphere, "cube": sample_cube, "torus": sample_torus, "plane": sample_plane}


@dataclass(frozen=True)
class Dataset:
    clouds: tuple
    class_names: tuple

    def __len__(self):
        return len(self.clouds)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clouds])

    def subset(self, index) -> "Dataset":
        return Dataset(tuple(self.clouds[i] for i in index), self.class_names)


def generate_synthetic_dataset(
    classes=CLASSES,
    points_per_cloud: int = 256,
    clouds_per_class: int = 100,
    noise: float = 0.01,
    seed: int = 0,
    deform: float = 0.0,
    rotate: bool = False,
    torus_minor: Optional[float] = None,
) -> Dataset:
    """Uniform surface samples with additive Gaussian jitter, interleaved by class.

    ``deform`` > 0 scales each axis of each cloud by a factor drawn from
    [1 - deform, 1] and ``rotate`` applies a random rotation. Every cloud is
    rescaled to maximum radius 1 before jitter. ``torus_minor`` is the
    tube radius of the torus class (default 0.1).
    """
    classes = tuple(classes)
    unknown = set(classes) - set(CLASSES)
    if unknown:
        raise InvalidParameterError(f"unknown classes {sorted(unknown)}; choose from {CLASSES}")
    if points_per_cloud < 64:
        raise InvalidParameterError("points_per_cloud must be at least 64")
    if noise < 0:
        raise InvalidParameterError("noise must be non-negative")
    if not 0.0 <= deform < 1.0:
        raise InvalidParameterError("deform must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    clouds = []
    for _ in range(clouds_per_class):
        for label, name in enumerate(classes):
            if name == "torus":
                pts = sample_torus(points_per_cloud, rng, torus_minor)
            else:
                pts = _SAMPLERS[name](points_per_cloud, rng)
            if deform > 0:
                pts = pts * rng.uniform(1.0 - deform, 1.0, size=3)
            pts /= np.linalg.norm(pts, axis=1).max()
            if rotate:
                pts = pts @ Rotation.random(random_state=rng).as_matrix().T
            if noise > 0:
                pts = pts + noise * rng.standard_normal(pts.shape)
            clouds.append(PointCloud(pts, label=label))
    return Dataset(tuple(clouds), classes)
