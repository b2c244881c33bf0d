"""Hybrid spectral-spatial saliency and risk partitioning."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError
from .pcgeom import KnnGraph, PointCloud

KERNEL_MODES = ("auto", "exact", "chebyshev")


@dataclass(frozen=True)
class PurificationConfig:
    k: int = 20
    alpha: float = 0.002
    beta: float = 1.0
    gamma: float = 0.0
    drop_rate: float = 0.01
    filter_rate: float = 0.10
    scale_count: int = 4
    chebyshev_order: int = 40
    kernel: str = "mexican-hat"
    operators: str = "auto"
    exact_cap: int = 1024
    layer: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidParameterError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 <= self.drop_rate <= self.filter_rate <= 1.0:
            raise InvalidParameterError("need 0 <= drop_rate <= filter_rate <= 1")
        if self.alpha < 0 or self.beta < 0:
            raise InvalidParameterError("alpha and beta must be >= 0")
        if self.k < 1:
            raise InvalidParameterError("k must be >= 1")
        if self.scale_count < 2 or self.scale_count % 2:
            raise InvalidParameterError("scale_count must be even and >= 2")
        if self.operators not in KERNEL_MODES:
            raise InvalidParameterError(f"operators must be one of {KERNEL_MODES}")


@dataclass(frozen=True)
class SaliencyReport:
    ids: np.ndarray
    spectral_score: np.ndarray
    lss: np.ndarray
    hybrid: np.ndarray
    best_band: np.ndarray
    d_bar: float
    band_norms: np.ndarray

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["point_id", "spectral_score", "lss", "hybrid", "best_band"])
            for row in zip(self.ids, self.spectral_score, self.lss, self.hybrid, self.best_band):
                w.writerow([int(row[0]), repr(float(row[1])), repr(float(row[2])), repr(float(row[3])), int(row[4])])


@dataclass(frozen=True)
class RiskPartition:
    high_risk: np.ndarray
    mid_risk: np.ndarray
    drop_rate: float
    filter_rate: float


def mean_neighbor_distances(points: np.ndarray, graph: KnnGraph) -> np.ndarray:
    """d_i: mean Euclidean distance to graph neighbours (divisor = actual degree)."""
    adj = graph.adjacency.tocoo()
    dist = np.linalg.norm(points[adj.row] - points[adj.col], axis=1)
    sums = np.bincount(adj.row, weights=dist, minlength=graph.n)
    return sums / np.maximum(graph.degrees, 1)


def local_sparsity_scores(cloud: PointCloud, graph: KnnGraph) -> tuple[np.ndarray, float]:
    """S_LSS(p_i) = (d_i - d_bar)^2 and the global mean d_bar."""
    d = mean_neighbor_distances(cloud.points, graph)
    d_bar = float(d.mean())
    return (d - d_bar) ** 2, d_bar


def hybrid_saliency(band_gradients, lss: np.ndarray, beta: float = 1.0, ids=None, d_bar: float = float("nan")) -> SaliencyReport:
    """Sum of high-band wavelet-gradient norms plus beta * LSS.

    ``band_gradients`` holds dL/dpsi_s for s = 1..S (each N x 3). The high
    bands are S/2..S (1-based); the per-point norm is taken over the three axes.
    best_band is the 1-based high band of largest gradient norm, ties going
    to the higher band.
    """
    grads = np.asarray(band_gradients, dtype=np.float64)
    s = grads.shape[0]
    if s < 2 or s % 2:
        raise InvalidParameterError(f"need an even number of scales, got {s}")
    high = np.arange(s // 2, s + 1)
    norms = np.linalg.norm(grads[high - 1], axis=2)  # (len(high), N)
    spectral = norms.sum(axis=0)
    lss = np.asarray(lss, dtype=np.float64)
    # reverse so argmax's first-hit rule favours the higher band
    best = high[::-1][np.argmax(norms[::-1], axis=0)]
    n = grads.shape[1]
    ids = np.arange(n) if ids is None else np.asarray(ids)
    return SaliencyReport(
        ids=ids,
        spectral_score=spectral,
        lss=lss,
        hybrid=spectral + beta * lss,
        best_band=best,
        d_bar=d_bar,
        band_norms=np.linalg.norm(grads, axis=2),
    )


def _count(rate: float, n: int) -> int:
    # guard against 0.07 * 100 = 7.000000000000001
    return min(n, math.ceil(rate * n - 1e-9))


def rank_order(report: SaliencyReport) -> np.ndarray:
    """Row positions sorted by descending hybrid score, ties by ascending id."""
    return np.lexsort((report.ids, -report.hybrid))


def partition(report: SaliencyReport, drop_rate: float = 0.01, filter_rate: float = 0.10) -> RiskPartition:
    if not 0.0 <= drop_rate <= filter_rate <= 1.0:
        raise InvalidParameterError("need 0 <= drop_rate <= filter_rate <= 1")
    n = len(report.hybrid)
    order = rank_order(report)
    n_high = _count(drop_rate, n)
    n_total = max(n_high, _count(filter_rate, n))
    return RiskPartition(
        high_risk=report.ids[order[:n_high]].copy(),
        mid_risk=report.ids[order[n_high:n_total]].copy(),
        drop_rate=drop_rate,
        filter_rate=filter_rate,
    )
