"""Hierarchical wavelet purification and the classic removal baselines."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError, GraphError, InvalidParameterError
from .gwavelets import (
    WaveletCoefficients,
    WaveletOperators,
    build_operators_chebyshev,
    build_operators_exact,
    design_kernel_bank,
    gwt,
    igwt,
)
from .oracle import ExternalOracle, OracleConfig, evaluate, project_gradient_to_wavelets
from .pcgeom import KnnGraph, LaplacianPair, PointCloud, build_knn_graph, build_laplacians
from .saliency import (
    PurificationConfig,
    RiskPartition,
    SaliencyReport,
    hybrid_saliency,
    local_sparsity_scores,
    partition,
)
from .spectral import eigendecompose, gft_lowpass


@dataclass(frozen=True)
class PurificationResult:
    purified: PointCloud
    intermediate: PointCloud
    partition: RiskPartition
    modified_coefficients: list
    report: SaliencyReport
    coefficients: WaveletCoefficients = field(repr=False)
    modified: WaveletCoefficients = field(repr=False)
    timings: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class Transform:
    graph: KnnGraph
    laplacians: LaplacianPair
    operators: WaveletOperators


def build_transform(cloud: PointCloud, config: PurificationConfig = PurificationConfig()) -> Transform:
    """K-NN graph, Laplacians and wavelet operators for one cloud."""
    graph = build_knn_graph(cloud, config.k)
    if not graph.is_connected():
        raise GraphError("the K-NN graph is disconnected; spectral purification needs a connected graph")
    lap = build_laplacians(graph)
    bank = design_kernel_bank(config.kernel, config.scale_count, lap.lambda_max_estimate)
    mode = config.operators
    if mode == "auto":
        mode = "exact" if cloud.n <= config.exact_cap else "chebyshev"
    if mode == "exact":
        ops = build_operators_exact(bank, eigendecompose(lap))
    else:
        ops = build_operators_chebyshev(bank, lap, config.chebyshev_order)
    return Transform(graph, lap, ops)


def attenuate(coeffs: WaveletCoefficients, rows: np.ndarray, bands: np.ndarray, gamma: float) -> WaveletCoefficients:
    """Scale psi_{band, row} by gamma on all three axes, one band per row."""
    stacked = coeffs.stack().copy()
    stacked[bands, rows] *= gamma
    return WaveletCoefficients.from_stack(stacked)


def pwavep(cloud: PointCloud, model, config: PurificationConfig = PurificationConfig(),
           oracle_config: Optional[OracleConfig] = None, transform: Optional[Transform] = None) -> PurificationResult:
    """Purify one (possibly attacked) cloud.

    Graph and operators are built once on the input and reused for the
    reconstruction; high-risk points are deleted after reconstruction, so
    surviving ids are never renumbered.
    """
    if cloud.n <= config.k:
        raise InvalidParameterError(f"cloud has {cloud.n} points, need more than k={config.k}")
    t0 = time.perf_counter()
    timings = {}
    tf = transform or build_transform(cloud, config)
    ops = tf.operators
    timings["transform"] = time.perf_counter() - t0

    coeffs = gwt(ops, cloud.points)
    if oracle_config is None:
        mode = "external" if isinstance(model, ExternalOracle) else "analytic"
        oracle_config = OracleConfig(alpha=config.alpha, mode=mode, layer=config.layer)
    t1 = time.perf_counter()
    out = evaluate(model, cloud, oracle_config)
    band_grads = project_gradient_to_wavelets(out.coord_gradient, ops)
    timings["oracle"] = time.perf_counter() - t1

    lss, d_bar = local_sparsity_scores(cloud, tf.graph)
    report = hybrid_saliency(band_grads, lss, config.beta, cloud.ids, d_bar)
    risk = partition(report, config.drop_rate, config.filter_rate)

    rows = cloud.index_of(risk.mid_risk)
    bands = report.best_band[rows]
    modified = attenuate(coeffs, rows, bands, config.gamma)
    changes = [
        (int(pid), int(band), tuple(map(float, coeffs.bands[band - 1][row])),
         tuple(map(float, modified.bands[band - 1][row])))
        for pid, row, band in zip(risk.mid_risk, rows, bands)
    ]
    t2 = time.perf_counter()
    intermediate = cloud.with_points(igwt(ops, modified))
    purified = intermediate.remove_ids(risk.high_risk)
    timings["reconstruct"] = time.perf_counter() - t2
    timings["total"] = time.perf_counter() - t0
    return PurificationResult(purified, intermediate, risk, changes, report, coeffs, modified, timings)


def sor(cloud: PointCloud, k: int = 20, sigma_mult: float = 1.1) -> PointCloud:
    """Statistical outlier removal: drop points whose mean k-NN distance exceeds mean + sigma_mult * std."""
    if k >= cloud.n:
        raise InvalidParameterError(f"k must be < N (k={k}, N={cloud.n})")
    dist, _ = cKDTree(cloud.points).query(cloud.points, k=k + 1)
    d = dist[:, 1:].mean(axis=1)
    keep = d <= d.mean() + sigma_mult * d.std()
    return cloud.select(keep)


def ror(cloud: PointCloud, radius: float, min_neighbors: int = 2) -> PointCloud:
    """Radius outlier removal: drop points with fewer than ``min_neighbors`` others within ``radius``."""
    if radius <= 0:
        raise InvalidParameterError("radius must be positive")
    if min_neighbors <= 0:
        return cloud
    tree = cKDTree(cloud.points)
    counts = np.array([len(n) - 1 for n in tree.query_ball_point(cloud.points, r=radius)])
    keep = counts >= min_neighbors
    if not keep.any():
        raise DataError(f"radius outlier removal (radius {radius}, min_neighbors {min_neighbors}) removed every point")
    return cloud.select(keep)


def pfourierp(cloud: PointCloud, k: int = 20, cutoff: float = 0.67) -> PointCloud:
    """Hard GFT low-pass on the cloud's own K-NN graph."""
    graph = build_knn_graph(cloud, k)
    return gft_lowpass(cloud, eigendecompose(build_laplacians(graph)), cutoff)
