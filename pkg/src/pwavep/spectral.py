"""Exact graph Fourier analysis on K-NN graphs.

All operations default to the normalized Laplacian, whose spectrum lies in
[0, 2]; the combinatorial Laplacian is kept for the smoothness identity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import CapacityError, DataError, InvalidParameterError
from .pcgeom import LaplacianPair, PointCloud

DENSE_CAP = 4096


@dataclass(frozen=True)
class SpectralBasis:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    which: str = "normalized"

    @property
    def n(self) -> int:
        return self.eigenvalues.shape[0]

    def gft(self, signal: np.ndarray) -> np.ndarray:
        return self.eigenvectors.T @ signal

    def igft(self, coeffs: np.ndarray) -> np.ndarray:
        return self.eigenvectors @ coeffs

    def filter(self, response: np.ndarray, signal: np.ndarray) -> np.ndarray:
        """Apply U diag(response) U^T to every column of ``signal``."""
        u = self.eigenvectors
        return u @ (response[:, None] * (u.T @ signal))


@dataclass(frozen=True)
class BandPerturbation:
    band_index: int
    band_count: int
    energy: float
    delta: np.ndarray
    delta_hat: np.ndarray
    band_rows: np.ndarray


def _laplacian(lap: LaplacianPair, which: str):
    if which == "normalized":
        return lap.normalized
    if which == "combinatorial":
        return lap.combinatorial
    raise InvalidParameterError(f"which must be 'normalized' or 'combinatorial', got {which!r}")


def eigendecompose(lap: LaplacianPair, which: str = "normalized", cap: int = DENSE_CAP) -> SpectralBasis:
    """Full dense eigendecomposition, eigenvalues ascending."""
    if lap.n > cap:
        raise CapacityError(
            f"N={lap.n} exceeds the dense eigensolver cap ({cap}); use the Chebyshev operators instead"
        )
    mat = _laplacian(lap, which).toarray().astype(np.float64)
    lam, u = np.linalg.eigh(mat)
    # Fix the sign of every eigenvector (largest-magnitude entry positive) for reproducibility.
    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivot, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    u = u * signs
    lam = np.clip(lam, 0.0, None) if which == "combinatorial" else np.clip(lam, 0.0, 2.0)
    return SpectralBasis(eigenvalues=lam, eigenvectors=u, which=which)


def _as_signal(signal, n: int) -> np.ndarray:
    h = np.asarray(signal, dtype=np.float64)
    if h.ndim == 1:
        h = h[:, None]
    if h.shape[0] != n:
        raise DataError(f"signal has {h.shape[0]} rows but the graph has {n} nodes")
    return h


def smoothness_edges(adjacency, signal) -> np.ndarray:
    """sum over undirected edges of A_ij (h_i - h_j)^2, one value per column."""
    h = _as_signal(signal, adjacency.shape[0])
    upper = sp.triu(adjacency, k=1).tocoo()
    d = h[upper.row] - h[upper.col]
    return (upper.data[:, None] * d * d).sum(axis=0)


def smoothness(lap: LaplacianPair, signal, basis: SpectralBasis | None = None, check: bool = True) -> np.ndarray:
    """Dirichlet energy h^T L h of each signal column (combinatorial L).

    Computed as an edge-difference sum; when ``basis`` (of the combinatorial
    Laplacian) is supplied, also as sum_k lambda_k hhat_k^2, and the two are
    required to agree.
    """
    h = _as_signal(signal, lap.n)
    edge_form = smoothness_edges(-sp.triu(lap.combinatorial, k=1), h)
    if basis is None:
        return edge_form
    if basis.which != "combinatorial":
        raise InvalidParameterError("smoothness needs a basis of the combinatorial Laplacian")
    spec_form = (basis.eigenvalues[:, None] * basis.gft(h) ** 2).sum(axis=0)
    if check:
        scale = max(1.0, float(np.abs(edge_form).max()))
        if np.abs(edge_form - spec_form).max() > 1e-8 * scale:
            raise ArithmeticError(f"smoothness forms disagree: {edge_form} vs {spec_form}")
    return edge_form


def lowpass_response(eigenvalues: np.ndarray, cutoff: float) -> np.ndarray:
    return (eigenvalues <= cutoff).astype(np.float64)


def gft_lowpass(cloud: PointCloud, basis: SpectralBasis, cutoff: float = 0.67) -> PointCloud:
    """Hard low-pass: keep Fourier modes with eigenvalue <= cutoff."""
    if not 0.0 <= cutoff <= 2.0:
        raise InvalidParameterError(f"cutoff must lie in [0, 2], got {cutoff}")
    h = _as_signal(cloud.points, basis.n)
    return cloud.with_points(basis.filter(lowpass_response(basis.eigenvalues, cutoff), h))


BAND_SPACINGS = ("eigenvalue", "index")


def band_rows(eigenvalues: np.ndarray, band_index: int, band_count: int, spacing: str = "eigenvalue") -> np.ndarray:
    """Eigen-indices belonging to one band; the DC mode (index 0) is never included.

    ``eigenvalue`` spacing cuts [lambda_2, lambda_N] into equal-width
    intervals; ``index`` spacing splits the non-DC indices into equal counts.
    """
    n = len(eigenvalues)
    if band_count < 1 or not 1 <= band_index <= band_count:
        raise InvalidParameterError(f"band_index must be in 1..{band_count}, got {band_index}")
    if band_count > n - 1:
        raise InvalidParameterError(f"{band_count} bands over {n - 1} non-DC modes leaves empty bands")
    if spacing == "index":
        return np.array_split(np.arange(1, n), band_count)[band_index - 1]
    if spacing != "eigenvalue":
        raise InvalidParameterError(f"spacing must be one of {BAND_SPACINGS}, got {spacing!r}")
    lam = np.asarray(eigenvalues)[1:]
    edges = np.linspace(lam[0], lam[-1], band_count + 1)
    which = np.clip(np.searchsorted(edges, lam, side="right") - 1, 0, band_count - 1)
    rows = 1 + np.flatnonzero(which == band_index - 1)
    if len(rows) == 0:
        raise InvalidParameterError(f"band {band_index}/{band_count} contains no eigenvalues")
    return rows


def inject_band_perturbation(
    cloud: PointCloud,
    basis: SpectralBasis,
    band_index: int,
    band_count: int = 10,
    energy: float = 2.0,
    seed: int = 0,
    spacing: str = "eigenvalue",
) -> tuple[PointCloud, BandPerturbation]:
    """Add a perturbation of Frobenius norm ``energy`` supported on a single spectral band.

    Spectral coefficients on the band are i.i.d. Gaussian, then rescaled.
    """
    if energy < 0:
        raise InvalidParameterError("energy must be non-negative")
    n = basis.n
    rows = band_rows(basis.eigenvalues, band_index, band_count, spacing)
    rng = np.random.default_rng(seed)
    delta_hat = np.zeros((n, 3))
    block = rng.standard_normal((len(rows), 3))
    norm = np.linalg.norm(block)
    if energy > 0 and norm > 0:
        delta_hat[rows] = block * (energy / norm)
    delta = basis.igft(delta_hat)
    pert = BandPerturbation(
        band_index=band_index,
        band_count=band_count,
        energy=float(energy),
        delta=delta,
        delta_hat=delta_hat,
        band_rows=rows,
    )
    return cloud.with_points(cloud.points + delta), pert
