"""Spectral graph wavelets: kernel banks, exact and Chebyshev operators, frame synthesis.

Kernel index 0 is the low-pass scaling function; indices 1..S are the
band-pass kernels ordered from lowest to highest frequency.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.integrate import trapezoid
from scipy.sparse.linalg import LinearOperator, cg

from .errors import ConditioningError, DataError, InvalidParameterError, UnsupportedModeError
from .pcgeom import LaplacianPair
from .spectral import SpectralBasis

FAMILIES = ("mexican-hat", "meyer")
COND_LIMIT = 1e10
QUADRATURE_POINTS = 2048


def mexican_hat(x):
    """Band-pass prototype x * exp(1 - x); g(0) = 0, peak value 1 at x = 1."""
    x = np.asarray(x, dtype=np.float64)
    return x * np.exp(1.0 - x)


def meyer_nu(x):
    """Meyer auxiliary polynomial, clipped to [0, 1] outside the unit interval."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return x ** 4 * (35.0 - 84.0 * x + 70.0 * x ** 2 - 20.0 * x ** 3)


def _meyer_lowpass(lam, a, b):
    """1 below a, 0 above b, cos(pi/2 nu) transition in between."""
    return np.cos(0.5 * np.pi * meyer_nu((np.asarray(lam, dtype=np.float64) - a) / (b - a)))


@dataclass(frozen=True)
class KernelBank:
    family: str
    scales: np.ndarray
    centers: np.ndarray
    lambda_max: float
    is_tight: bool
    scaling_fn: Callable = field(repr=False)
    band_fns: tuple = field(repr=False)

    @property
    def scale_count(self) -> int:
        return len(self.band_fns)

    def evaluate(self, lam) -> np.ndarray:
        """Kernel responses on ``lam``: row 0 is phi, rows 1..S the band-pass kernels."""
        lam = np.asarray(lam, dtype=np.float64)
        return np.stack([self.scaling_fn(lam)] + [g(lam) for g in self.band_fns])

    def tightness_defect(self, points: int = 1000) -> float:
        lam = np.linspace(0.0, self.lambda_max, points)
        return float(np.abs((self.evaluate(lam) ** 2).sum(axis=0) - 1.0).max())

    def high_band_indices(self) -> np.ndarray:
        """1-based band indices S/2..S used by the saliency score."""
        s = self.scale_count
        return np.arange(s // 2, s + 1)


def custom_bank(scaling_fn, band_fns: Sequence[Callable], lambda_max: float, family: str = "custom") -> KernelBank:
    """Bank from arbitrary vectorized kernels (diagnostics and tests)."""
    lam = np.linspace(0.0, lambda_max, 1000)
    resp = np.stack([g(lam) for g in band_fns]) if band_fns else np.zeros((0, lam.size))
    centers = lam[np.argmax(resp, axis=1)] if len(band_fns) else np.zeros(0)
    with np.errstate(divide="ignore"):
        scales = np.where(centers > 0, 1.0 / np.where(centers > 0, centers, 1.0), np.inf)
    bank = KernelBank(family, scales, centers, float(lambda_max), False, scaling_fn, tuple(band_fns))
    tight = bank.tightness_defect() < 1e-6
    return KernelBank(family, scales, centers, float(lambda_max), tight, scaling_fn, tuple(band_fns))


def design_kernel_bank(family: str = "mexican-hat", scale_count: int = 4, lambda_max: float = 2.0) -> KernelBank:
    """Build a wavelet kernel bank on [0, lambda_max].

    mexican-hat: g(s_j * lam) with s_j = 1 / center_j, centers log-spaced in
    (lambda_max/40, 0.95 lambda_max], and phi(lam) = exp(-(lam / 0.4 lambda_max)^4).
    Not a tight frame.

    meyer: dyadic Meyer partition of unity, phi^2 + sum g_j^2 == 1 exactly.
    """
    if scale_count < 2 or scale_count % 2:
        raise InvalidParameterError(f"scale_count must be even and >= 2, got {scale_count}")
    if lambda_max <= 0:
        raise InvalidParameterError("lambda_max must be positive")
    lmax = float(lambda_max)
    if family == "mexican-hat":
        centers = lmax * np.geomspace(1.0 / 40.0, 0.95, scale_count + 1)[1:]
        scales = 1.0 / centers
        bands = tuple((lambda s: (lambda lam: mexican_hat(s * np.asarray(lam, dtype=np.float64))))(s) for s in scales)
        width = 0.4 * lmax

        def phi(lam):
            return np.exp(-(np.asarray(lam, dtype=np.float64) / width) ** 4)

        return KernelBank(family, scales, centers, lmax, False, phi, bands)
    if family == "meyer":
        # transition j occupies [a_j, 2 a_j]; the last one ends at 0.95 lambda_max
        starts = 0.95 * lmax * 2.0 ** (np.arange(scale_count) - scale_count)
        lows = [(lambda a: (lambda lam: _meyer_lowpass(lam, a, 2.0 * a)))(a) for a in starts]

        def band(j):
            if j < scale_count - 1:
                return lambda lam: np.sqrt(np.clip(lows[j + 1](lam) ** 2 - lows[j](lam) ** 2, 0.0, None))
            return lambda lam: np.sqrt(np.clip(1.0 - lows[j](lam) ** 2, 0.0, None))

        bands = tuple(band(j) for j in range(scale_count))
        centers = np.append(starts[1:], 2.0 * starts[-1])
        return KernelBank(family, 1.0 / centers, centers, lmax, True, lows[0], bands)
    raise InvalidParameterError(f"unknown kernel family {family!r}; expected one of {FAMILIES}")


def chebyshev_coefficients(fn: Callable, lambda_max: float, order: int, points: int = QUADRATURE_POINTS) -> np.ndarray:
    """c_z = 2/pi * int_0^pi cos(z theta) fn(lambda_max (cos theta + 1) / 2) dtheta, z = 0..order."""
    theta = np.linspace(0.0, np.pi, points)
    values = fn(lambda_max * (np.cos(theta) + 1.0) / 2.0)
    z = np.arange(order + 1)[:, None]
    return (2.0 / np.pi) * trapezoid(np.cos(z * theta[None, :]) * values[None, :], theta, axis=1)


def chebyshev_eval(coeffs: np.ndarray, lam, lambda_max: float) -> np.ndarray:
    """Scalar evaluation of 1/2 c_0 + sum_z c_z T_z(2 lam / lambda_max - 1)."""
    x = 2.0 * np.asarray(lam, dtype=np.float64) / lambda_max - 1.0
    c = np.array(coeffs, dtype=np.float64)
    c[0] *= 0.5
    return np.polynomial.chebyshev.chebval(x, c)


@dataclass(frozen=True)
class WaveletCoefficients:
    scaling: np.ndarray
    bands: tuple

    @property
    def scale_count(self) -> int:
        return len(self.bands)

    def stack(self) -> np.ndarray:
        return np.stack((self.scaling,) + tuple(self.bands))

    @classmethod
    def from_stack(cls, stacked: np.ndarray) -> "WaveletCoefficients":
        return cls(stacked[0], tuple(stacked[1:]))

    def replace_band(self, band: int, values: np.ndarray) -> "WaveletCoefficients":
        bands = list(self.bands)
        bands[band - 1] = values
        return WaveletCoefficients(self.scaling, tuple(bands))


class WaveletOperators:
    """Analysis operators T_phi, T_1..T_S and the matching synthesis map.

    Exact mode stores dense N x N matrices. Chebyshev mode keeps only the
    sparse normalized Laplacian and a coefficient table, applying every kernel
    through the three-term recursion.
    """

    def __init__(self, bank: KernelBank, mode: str, n: int, *, matrices=None, laplacian=None,
                 coefficients=None, order=None, lambda_max=None, cg_tol: float = 1e-12):
        self.bank = bank
        self.mode = mode
        self.n = n
        self.matrices = matrices
        self.laplacian = laplacian
        self.coefficients = coefficients
        self.order = order
        self.lambda_max = bank.lambda_max if lambda_max is None else lambda_max
        self.cg_tol = cg_tol
        self._gram_inv = None
        self._gram_eigs = None

    @property
    def scale_count(self) -> int:
        return self.bank.scale_count

    @property
    def is_tight(self) -> bool:
        return self.bank.is_tight

    # -- analysis ------------------------------------------------------

    def _chebyshev_terms(self, x: np.ndarray):
        """Yield T_z(L_hat) x for z = 0..order."""
        lap = self.laplacian
        scale = 2.0 / self.lambda_max
        t_prev = x
        yield t_prev
        if self.order == 0:
            return
        t_cur = scale * (lap @ x) - x
        yield t_cur
        for _ in range(2, self.order + 1):
            t_next = 2.0 * (scale * (lap @ t_cur) - t_cur) - t_prev
            yield t_next
            t_prev, t_cur = t_cur, t_next

    def analysis(self, signal: np.ndarray) -> np.ndarray:
        """Stacked kernel outputs, shape (S+1, N, columns)."""
        h = self._check(signal)
        if self.mode == "exact":
            return np.einsum("kij,jc->kic", self.matrices, h)
        out = np.zeros((self.scale_count + 1,) + h.shape)
        c = self.coefficients
        for z, tz in enumerate(self._chebyshev_terms(h)):
            weight = c[:, z] * (0.5 if z == 0 else 1.0)
            out += weight[:, None, None] * tz[None]
        return out

    def adjoint(self, stacked: np.ndarray) -> np.ndarray:
        """W^T c = sum_k T_k c_k (every T_k is symmetric)."""
        stacked = np.asarray(stacked, dtype=np.float64)
        if stacked.shape[0] != self.scale_count + 1 or stacked.shape[1] != self.n:
            raise DataError(f"coefficient stack has shape {stacked.shape}, expected ({self.scale_count + 1}, {self.n}, ...)")
        if self.mode == "exact":
            return np.einsum("kij,kjc->ic", self.matrices, stacked)
        k, n, cols = stacked.shape
        wide = np.transpose(stacked, (1, 0, 2)).reshape(n, k * cols)
        out = np.zeros((n, cols))
        c = self.coefficients
        for z, tz in enumerate(self._chebyshev_terms(wide)):
            weight = c[:, z] * (0.5 if z == 0 else 1.0)
            out += (tz.reshape(n, k, cols) * weight[None, :, None]).sum(axis=1)
        return out

    def apply_kernel(self, index: int, signal: np.ndarray) -> np.ndarray:
        h = self._check(signal)
        if self.mode == "exact":
            return self.matrices[index] @ h
        return self.analysis(h)[index]

    # -- synthesis -----------------------------------------------------

    def gram(self, x: np.ndarray) -> np.ndarray:
        return self.adjoint(self.analysis(x))

    def _exact_gram_factor(self):
        if self._gram_inv is None:
            g = np.einsum("kij,kjl->il", self.matrices, self.matrices)
            g = 0.5 * (g + g.T)
            w, v = np.linalg.eigh(g)
            self._gram_eigs = w
            if w[0] <= 0 or w[-1] / w[0] > COND_LIMIT:
                cond = np.inf if w[0] <= 0 else w[-1] / w[0]
                raise ConditioningError(f"stacked wavelet operator is ill-conditioned (cond {cond:.3g})")
            self._gram_inv = (v / w) @ v.T
        return self._gram_inv

    def gram_solve(self, rhs: np.ndarray) -> np.ndarray:
        """(W^T W)^-1 rhs, by cached factorization (exact) or conjugate gradients (chebyshev)."""
        rhs = self._check(rhs)
        if self.mode == "exact":
            return self._exact_gram_factor() @ rhs
        op = LinearOperator((self.n, self.n), matvec=lambda v: self.gram(v.reshape(-1, 1)).ravel(), dtype=np.float64)
        out = np.empty_like(rhs)
        for col in range(rhs.shape[1]):
            b = rhs[:, col]
            if not np.any(b):
                out[:, col] = 0.0
                continue
            sol, info = cg(op, b, rtol=self.cg_tol, atol=0.0, maxiter=10 * self.n)
            if info != 0:
                raise ConditioningError(f"conjugate gradients did not converge (info={info})")
            out[:, col] = sol
        return out

    def synthesis(self, stacked: np.ndarray) -> np.ndarray:
        """Reconstruct a signal: adjoint for tight banks, W^+ c otherwise."""
        back = self.adjoint(stacked)
        if self.is_tight:
            return back
        return self.gram_solve(back)

    def synthesis_adjoint(self, grad: np.ndarray) -> np.ndarray:
        """Transpose of ``synthesis``: maps dL/dh to dL/dc, shape (S+1, N, columns)."""
        g = self._check(grad)
        if not self.is_tight:
            g = self.gram_solve(g)
        return self.analysis(g)

    def _check(self, signal) -> np.ndarray:
        h = np.asarray(signal, dtype=np.float64)
        if h.ndim == 1:
            h = h[:, None]
        if h.shape[0] != self.n:
            raise DataError(f"signal has {h.shape[0]} rows, operators act on {self.n} nodes")
        return h


def build_operators_exact(bank: KernelBank, basis: SpectralBasis, cap: Optional[int] = None) -> WaveletOperators:
    """Dense T_k = U k(Lambda) U^T; non-tight banks get their pseudo-inverse factorized eagerly."""
    from .spectral import DENSE_CAP

    if basis.n > (cap or DENSE_CAP):
        raise InvalidParameterError(f"N={basis.n} exceeds the dense cap; use chebyshev operators")
    u = basis.eigenvectors
    resp = bank.evaluate(basis.eigenvalues)
    mats = np.einsum("ik,sk,jk->sij", u, resp, u)
    mats = 0.5 * (mats + np.transpose(mats, (0, 2, 1)))
    ops = WaveletOperators(bank, "exact", basis.n, matrices=mats)
    if not bank.is_tight:
        ops._exact_gram_factor()
    return ops


def build_operators_chebyshev(bank: KernelBank, lap: LaplacianPair, order: int = 40) -> WaveletOperators:
    """Chebyshev-approximated operators of order Z on the normalized Laplacian."""
    if order < 1:
        raise InvalidParameterError("Chebyshev order must be >= 1")
    lmax = bank.lambda_max
    fns = [bank.scaling_fn] + list(bank.band_fns)
    coeffs = np.stack([chebyshev_coefficients(f, lmax, order) for f in fns])
    return WaveletOperators(
        bank, "chebyshev", lap.n,
        laplacian=sp.csr_matrix(lap.normalized, dtype=np.float64),
        coefficients=coeffs, order=order, lambda_max=lmax,
    )


def gwt(ops: WaveletOperators, signal: np.ndarray) -> WaveletCoefficients:
    """Scaling coefficients T_phi h and wavelet coefficients T_s h per axis."""
    return WaveletCoefficients.from_stack(ops.analysis(signal))


def igwt(ops: WaveletOperators, coeffs: WaveletCoefficients) -> np.ndarray:
    return ops.synthesis(coeffs.stack())


def frame_bounds(ops: WaveletOperators) -> tuple[float, float]:
    """Extreme eigenvalues of W^T W (exact mode only)."""
    if ops.mode != "exact":
        raise UnsupportedModeError("frame bounds need exact operators")
    g = np.einsum("kij,kjl->il", ops.matrices, ops.matrices)
    w = np.linalg.eigvalsh(0.5 * (g + g.T))
    return float(w[0]), float(w[-1])


def operator_relative_error(approx: WaveletOperators, exact: WaveletOperators, signals: np.ndarray) -> float:
    """||W_approx h - W_exact h||_F / ||W_exact h||_F over a batch of signal columns."""
    a = approx.analysis(signals)
    e = exact.analysis(signals)
    return float(np.linalg.norm(a - e) / np.linalg.norm(e))


def write_coefficients_csv(coeffs: WaveletCoefficients, ids, path) -> None:
    """Long-format export: point_id, axis, scale (0 = scaling function), value."""
    stacked = coeffs.stack()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["point_id", "axis", "scale", "value"])
        for scale in range(stacked.shape[0]):
            for row, pid in enumerate(ids):
                for axis in range(stacked.shape[2]):
                    w.writerow([int(pid), "xyz"[axis] if stacked.shape[2] == 3 else axis, scale, repr(float(stacked[scale, row, axis]))])
