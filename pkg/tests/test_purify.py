import sys

import numpy as np
import pytest

from pwavep.errors import GraphError, InvalidParameterError
from pwavep.gwavelets import gwt, igwt
from pwavep.oracle import ExternalOracle, ToyClassifier
from pwavep.pcgeom import PointCloud, build_knn_graph, build_laplacians
from pwavep.purify import attenuate, build_transform, pfourierp, pwavep, ror, sor
from pwavep.saliency import PurificationConfig
from pwavep.spectral import eigendecompose, gft_lowpass


def sphere(n=120, seed=0):
    v = np.random.default_rng(seed).standard_normal((n, 3))
    return PointCloud(v / np.linalg.norm(v, axis=1, keepdims=True), ids=np.arange(1000, 1000 + n))


def model():
    return ToyClassifier.initialize(4, (16, 16), "tanh", seed=0)


CFG = PurificationConfig(k=10)


def test_pipeline_invariants():
    cloud = sphere()
    res = pwavep(cloud, model(), CFG)
    assert len(res.partition.high_risk) == 2 and len(res.partition.mid_risk) == 10
    assert res.purified.n == cloud.n - len(res.partition.high_risk)
    assert set(res.purified.ids) <= set(cloud.ids)
    assert not set(res.purified.ids) & set(res.partition.high_risk)
    assert [m[0] for m in res.modified_coefficients] == res.partition.mid_risk.tolist()
    assert np.array_equal(res.intermediate.ids, cloud.ids)
    # survivors keep the reconstructed coordinates of their own id
    rows = res.intermediate.index_of(res.purified.ids)
    assert np.array_equal(res.purified.points, res.intermediate.points[rows])


def test_zero_rates_are_near_identity():
    cloud = sphere()
    res = pwavep(cloud, model(), PurificationConfig(k=10, drop_rate=0.0, filter_rate=0.0))
    assert res.modified_coefficients == []
    ops = build_transform(cloud, CFG).operators
    assert np.allclose(res.purified.points, igwt(ops, gwt(ops, cloud.points)), atol=1e-12)
    assert np.allclose(res.purified.points, cloud.points, atol=1e-8)


def test_gamma_zero_zeroes_single_target():
    cloud = sphere()
    res = pwavep(cloud, model(), PurificationConfig(k=10, drop_rate=0.0, filter_rate=1 / 120))
    assert len(res.modified_coefficients) == 1
    pid, band, old, new = res.modified_coefficients[0]
    row = cloud.index_of([pid])[0]
    assert new == (0.0, 0.0, 0.0) and any(old)
    assert np.all(res.modified.bands[band - 1][row] == 0.0)
    changed = res.modified.stack() != res.coefficients.stack()
    assert changed.sum() == 3


def test_single_coefficient_change_is_linear():
    cloud = sphere()
    res = pwavep(cloud, model(), PurificationConfig(k=10, drop_rate=0.0, filter_rate=1 / 120))
    ops = build_transform(cloud, CFG).operators
    delta = res.modified.stack() - res.coefficients.stack()
    expected = igwt(ops, res.coefficients) + ops.synthesis(delta)
    assert np.allclose(res.intermediate.points, expected, atol=1e-8)


def test_attenuation_is_monotone_in_gamma():
    cloud = sphere()
    ops = build_transform(cloud, CFG).operators
    coeffs = gwt(ops, cloud.points)
    rows, bands = np.array([3, 7, 11]), np.array([2, 4, 3])
    prev = None
    for gamma in (0.0, 0.25, 0.5, 0.75, 0.9):
        cur = np.abs(attenuate(coeffs, rows, bands, gamma).stack()[bands, rows])
        if prev is not None:
            assert np.all(prev <= cur)
        prev = cur
    assert np.allclose(prev, 0.9 * np.abs(coeffs.stack()[bands, rows]))


def test_deterministic():
    cloud = sphere()
    a = pwavep(cloud, model(), CFG)
    b = pwavep(cloud, model(), CFG)
    assert np.array_equal(a.purified.points, b.purified.points)
    assert np.array_equal(a.purified.ids, b.purified.ids)


def test_chebyshev_operators_close_to_exact():
    cloud = sphere()
    exact = pwavep(cloud, model(), PurificationConfig(k=10, operators="exact"))
    cheb = pwavep(cloud, model(), PurificationConfig(k=10, operators="chebyshev", chebyshev_order=50))
    assert np.array_equal(np.sort(exact.purified.ids), np.sort(cheb.purified.ids))
    assert np.allclose(exact.purified.points, cheb.purified.points, atol=1e-3)


def test_meyer_kernel_runs():
    res = pwavep(sphere(), model(), PurificationConfig(k=10, kernel="meyer"))
    assert res.purified.n == 118


def test_external_oracle_matches_in_process(tmp_path):
    m = model()
    m.save(tmp_path / "m.npz")
    cloud = sphere()
    local = pwavep(cloud, m, CFG)
    with ExternalOracle([sys.executable, "-m", "pwavep.oracle_server", str(tmp_path / "m.npz")], timeout=60) as ext:
        remote = pwavep(cloud, ext, CFG)
    assert np.allclose(remote.purified.points, local.purified.points, atol=1e-10)


def test_disconnected_graph_rejected():
    a = sphere(60).points
    cloud = PointCloud(np.vstack([a, a + 100.0]))
    with pytest.raises(GraphError):
        pwavep(cloud, model(), CFG)


def test_too_few_points():
    with pytest.raises(InvalidParameterError):
        pwavep(sphere(10), model(), CFG)


# -- baselines -----------------------------------------------------------------

def grid(n=6):
    g = np.stack(np.meshgrid(*[np.arange(n, dtype=float)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    return g


def test_sor_keeps_uniform_grid_with_large_multiplier():
    cloud = PointCloud(grid())
    assert sor(cloud, k=6, sigma_mult=100.0).n == cloud.n


def test_sor_removes_far_outlier():
    pts = np.vstack([grid(), [[30.0, 30.0, 30.0]]])
    cloud = PointCloud(pts)
    out = sor(cloud, k=6, sigma_mult=1.1)
    assert cloud.n - 1 not in out.ids
    assert set(out.ids) <= set(cloud.ids)


def test_sor_needs_k_below_n():
    with pytest.raises(InvalidParameterError):
        sor(PointCloud(grid(2)), k=8)


def test_ror_identity_and_isolated_point():
    cloud = PointCloud(np.vstack([grid(), [[20.0, 0, 0]]]))
    assert ror(cloud, 1.5, 0).n == cloud.n
    out = ror(cloud, 1.5, 1)
    assert out.n == cloud.n - 1 and cloud.n - 1 not in out.ids


def test_ror_removes_sparse_ring():
    rng = np.random.default_rng(0)
    cluster = rng.normal(0, 0.05, (200, 3))
    angles = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    ring = np.column_stack([3 * np.cos(angles), 3 * np.sin(angles), np.zeros(12)])
    cloud = PointCloud(np.vstack([cluster, ring]))
    out = ror(cloud, radius=0.5, min_neighbors=3)
    tree_counts = (np.linalg.norm(cloud.points[:, None] - cloud.points[None], axis=2) <= 0.5).sum(axis=1) - 1
    assert np.array_equal(np.sort(out.ids), np.flatnonzero(tree_counts >= 3))
    assert out.ids.tolist() == list(range(200))


def test_ror_rejects_bad_radius():
    with pytest.raises(InvalidParameterError):
        ror(PointCloud(grid(2)), 0.0)


def test_pfourierp_is_lowpass_on_own_graph():
    cloud = sphere()
    expected = gft_lowpass(cloud, eigendecompose(build_laplacians(build_knn_graph(cloud, 10))), 0.5)
    assert np.array_equal(pfourierp(cloud, 10, 0.5).points, expected.points)
