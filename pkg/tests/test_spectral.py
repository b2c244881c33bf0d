import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pwavep.errors import CapacityError, InvalidParameterError
from pwavep.metrics import emd
from pwavep.pcgeom import PointCloud, build_knn_graph, build_laplacians, graph_from_adjacency
from pwavep.spectral import (
    band_rows,
    eigendecompose,
    gft_lowpass,
    inject_band_perturbation,
    smoothness,
    smoothness_edges,
)


def cloud_and_lap(n=60, seed=0, k=8):
    pts = np.random.default_rng(seed).standard_normal((n, 3))
    cloud = PointCloud(pts)
    return cloud, build_laplacians(build_knn_graph(cloud, k))


def sphere(n, seed=0):
    v = np.random.default_rng(seed).standard_normal((n, 3))
    return PointCloud(v / np.linalg.norm(v, axis=1, keepdims=True))


def test_eigendecomposition_residual_and_orthonormality():
    _, lap = cloud_and_lap()
    b = eigendecompose(lap)
    mat = lap.normalized.toarray()
    assert np.allclose(mat @ b.eigenvectors, b.eigenvectors * b.eigenvalues, atol=1e-10)
    assert np.allclose(b.eigenvectors.T @ b.eigenvectors, np.eye(60), atol=1e-10)
    assert np.all(np.diff(b.eigenvalues) >= -1e-12)


def test_gft_round_trip():
    cloud, lap = cloud_and_lap()
    b = eigendecompose(lap)
    assert np.allclose(b.igft(b.gft(cloud.points)), cloud.points, atol=1e-12)


def test_capacity_error():
    _, lap = cloud_and_lap(n=30)
    with pytest.raises(CapacityError):
        eigendecompose(lap, cap=20)


def test_constant_signal_has_zero_smoothness():
    _, lap = cloud_and_lap()
    assert smoothness(lap, np.ones(60))[0] == pytest.approx(0.0, abs=1e-12)


def test_path_graph_smoothness_by_hand():
    adj = np.zeros((4, 4), dtype=int)
    for i in range(3):
        adj[i, i + 1] = adj[i + 1, i] = 1
    lap = build_laplacians(graph_from_adjacency(adj))
    h = np.array([0.0, 1.0, 3.0, 6.0])
    # (1-0)^2 + (3-1)^2 + (6-3)^2
    assert smoothness(lap, h)[0] == pytest.approx(14.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_smoothness_edge_and_spectral_forms_agree(seed):
    cloud, lap = cloud_and_lap(n=30, seed=seed, k=5)
    basis = eigendecompose(lap, "combinatorial")
    h = np.random.default_rng(seed).standard_normal((30, 3))
    got = smoothness(lap, h, basis)
    dense = np.einsum("ij,ik,kj->j", h, lap.combinatorial.toarray(), h)
    assert np.allclose(got, dense, rtol=1e-10)
    assert np.all(got >= 0)


def test_smoothness_rejects_normalized_basis():
    _, lap = cloud_and_lap()
    with pytest.raises(InvalidParameterError):
        smoothness(lap, np.ones(60), eigendecompose(lap))


def test_smoothness_edges_weighted():
    adj = np.array([[0, 2], [2, 0]])
    assert smoothness_edges(adj, np.array([1.0, 4.0]))[0] == pytest.approx(18.0)


def test_lowpass_full_cutoff_is_identity():
    cloud, lap = cloud_and_lap()
    b = eigendecompose(lap)
    out = gft_lowpass(cloud, b, cutoff=2.0)
    assert np.allclose(out.points, cloud.points, atol=1e-12)


def test_lowpass_kills_high_modes():
    cloud, lap = cloud_and_lap()
    b = eigendecompose(lap)
    out = gft_lowpass(cloud, b, 0.67)
    coeffs = b.gft(out.points)
    assert np.allclose(coeffs[b.eigenvalues > 0.67], 0.0, atol=1e-12)
    assert np.allclose(coeffs[b.eigenvalues <= 0.67], b.gft(cloud.points)[b.eigenvalues <= 0.67])


def test_lowpass_rejects_bad_cutoff():
    cloud, lap = cloud_and_lap()
    with pytest.raises(InvalidParameterError):
        gft_lowpass(cloud, eigendecompose(lap), 2.5)


@pytest.mark.parametrize("spacing", ["eigenvalue", "index"])
def test_bands_partition_non_dc_modes(spacing):
    cloud = sphere(200)
    lam = eigendecompose(build_laplacians(build_knn_graph(cloud, 10))).eigenvalues
    rows = np.concatenate([band_rows(lam, b, 10, spacing) for b in range(1, 11)])
    assert sorted(rows.tolist()) == list(range(1, 200))


def test_empty_eigenvalue_band_is_invalid():
    lam = np.array([0.0, 0.1, 0.11, 0.12, 1.9])
    with pytest.raises(InvalidParameterError, match="no eigenvalues"):
        band_rows(lam, 2, 4)


def test_index_bands_are_equal_sized():
    sizes = [len(band_rows(np.linspace(0, 2, 101), b, 10, "index")) for b in range(1, 11)]
    assert sizes == [10] * 10


def test_band_index_out_of_range():
    with pytest.raises(InvalidParameterError):
        band_rows(np.linspace(0, 2, 20), 11, 10)


def test_perturbation_energy_and_support():
    cloud, lap = cloud_and_lap()
    b = eigendecompose(lap)
    attacked, pert = inject_band_perturbation(cloud, b, 4, 10, energy=2.0, seed=3)
    assert np.linalg.norm(pert.delta) == pytest.approx(2.0, rel=1e-12)
    outside = np.setdiff1d(np.arange(60), pert.band_rows)
    assert np.allclose(pert.delta_hat[outside], 0.0)
    assert np.allclose(b.gft(attacked.points - cloud.points), pert.delta_hat, atol=1e-12)


def test_zero_energy_is_identity():
    cloud, lap = cloud_and_lap()
    attacked, _ = inject_band_perturbation(cloud, eigendecompose(lap), 2, 10, energy=0.0, spacing="index")
    assert np.array_equal(attacked.points, cloud.points)


def test_perturbation_deterministic():
    cloud, lap = cloud_and_lap()
    b = eigendecompose(lap)
    a1, _ = inject_band_perturbation(cloud, b, 5, 10, 2.0, seed=9)
    a2, _ = inject_band_perturbation(cloud, b, 5, 10, 2.0, seed=9)
    assert np.array_equal(a1.points, a2.points)


def test_low_band_moves_mass_further_than_high_band():
    cloud = sphere(1024)
    b = eigendecompose(build_laplacians(build_knn_graph(cloud, 20)))
    low, _ = inject_band_perturbation(cloud, b, 1, 10, 2.0, seed=0)
    high, _ = inject_band_perturbation(cloud, b, 10, 10, 2.0, seed=0)
    exact = dict(solver="hungarian-exact", hungarian_cap=1024)
    assert emd(low, cloud, **exact).cost > emd(high, cloud, **exact).cost


def test_two_node_path_basis():
    lap = build_laplacians(graph_from_adjacency(np.array([[0, 1], [1, 0]])))
    b = eigendecompose(lap, "combinatorial")
    assert np.allclose(b.eigenvalues, [0, 2])
    assert np.allclose(np.abs(b.eigenvectors), np.full((2, 2), 1 / np.sqrt(2)))


def test_triangle_normalized_spectrum():
    lap = build_laplacians(graph_from_adjacency(np.ones((3, 3)) - np.eye(3)))
    assert np.allclose(eigendecompose(lap).eigenvalues, [0, 1.5, 1.5])


def test_lowpass_zero_cutoff_keeps_only_dc_mode():
    cloud, lap = cloud_and_lap()
    b = eigendecompose(lap)
    u0 = b.eigenvectors[:, :1]
    out = gft_lowpass(cloud, b, 0.0)
    assert np.allclose(out.points, u0 @ (u0.T @ cloud.points), atol=1e-12)


def test_lowpass_removes_high_band_injection():
    cloud = sphere(300)
    b = eigendecompose(build_laplacians(build_knn_graph(cloud, 10)))
    attacked, pert = inject_band_perturbation(cloud, b, 9, 10, 2.0, seed=1)
    purified = gft_lowpass(attacked, b, 0.67)
    lowpassed_clean = gft_lowpass(cloud, b, 0.67)
    # the filter is linear, so the surviving injected energy is the filtered delta
    left = np.linalg.norm(purified.points - lowpassed_clean.points)
    assert left <= 0.01 * np.linalg.norm(pert.delta)
