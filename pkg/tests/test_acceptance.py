"""Acceptance suite: one test and one PASS/FAIL summary line per criterion.

The end-to-end criteria (6-8) share one trained toy classifier built from the
frozen defaults in ``ExperimentSpec`` (dataset, training and attack seeds).
"""
import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import record_criterion
from pwavep.gwavelets import (
    build_operators_chebyshev,
    build_operators_exact,
    design_kernel_bank,
    gwt,
    igwt,
    operator_relative_error,
)
from pwavep.harness import experiments as ex
from pwavep.harness.cli import main
from pwavep.harness.config import ExperimentSpec
from pwavep.metrics import cd_bound_check, chamfer, emd
from pwavep.oracle import ToyClassifier, project_gradient_to_wavelets, pseudo_label, train_toy_classifier
from pwavep.pcgeom import PointCloud, build_knn_graph, build_laplacians
from pwavep.spectral import eigendecompose, inject_band_perturbation


def check(number, passed, detail):
    record_criterion(number, bool(passed), detail)
    assert passed, detail


def random_graph(n, seed, k=8):
    pts = np.random.default_rng(seed).standard_normal((n, 3))
    cloud = PointCloud(pts)
    return cloud, build_laplacians(build_knn_graph(cloud, k))


def rel(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


# 1 ---------------------------------------------------------------------------

def test_criterion_01_band_study():
    t0 = time.perf_counter()
    rows, summary = ex.run_band_study(ExperimentSpec())
    seconds = time.perf_counter() - t0
    complete = all(r["clouds"] == 50 for r in rows)
    ok = complete and summary["cd_cv"] < 0.15 and summary["spearman_band_emd"] < -0.8 and seconds < 300
    check(1, ok, f"CD CV {summary['cd_cv']:.3f} (< 0.15), Spearman(band, EMD) {summary['spearman_band_emd']:.3f} "
                 f"(< -0.8), {seconds:.1f} s (< 300)")


# 2 ---------------------------------------------------------------------------

def test_criterion_02_chamfer_bound():
    rng = np.random.default_rng(2)
    graphs = []
    for n in (64, 128, 256):
        cloud = PointCloud(rng.standard_normal((n, 3)))
        graphs.append((cloud, eigendecompose(build_laplacians(build_knn_graph(cloud, 10)))))
    worst = -np.inf
    t0 = time.perf_counter()
    for trial in range(1000):
        if trial % 2:
            n = int(rng.integers(2, 257))
            clean = rng.standard_normal((n, 3))
            delta = rng.standard_normal((n, 3)) * rng.uniform(1e-3, 1.0)
        else:
            cloud, basis = graphs[trial % 3]
            clean = cloud.points
            _, pert = inject_band_perturbation(cloud, basis, int(rng.integers(1, 11)), 10,
                                               float(rng.uniform(0.1, 4.0)), int(rng.integers(1 << 30)), "index")
            delta = pert.delta
        actual, bound = cd_bound_check(delta, clean=clean)
        worst = max(worst, actual - bound)
    seconds = time.perf_counter() - t0
    check(2, worst <= 1e-9, f"max(CD - 2||D||^2/N) over 1000 perturbations = {worst:.3e} (<= 1e-9), {seconds:.1f} s")


# 3 ---------------------------------------------------------------------------

def test_criterion_03_frame_reconstruction():
    meyer_err = pinv_err = parseval_err = 0.0
    for seed in range(5):
        _, lap = random_graph(100, seed)
        basis = eigendecompose(lap)
        h = np.random.default_rng(seed).standard_normal((100, 3))
        meyer = build_operators_exact(design_kernel_bank("meyer", 4, lap.lambda_max_estimate), basis)
        coeffs = gwt(meyer, h)
        meyer_err = max(meyer_err, rel(igwt(meyer, coeffs), h))
        parseval_err = max(parseval_err, abs(np.sum(coeffs.stack() ** 2) - np.sum(h ** 2)) / np.sum(h ** 2))
        hat = build_operators_exact(design_kernel_bank("mexican-hat", 4, lap.lambda_max_estimate), basis)
        pinv_err = max(pinv_err, rel(igwt(hat, gwt(hat, h)), h))
    ok = meyer_err < 1e-6 and pinv_err < 1e-6 and parseval_err < 1e-6
    check(3, ok, f"Meyer round trip {meyer_err:.1e}, Mexican-hat pseudo-inverse {pinv_err:.1e}, "
                 f"Parseval {parseval_err:.1e} (all < 1e-6, 5 graphs of 100 nodes)")


# 4 ---------------------------------------------------------------------------

def test_criterion_04_chebyshev_fidelity():
    orders = (5, 10, 20, 50, 100)
    errs = np.zeros((5, len(orders)))
    for seed in range(5):
        _, lap = random_graph(60, seed)
        bank = design_kernel_bank("mexican-hat", 4, lap.lambda_max_estimate)
        exact = build_operators_exact(bank, eigendecompose(lap))
        h = np.random.default_rng(seed).standard_normal((60, 3))
        errs[seed] = [operator_relative_error(build_operators_chebyshev(bank, lap, z), exact, h) for z in orders]
    mean = errs.mean(axis=0)
    at50 = errs[:, orders.index(50)].max()
    ok = at50 < 1e-3 and np.all(np.diff(mean) <= 0)
    trend = ", ".join(f"Z={z}: {e:.1e}" for z, e in zip(orders, mean))
    check(4, ok, f"worst error at Z=50 {at50:.1e} (< 1e-3); mean error {trend} (non-increasing)")


# 5 ---------------------------------------------------------------------------

def _central_fd(fn, x, h):
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        out[idx] = (fn(xp) - fn(xm)) / (2 * h)
    return out


def test_criterion_05_gradients():
    worst_coord = 0.0
    for layer in ("mlp1", "mlp2", "global"):
        for seed in range(3):
            model = ToyClassifier.initialize(4, (32, 32), "tanh", seed, layer)
            x = np.random.default_rng(seed).standard_normal((32, 3))
            loss = lambda p: model.loss_and_gradient(p, 1, alpha=0.01)[0]  # noqa: E731
            worst_coord = max(worst_coord, rel(model.loss_and_gradient(x, 1, alpha=0.01)[4], _central_fd(loss, x, 1e-5)))

    model = ToyClassifier.initialize(4, (32, 32), "tanh", 0)
    x = np.random.default_rng(5).standard_normal((32, 3))
    lap = build_laplacians(build_knn_graph(PointCloud(x), 8))
    worst_wave = 0.0
    for family in ("mexican-hat", "meyer"):
        ops = build_operators_exact(design_kernel_bank(family, 4, lap.lambda_max_estimate), eigendecompose(lap))
        label = pseudo_label(model, x)
        coeffs = ops.analysis(x)
        grad = np.stack(project_gradient_to_wavelets(model.loss_and_gradient(x, label, alpha=0.002)[4], ops))

        def loss_of_band(values, band):
            c = coeffs.copy()
            c[band] = values
            return model.loss_and_gradient(ops.synthesis(c), label, alpha=0.002)[0]

        for band in range(1, 5):
            fd = _central_fd(lambda v: loss_of_band(v, band), coeffs[band], 1e-6)
            worst_wave = max(worst_wave, rel(grad[band - 1], fd))
    ok = worst_coord < 1e-4 and worst_wave < 1e-3
    check(5, ok, f"coordinate gradient vs finite differences {worst_coord:.1e} (< 1e-4); "
                 f"wavelet-projected gradient vs coefficient finite differences {worst_wave:.1e} (< 1e-3)")


# 6-8 --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained():
    spec = ExperimentSpec()
    t = spec.toy
    model, report = train_toy_classifier(
        t.dataset.load(), epochs=t.epochs, seed=t.seed, heldout=spec.dataset.load(), widths=tuple(t.widths),
        activation=t.activation, lr=t.lr, batch_size=t.batch_size, jitter=t.jitter,
    )
    return ex.make_context(spec, model), report


def test_criterion_06_end_to_end_defense(trained):
    ctx, report = trained
    rows = {(r["attack"], r["defense"]): r for r in
            ex.run_defense_eval(ctx, ("pgd", "spectral-band"), ("no-defense", "sor", "pwavep"))}
    held = report.heldout_accuracy
    pgd = rows["pgd", "no-defense"]["accuracy"]
    restored = rows["pgd", "pwavep"]["accuracy"]
    band_pw = rows["spectral-band", "pwavep"]["accuracy"]
    band_sor = rows["spectral-band", "sor"]["accuracy"]
    ok = held >= 0.95 and pgd <= 0.10 and restored >= 0.70 and band_pw >= band_sor
    check(6, ok, f"held-out {held:.3f} (>= 0.95), PGD {pgd:.3f} (<= 0.10), PWaveP after PGD {restored:.3f} "
                 f"(>= 0.70), spectral-band PWaveP {band_pw:.3f} vs SOR {band_sor:.3f} (>=)")


def test_criterion_07_clean_side_effect(trained):
    ctx, _ = trained
    rows = {r["setting"]: r for r in ex.run_clean_side_effect(ctx)}
    d = rows["default"]
    check(7, d["drop_points"] <= 5.0, f"clean {d['clean_accuracy']:.3f} -> purified {d['purified_accuracy']:.3f}, "
                                      f"drop {d['drop_points']:.1f} points (<= 5)")


def test_criterion_08_gamma_argmax(trained):
    ctx, _ = trained
    rows = ex.run_ablation(ctx, "gamma")
    acc = [r["accuracy"] for r in rows]
    sweep = ", ".join(f"{g}: {a:.3f}" for g, a in zip(ex.GAMMA_SWEEP, acc))
    check(8, acc[0] == max(acc), f"PWaveP accuracy after PGD by gamma {sweep} (gamma 0 is the maximum)")


# 9 ---------------------------------------------------------------------------

def test_criterion_09_metric_oracles():
    rng = np.random.default_rng(9)
    cham = 0.0
    for _ in range(20):
        a, b = rng.standard_normal((int(rng.integers(1, 120)), 3)), rng.standard_normal((int(rng.integers(1, 120)), 3))
        d = ((a[:, None] - b[None]) ** 2).sum(axis=2)
        cham = max(cham, abs(chamfer(a, b) - (d.min(axis=1).mean() + d.min(axis=0).mean())))
    sink = 0.0
    for n in range(1, 9):
        for _ in range(5):
            a, b = rng.standard_normal((n, 3)), rng.standard_normal((n, 3))
            exact = emd(a, b, solver="hungarian-exact").cost
            sink = max(sink, abs(emd(a, b, solver="sinkhorn").cost - exact) / exact)
    rigid = 0.0
    for seed in range(10):
        a, b = rng.standard_normal((64, 3)), rng.standard_normal((64, 3))
        rot, shift = Rotation.random(random_state=seed).as_matrix(), rng.uniform(-3, 3, 3)
        ra, rb = a @ rot.T + shift, b @ rot.T + shift
        rigid = max(rigid, abs(chamfer(ra, rb) - chamfer(a, b)), abs(emd(ra, rb).cost - emd(a, b).cost))
    ok = cham <= 1e-10 and sink <= 0.05 and rigid <= 1e-8
    check(9, ok, f"Chamfer vs brute force {cham:.1e} (<= 1e-10), Sinkhorn vs Hungarian {100 * sink:.2f}% (<= 5%), "
                 f"rigid-motion change {rigid:.1e} (<= 1e-8)")


# 10 --------------------------------------------------------------------------

TINY = """
[purification]
k = 10
[dataset]
points_per_cloud = 64
clouds_per_class = 1
[toy]
epochs = 3
widths = [8, 8]
[toy.dataset]
points_per_cloud = 64
clouds_per_class = 20
[attack]
steps = 2
[experiment]
band_clouds = 4
band_points = 128
"""


def test_criterion_10_replay_determinism(tmp_path, capsys):
    cfg = tmp_path / "tiny.toml"
    cfg.write_text(TINY)
    base = ["--config", str(cfg)]
    assert main(base + ["--out-dir", str(tmp_path / "train-toy"), "train-toy"]) == 0
    assert main(base + ["--out-dir", str(tmp_path / "gen-data"), "gen-data"]) == 0
    model = str(tmp_path / "train-toy" / "toy_model.npz")
    cloud = str(tmp_path / "gen-data" / "cloud_0000.xyz")
    runs = {"train-toy": None, "gen-data": None}
    commands = {
        "attack-pgd": ["attack", cloud],
        "attack-band": ["attack", cloud, "--kind", "spectral-band"],
        "attack-add": ["attack", cloud, "--kind", "point-addition"],
        "purify": ["purify", cloud, "--coefficients"],
        "band-study": ["band-study"],
        "defense-eval": ["defense-eval"],
        "clean-check": ["clean-check"],
        **{f"ablate-{name}": ["ablate", name] for name in ex.ABLATIONS},
    }
    for name, argv in commands.items():
        assert main(base + ["--oracle", model, "--out-dir", str(tmp_path / name)] + argv) == 0
        runs[name] = None
    verdicts = {}
    for name in runs:
        rc = main(["--out-dir", str(tmp_path / "replay" / name), "replay", str(tmp_path / name / "manifest.json")])
        verdicts[name] = rc == 0
    capsys.readouterr()
    bad = sorted(n for n, ok in verdicts.items() if not ok)
    check(10, not bad, f"{len(verdicts)} CLI runs replayed from their manifests, "
                       f"{len(verdicts) - len(bad)} with byte-identical csv outputs" + (f"; differing: {bad}" if bad else ""))
