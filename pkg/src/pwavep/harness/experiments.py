"""Experiment suite: band study, defense evaluation, clean side effect, ablations.

Every runner returns plain rows and never touches the input data on disk.
CSV writers format floats with ``repr`` so identical runs give identical bytes.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import spearmanr

from ..attacks import AttackBudget, pgd_attack, point_addition_attack, spectral_band_attack
from ..errors import ConfigError, DataError, GraphError, InvalidParameterError
from ..gwavelets import build_operators_chebyshev, build_operators_exact, design_kernel_bank, operator_relative_error
from ..metrics import chamfer, emd
from ..oracle import OracleConfig, pseudo_label
from ..pcgeom import PointCloud, build_knn_graph, build_laplacians
from ..purify import pfourierp, pwavep, ror, sor
from ..saliency import PurificationConfig
from ..spectral import eigendecompose, inject_band_perturbation
from .config import ExperimentSpec

log = logging.getLogger(__name__)

ATTACKS = ("none", "pgd", "spectral-band", "point-addition")
DEFENSES = ("no-defense", "sor", "ror", "gft-lowpass", "pwavep")
ABLATIONS = ("kernel", "order", "partition", "layer", "gamma", "alpha", "beta", "blackbox")

GAMMA_SWEEP = (0.0, 0.25, 0.5, 0.75, 0.9)
ORDER_SWEEP = (5, 10, 20, 30, 50, 100)
DROP_GRID = (0.0, 0.01, 0.05)
FILTER_GRID = (0.05, 0.09, 0.2)
ALPHA_SWEEP = (0.0, 0.002, 0.02)
BETA_SWEEP = (0.0, 0.5, 1.0, 2.0)


# ---------------------------------------------------------------------------
# output helpers


def _cell(value):
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_table(path, rows: Sequence[dict], columns: Optional[Sequence[str]] = None) -> Path:
    path = Path(path)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row[c]) for c in columns])
    return path


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, command: str, args: dict, spec: ExperimentSpec, outputs: Sequence[Path],
                   timings: Optional[dict] = None, summary: Optional[dict] = None) -> Path:
    """JSON record of everything needed to re-run ``command`` and check its outputs."""
    from .. import __version__

    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "args": args,
        "spec": spec.to_dict(),
        "outputs": {Path(p).name: sha256_file(p) for p in outputs},
        "summary": summary or {},
        "timings": timings or {},
        "version": __version__,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def sub_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# band study


def band_study_gnuplot(csv_name: str) -> str:
    return (
        "set datafile separator ','\n"
        "set key top right\n"
        "set xlabel 'perturbed frequency band'\n"
        "set ylabel 'distance to clean cloud'\n"
        "set logscale y\n"
        f"plot '{csv_name}' every ::2 using 1:2:3 with yerrorlines title 'Chamfer', \\\n"
        f"     '{csv_name}' every ::2 using 1:4:5 with yerrorlines title 'EMD'\n"
    )


def run_band_study(spec: ExperimentSpec) -> tuple[list[dict], dict]:
    """Inject fixed-energy perturbations into each frequency band and measure CD and EMD.

    Band 0 is an energy-zero control row. Returns the table rows and a summary
    with the CD coefficient of variation and the band/EMD Spearman correlation.
    """
    ex, at = spec.experiment, spec.attack
    ds = dataclasses.replace(
        spec.dataset,
        points_per_cloud=ex.band_points,
        clouds_per_class=math.ceil(ex.band_clouds / max(len(spec.dataset.classes), 1)),
    )
    clouds = ds.load().clouds[: ex.band_clouds]
    bands = at.band_count
    cd = np.full((len(clouds), bands + 1), np.nan)
    em = np.full_like(cd, np.nan)
    for i, cloud in enumerate(clouds):
        basis = eigendecompose(build_laplacians(build_knn_graph(cloud, spec.purification.k)))
        cd[i, 0] = em[i, 0] = 0.0
        for b in range(1, bands + 1):
            try:
                attacked, _ = inject_band_perturbation(
                    cloud, basis, b, bands, at.energy, sub_seed(ex.seed, i, b)
                )
            except InvalidParameterError:
                log.warning("cloud %d: band %d is empty, cell left missing", i, b)
                continue
            cd[i, b] = chamfer(attacked, cloud)
            em[i, b] = emd(attacked, cloud, solver=ex.emd_solver).cost
    def stats(col):
        col = col[np.isfinite(col)]
        return (float(col.mean()), float(col.std())) if col.size else (float("nan"), float("nan"))

    rows = []
    for b in range(bands + 1):
        cd_mean, cd_sd = stats(cd[:, b])
        emd_mean, emd_sd = stats(em[:, b])
        rows.append({"band": b, "cd_mean": cd_mean, "cd_sd": cd_sd, "emd_mean": emd_mean, "emd_sd": emd_sd,
                     "clouds": int(np.sum(np.isfinite(cd[:, b])))})
    cd_means = np.array([r["cd_mean"] for r in rows[1:]])
    emd_means = np.array([r["emd_mean"] for r in rows[1:]])
    summary = {
        "cd_cv": float(cd_means.std() / cd_means.mean()),
        "spearman_band_emd": float(spearmanr(np.arange(1, bands + 1), emd_means).statistic),
    }
    return rows, summary


# ---------------------------------------------------------------------------
# defense evaluation


@dataclasses.dataclass
class EvalContext:
    """Model, clean clouds and labels shared by the defense runners."""

    spec: ExperimentSpec
    model: object
    clouds: tuple
    labels: np.ndarray
    _attacked: dict = dataclasses.field(default_factory=dict)

    def predict(self, cloud) -> int:
        return pseudo_label(self.model, cloud)

    def attacked(self, kind: str) -> tuple:
        if kind not in self._attacked:
            self._attacked[kind] = tuple(attack_dataset(self.spec, self.model, self.clouds, kind))
        return self._attacked[kind]


def make_context(spec: ExperimentSpec, model) -> EvalContext:
    data = spec.dataset.load()
    labels = data.labels
    if any(lab is None for lab in labels):
        raise ConfigError("defense experiments need labeled clouds")
    return EvalContext(spec, model, data.clouds, np.asarray(labels, dtype=int))


def attack_dataset(spec: ExperimentSpec, model, clouds, kind: str) -> list[PointCloud]:
    at = spec.attack
    out = []
    for i, cloud in enumerate(clouds):
        seed = sub_seed(at.seed, i)
        if kind == "none":
            out.append(cloud)
        elif kind == "pgd":
            budget = AttackBudget("linf-coordinates", at.epsilon, at.steps, at.step_size, seed=seed)
            out.append(pgd_attack(cloud, model, budget))
        elif kind == "spectral-band":
            basis = eigendecompose(build_laplacians(build_knn_graph(cloud, spec.purification.k)))
            budget = AttackBudget("spectral-band", at.energy, band_index=at.band_index,
                                  band_count=at.band_count, seed=seed)
            out.append(spectral_band_attack(cloud, basis, budget))
        elif kind == "point-addition":
            m = max(1, int(round(at.added_fraction * cloud.n)))
            budget = AttackBudget("point-addition", at.epsilon, at.steps, at.step_size,
                                  added_points=m, cd_weight=at.cd_weight, seed=seed)
            out.append(point_addition_attack(cloud, model, budget))
        else:
            raise ConfigError(f"unknown attack {kind!r}; choose from {ATTACKS}")
    return out


def oracle_config(spec: ExperimentSpec, config: PurificationConfig) -> OracleConfig:
    o = spec.oracle
    return OracleConfig(alpha=config.alpha, mode=o.mode, zo_directions=o.zo_directions,
                        zo_smoothing=o.zo_smoothing, seed=spec.experiment.seed, layer=config.layer)


def defend(ctx: EvalContext, cloud: PointCloud, defense: str, config: Optional[PurificationConfig] = None,
           oracle: Optional[OracleConfig] = None) -> PointCloud:
    spec = ctx.spec
    bl = spec.baselines
    if defense == "no-defense":
        return cloud
    if defense == "sor":
        return sor(cloud, bl.sor_k, bl.sor_sigma)
    if defense == "ror":
        return ror(cloud, bl.ror_radius, bl.ror_min_neighbors)
    if defense == "gft-lowpass":
        return pfourierp(cloud, spec.purification.k, bl.lowpass_cutoff)
    if defense == "pwavep":
        config = config or spec.purification
        return pwavep(cloud, ctx.model, config, oracle or oracle_config(spec, config)).purified
    raise ConfigError(f"unknown defense {defense!r}; choose from {DEFENSES}")


def score(ctx: EvalContext, attacked: Sequence[PointCloud], purify: Callable[[PointCloud], PointCloud]) -> dict:
    """Accuracy and mean CD(purified, clean).

    Graph failures fall back to the unpurified cloud. A defense that deletes
    every point counts as a misclassification and is left out of the CD mean.
    Both cases are counted in ``failures``.
    """
    correct, cds, failures = [], [], 0
    for clean, cloud, label in zip(ctx.clouds, attacked, ctx.labels):
        try:
            out = purify(cloud)
        except GraphError as exc:
            log.warning("purification skipped: %s", exc)
            failures += 1
            out = cloud
        except DataError as exc:
            log.warning("cloud counted as misclassified: %s", exc)
            failures += 1
            correct.append(False)
            continue
        correct.append(ctx.predict(out) == label)
        cds.append(chamfer(out, clean))
    return {
        "accuracy": float(np.mean(correct)),
        "cd_to_clean": float(np.mean(cds)) if cds else float("nan"),
        "clouds": len(correct),
        "failures": failures,
    }


def run_defense_eval(ctx: EvalContext, attacks: Sequence[str] = ("pgd", "spectral-band", "point-addition"),
                     defenses: Sequence[str] = DEFENSES) -> list[dict]:
    rows = []
    for kind in attacks:
        adv = ctx.attacked(kind)
        for defense in defenses:
            res = score(ctx, adv, lambda c, d=defense: defend(ctx, c, d))
            rows.append({"attack": kind, "defense": defense, **res})
            log.info("%s / %s: accuracy %.3f", kind, defense, res["accuracy"])
    return rows


def run_clean_side_effect(ctx: EvalContext) -> list[dict]:
    """Accuracy on unattacked clouds before and after purification (defaults and a no-op partition)."""
    base = float(np.mean([ctx.predict(c) == y for c, y in zip(ctx.clouds, ctx.labels)]))
    rows = []
    for name, cfg in (("default", ctx.spec.purification),
                      ("no-partition", dataclasses.replace(ctx.spec.purification, drop_rate=0.0, filter_rate=0.0))):
        res = score(ctx, ctx.clouds, lambda c, cfg=cfg: defend(ctx, c, "pwavep", cfg))
        rows.append({
            "setting": name,
            "clean_accuracy": base,
            "purified_accuracy": res["accuracy"],
            "drop_points": 100.0 * (base - res["accuracy"]),
            "cd_to_clean": res["cd_to_clean"],
            "clouds": res["clouds"],
        })
    return rows


# ---------------------------------------------------------------------------
# ablations


def _order_operator_error(ctx: EvalContext, order: int, clouds: int = 5, signals: int = 10) -> float:
    errs = []
    cfg = ctx.spec.purification
    rng = np.random.default_rng(sub_seed(ctx.spec.experiment.seed, order))
    for cloud in ctx.clouds[:clouds]:
        lap = build_laplacians(build_knn_graph(cloud, cfg.k))
        bank = design_kernel_bank(cfg.kernel, cfg.scale_count, lap.lambda_max_estimate)
        exact = build_operators_exact(bank, eigendecompose(lap))
        approx = build_operators_chebyshev(bank, lap, order)
        errs.append(operator_relative_error(approx, exact, rng.standard_normal((cloud.n, signals))))
    return float(np.mean(errs))


def ablation_settings(name: str, spec: ExperimentSpec) -> list[tuple[dict, PurificationConfig, OracleConfig]]:
    base = spec.purification
    rep = dataclasses.replace
    if name == "kernel":
        cfgs = [({"kernel": k}, rep(base, kernel=k)) for k in ("mexican-hat", "meyer")]
    elif name == "order":
        cfgs = [({"order": z}, rep(base, chebyshev_order=z, operators="chebyshev")) for z in ORDER_SWEEP]
    elif name == "partition":
        cfgs = [({"drop_rate": d, "filter_rate": f}, rep(base, drop_rate=d, filter_rate=f))
                for d in DROP_GRID for f in FILTER_GRID if d <= f]
    elif name == "layer":
        cfgs = [({"layer": layer}, rep(base, layer=layer)) for layer in ("mlp1", "mlp2", "global")]
    elif name == "gamma":
        cfgs = [({"gamma": g}, rep(base, gamma=g)) for g in GAMMA_SWEEP]
    elif name == "alpha":
        cfgs = [({"alpha": a}, rep(base, alpha=a)) for a in ALPHA_SWEEP]
    elif name == "beta":
        cfgs = [({"beta": b}, rep(base, beta=b)) for b in BETA_SWEEP]
    elif name == "blackbox":
        out = []
        for mode in ("analytic", "zeroth-order"):
            oc = dataclasses.replace(oracle_config(spec, base), mode=mode)
            out.append(({"oracle": mode}, base, oc))
        return out
    else:
        raise ConfigError(f"unknown ablation {name!r}; choose from {ABLATIONS}")
    return [(knob, cfg, oracle_config(spec, cfg)) for knob, cfg in cfgs]


def run_ablation(ctx: EvalContext, name: str, attack: str = "pgd") -> list[dict]:
    """Sweep one knob with every other setting at its default; PWaveP accuracy on one attacked batch."""
    adv = ctx.attacked(attack)
    rows = []
    for knob, cfg, oc in ablation_settings(name, ctx.spec):
        res = score(ctx, adv, lambda c, cfg=cfg, oc=oc: defend(ctx, c, "pwavep", cfg, oc))
        row = {"ablation": name, "setting": json.dumps(knob, sort_keys=True), **res}
        if name == "order":
            row["operator_error"] = _order_operator_error(ctx, knob["order"])
        rows.append(row)
        log.info("%s %s: accuracy %.3f", name, knob, res["accuracy"])
    return rows

