"""Command-line entry point (``pwavep`` / ``python3 -m pwavep``)."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path


from ..attacks import AttackBudget, pgd_attack, point_addition_attack, spectral_band_attack
from ..errors import ConfigError, PWavePError
from ..gwavelets import write_coefficients_csv
from ..oracle import load_model, train_toy_classifier
from ..pcgeom import build_knn_graph, build_laplacians, infer_format, load_cloud, save_cloud
from ..purify import pwavep
from ..spectral import eigendecompose
from . import experiments as ex
from .config import ExperimentSpec, load_config

log = logging.getLogger("pwavep")

ATTACK_KINDS = ("linf-coordinates", "spectral-band", "point-addition")


# ---------------------------------------------------------------------------
# commands: (spec, args, out_dir) -> (outputs, summary)


def _model(spec: ExperimentSpec):
    o = spec.oracle
    if not o.model:
        raise ConfigError("no model given; pass --oracle <model.npz|external:cmd> or set [oracle] model")
    return load_model(o.model, o.timeout)


def _close(model):
    if hasattr(model, "close"):
        model.close()


def cmd_gen_data(spec, args, out):
    data = spec.dataset.load()
    fmt = args.get("format", "xyz-text")
    suffix = {"xyz-text": ".xyz", "csv": ".csv", "ply-ascii": ".ply"}[fmt]
    rows = []
    for i, cloud in enumerate(data.clouds):
        name = f"cloud_{i:04d}{suffix}"
        save_cloud(cloud, out / name, fmt)
        rows.append({"file": name, "label": cloud.label, "class": data.class_names[cloud.label]})
    labels = ex.write_table(out / "labels.csv", rows, ["file", "label", "class"])
    (out / "classes.txt").write_text("\n".join(data.class_names) + "\n")
    return [labels], {"clouds": len(rows)}


def cmd_train_toy(spec, args, out):
    t = spec.toy
    train = t.dataset.load()
    held = spec.dataset.load()
    model, report = train_toy_classifier(
        train, epochs=t.epochs, seed=t.seed, heldout=held, widths=tuple(t.widths),
        activation=t.activation, lr=t.lr, batch_size=t.batch_size, jitter=t.jitter,
    )
    path = out / args.get("model_name", "toy_model.npz")
    model.save(path)
    rows = [{"epoch": i + 1, "loss": loss} for i, loss in enumerate(report.losses)]
    table = ex.write_table(out / "training.csv", rows, ["epoch", "loss"])
    summary = {"train_accuracy": report.train_accuracy, "heldout_accuracy": report.heldout_accuracy}
    ex.write_table(out / "accuracy.csv", [summary], ["train_accuracy", "heldout_accuracy"])
    return [table, out / "accuracy.csv", path], summary


def cmd_attack(spec, args, out):
    src = Path(args["input"])
    cloud = load_cloud(src, label=args.get("label"))
    at = spec.attack
    kind = args.get("kind", "linf-coordinates")
    if kind == "spectral-band":
        basis = eigendecompose(build_laplacians(build_knn_graph(cloud, spec.purification.k)))
        budget = AttackBudget(kind, at.energy, band_index=at.band_index, band_count=at.band_count, seed=at.seed)
        attacked = spectral_band_attack(cloud, basis, budget)
    else:
        model = _model(spec)
        try:
            if kind == "linf-coordinates":
                attacked = pgd_attack(cloud, model, AttackBudget(kind, at.epsilon, at.steps, at.step_size, seed=at.seed))
            else:
                m = max(1, int(round(at.added_fraction * cloud.n)))
                attacked = point_addition_attack(cloud, model, AttackBudget(
                    kind, at.epsilon, at.steps, at.step_size, added_points=m, cd_weight=at.cd_weight, seed=at.seed))
        finally:
            _close(model)
    fmt = args.get("format") or infer_format(src)
    dest = out / (args.get("output") or f"attacked_{src.stem}{src.suffix}")
    save_cloud(attacked, dest, fmt)
    return [dest], {"points": attacked.n}


def cmd_purify(spec, args, out):
    src = Path(args["input"])
    cloud = load_cloud(src)
    model = _model(spec)
    try:
        res = pwavep(cloud, model, spec.purification, ex.oracle_config(spec, spec.purification))
    finally:
        _close(model)
    fmt = args.get("format") or infer_format(src)
    dest = out / (args.get("output") or f"purified_{src.stem}{src.suffix}")
    save_cloud(res.purified, dest, fmt)
    sal = out / "saliency.csv"
    res.report.write_csv(sal)
    mods = ex.write_table(out / "modified_coefficients.csv", [
        {"point_id": pid, "band": band, "old_x": old[0], "old_y": old[1], "old_z": old[2],
         "new_x": new[0], "new_y": new[1], "new_z": new[2]}
        for pid, band, old, new in res.modified_coefficients
    ], ["point_id", "band", "old_x", "old_y", "old_z", "new_x", "new_y", "new_z"])
    outputs = [dest, sal, mods]
    if args.get("coefficients"):
        coef = out / "coefficients.csv"
        write_coefficients_csv(res.coefficients, cloud.ids, coef)
        outputs.append(coef)
    summary = {"input_points": cloud.n, "purified_points": res.purified.n,
               "high_risk": res.partition.high_risk.tolist(), "mid_risk": len(res.partition.mid_risk)}
    return outputs, summary


def cmd_band_study(spec, args, out):
    rows, summary = ex.run_band_study(spec)
    table = ex.write_table(out / "band_study.csv", rows)
    script = out / "band_study.gp"
    script.write_text(ex.band_study_gnuplot(table.name))
    ex.write_table(out / "band_study_summary.csv", [summary])
    return [table, out / "band_study_summary.csv"], summary


def _ctx(spec):
    model = _model(spec)
    return ex.make_context(spec, model), model


def cmd_defense_eval(spec, args, out):
    ctx, model = _ctx(spec)
    try:
        rows = ex.run_defense_eval(ctx, args.get("attacks") or ("pgd", "spectral-band", "point-addition"),
                                   args.get("defenses") or ex.DEFENSES)
    finally:
        _close(model)
    table = ex.write_table(out / "defense_eval.csv", rows)
    return [table], {f"{r['attack']}/{r['defense']}": r["accuracy"] for r in rows}


def cmd_clean_check(spec, args, out):
    ctx, model = _ctx(spec)
    try:
        rows = ex.run_clean_side_effect(ctx)
    finally:
        _close(model)
    table = ex.write_table(out / "clean_side_effect.csv", rows)
    return [table], {r["setting"]: r["drop_points"] for r in rows}


def cmd_ablate(spec, args, out):
    name = args["name"]
    ctx, model = _ctx(spec)
    try:
        rows = ex.run_ablation(ctx, name, args.get("attack", "pgd"))
    finally:
        _close(model)
    table = ex.write_table(out / f"ablation_{name}.csv", rows)
    return [table], {r["setting"]: r["accuracy"] for r in rows}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-toy": cmd_train_toy,
    "attack": cmd_attack,
    "purify": cmd_purify,
    "band-study": cmd_band_study,
    "defense-eval": cmd_defense_eval,
    "clean-check": cmd_clean_check,
    "ablate": cmd_ablate,
}


def execute(command: str, spec: ExperimentSpec, args: dict, out_dir) -> Path:
    """Run one command into ``out_dir`` and write its manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    outputs, summary = COMMANDS[command](spec, args, out)
    timings = {"seconds": time.perf_counter() - t0}
    return ex.write_manifest(out, command, args, spec, outputs, timings, summary)


def replay(manifest_path, out_dir) -> tuple[bool, dict]:
    """Re-run a manifest into ``out_dir``; returns (all csv outputs identical, per-file verdicts)."""
    manifest = json.loads(Path(manifest_path).read_text())
    spec = ExperimentSpec.from_dict(manifest["spec"])
    new = json.loads(execute(manifest["command"], spec, manifest["args"], out_dir).read_text())
    verdicts = {}
    for name, digest in manifest["outputs"].items():
        if name.endswith(".csv"):
            verdicts[name] = new["outputs"].get(name) == digest
    return all(verdicts.values()), verdicts


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pwavep", description="Graph-wavelet purification of adversarial point clouds.")
    p.add_argument("--config", help="TOML file with [purification], [dataset], [attack], ... sections")
    p.add_argument("--seed", type=int, help="overrides experiment, attack and training seeds")
    p.add_argument("--out-dir", default="pwavep_out", help="directory for csv tables and manifest.json")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (applied at start-up)")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--exact", dest="operators", action="store_const", const="exact",
                      help="dense eigendecomposition-based wavelet operators")
    mode.add_argument("--chebyshev", dest="operators", action="store_const", const="chebyshev",
                      help="Chebyshev-approximated wavelet operators")
    p.add_argument("--oracle", help="model file (toy:<path> or <path>) or external:<command>")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic labeled dataset")
    g.add_argument("--format", default="xyz-text", choices=("xyz-text", "csv", "ply-ascii"))

    t = sub.add_parser("train-toy", help="train the built-in toy classifier")
    t.add_argument("--epochs", type=int)
    t.add_argument("--model-name", default="toy_model.npz")

    a = sub.add_parser("attack", help="attack one cloud file")
    a.add_argument("input")
    a.add_argument("--kind", default="linf-coordinates", choices=ATTACK_KINDS)
    a.add_argument("--epsilon", type=float)
    a.add_argument("--label", type=int, help="true label (default: the model's prediction)")
    a.add_argument("--output")
    a.add_argument("--format", choices=("xyz-text", "csv", "ply-ascii"))

    u = sub.add_parser("purify", help="purify one cloud file")
    u.add_argument("input")
    u.add_argument("--output")
    u.add_argument("--format", choices=("xyz-text", "csv", "ply-ascii"))
    u.add_argument("--coefficients", action="store_true", help="also export all wavelet coefficients")

    sub.add_parser("band-study", help="CD/EMD response to per-band perturbations")
    d = sub.add_parser("defense-eval", help="attacks x defenses accuracy and CD-to-clean table")
    d.add_argument("--attacks", nargs="+", choices=ex.ATTACKS)
    d.add_argument("--defenses", nargs="+", choices=ex.DEFENSES)
    sub.add_parser("clean-check", help="accuracy drop caused by purifying clean clouds")
    b = sub.add_parser("ablate", help="one-knob sweep of the purification settings")
    b.add_argument("name", choices=ex.ABLATIONS)
    b.add_argument("--attack", default="pgd", choices=ex.ATTACKS)
    r = sub.add_parser("replay", help="re-run a manifest and compare csv outputs byte for byte")
    r.add_argument("manifest")
    return p


def resolve_spec(ns) -> ExperimentSpec:
    spec = load_config(ns.config) if ns.config else ExperimentSpec()
    rep = dataclasses.replace
    if ns.seed is not None:
        spec = spec.replace(
            experiment=rep(spec.experiment, seed=ns.seed),
            attack=rep(spec.attack, seed=ns.seed),
            toy=rep(spec.toy, seed=ns.seed),
        )
    if ns.operators:
        spec = spec.replace(purification=rep(spec.purification, operators=ns.operators))
    if ns.oracle:
        oracle = ns.oracle
        if oracle.startswith("toy:") or not oracle.startswith("external:"):
            model = oracle[len("toy:"):] if oracle.startswith("toy:") else oracle
            spec = spec.replace(oracle=rep(spec.oracle, model=str(Path(model).resolve())))
        else:
            spec = spec.replace(oracle=rep(spec.oracle, model=oracle, mode="external"))
    if getattr(ns, "epochs", None):
        spec = spec.replace(toy=rep(spec.toy, epochs=ns.epochs))
    if getattr(ns, "epsilon", None) is not None:
        spec = spec.replace(attack=rep(spec.attack, epsilon=ns.epsilon))
    return spec


def command_args(ns) -> dict:
    c = ns.command
    if c == "gen-data":
        return {"format": ns.format}
    if c == "train-toy":
        return {"model_name": ns.model_name}
    if c == "attack":
        return {"input": str(Path(ns.input).resolve()), "kind": ns.kind, "label": ns.label,
                "output": ns.output, "format": ns.format}
    if c == "purify":
        return {"input": str(Path(ns.input).resolve()), "output": ns.output, "format": ns.format,
                "coefficients": ns.coefficients}
    if c == "defense-eval":
        return {"attacks": ns.attacks, "defenses": ns.defenses}
    if c == "ablate":
        return {"name": ns.name, "attack": ns.attack}
    return {}


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(ns.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        if ns.command == "replay":
            ok, verdicts = replay(ns.manifest, ns.out_dir)
            for name, same in sorted(verdicts.items()):
                print(f"{'identical' if same else 'DIFFERENT'}  {name}")
            return 0 if ok else 1
        spec = resolve_spec(ns)
        manifest = execute(ns.command, spec, command_args(ns), ns.out_dir)
        summary = json.loads(manifest.read_text())["summary"]
        print(json.dumps(summary, indent=2, sort_keys=True))
        print(f"manifest: {manifest}")
        return 0
    except PWavePError as exc:
        print(f"pwavep: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"pwavep: error: {exc}", file=sys.stderr)
        return 3
