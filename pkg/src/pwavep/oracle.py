"""Gradient oracles for the composite purification loss.

The loss is ``L = CE(f(P'), y_hat) + alpha * ||F_l(P')||`` where ``y_hat`` is
the model's own prediction on the unmodified input (pseudo-label) and F_l the
activation map of a chosen layer. Three backends supply it:

* ``analytic``: the built-in :class:`ToyClassifier`, exact backprop;
* ``zeroth-order``: two-point random-direction estimate of dL_CE/dP' from
  class scores only (works with either backend);
* ``external``: a subprocess speaking newline-delimited JSON.
"""
from __future__ import annotations

import json
import logging
import queue
import shlex
import subprocess
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidParameterError, NumericError, OracleError, TrainingError

log = logging.getLogger(__name__)

LAYERS = ("mlp1", "mlp2", "global")
ACTIVATIONS = ("tanh", "relu", "softplus")
MODES = ("analytic", "zeroth-order", "external")


@dataclass(frozen=True)
class OracleOutput:
    loss: float
    ce_loss: float
    feature_norm: float
    coord_gradient: Optional[np.ndarray]
    predicted_class: int
    class_scores: np.ndarray
    label: int


@dataclass(frozen=True)
class OracleConfig:
    alpha: float = 0.002
    mode: str = "analytic"
    zo_directions: int = 64
    zo_smoothing: float = 1e-3
    seed: int = 0
    layer: Optional[str] = None

    def __post_init__(self):
        if self.alpha < 0:
            raise InvalidParameterError("alpha must be >= 0")
        if self.mode not in MODES:
            raise InvalidParameterError(f"oracle mode must be one of {MODES}, got {self.mode!r}")
        if self.zo_directions < 1:
            raise InvalidParameterError("zo_directions must be >= 1")
        if self.zo_smoothing <= 0:
            raise InvalidParameterError("zo_smoothing must be > 0")
        if self.layer is not None and self.layer not in LAYERS:
            raise InvalidParameterError(f"layer must be one of {LAYERS}")


# ---------------------------------------------------------------------------
# Toy classifier


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.logaddexp(0.0, z)


def _act_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0).astype(z.dtype)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class _Cache:
    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    argmax: np.ndarray
    pooled: np.ndarray
    logits: np.ndarray


@dataclass
class ToyClassifier:
    """Per-point shared MLP, max-pool over points, linear head.

    ``layer`` names the activation map used by the feature-stability term:
    ``mlp1`` / ``mlp2`` (per-point maps, Frobenius norm) or ``global`` (the
    pooled feature vector).
    """

    params: dict
    activation: str = "tanh"
    layer: str = "global"
    class_names: tuple = ()

    @classmethod
    def initialize(cls, num_classes: int, widths: Sequence[int] = (64, 128), activation: str = "tanh",
                   seed: int = 0, layer: str = "global", class_names=()) -> "ToyClassifier":
        if activation not in ACTIVATIONS:
            raise InvalidParameterError(f"activation must be one of {ACTIVATIONS}")
        if layer not in LAYERS:
            raise InvalidParameterError(f"layer must be one of {LAYERS}")
        rng = np.random.default_rng(seed)
        h1, h2 = widths
        gain = 2.0 if activation == "relu" else 1.0
        params = {
            "w1": rng.standard_normal((3, h1)) * np.sqrt(gain / 3),
            "b1": np.zeros(h1),
            "w2": rng.standard_normal((h1, h2)) * np.sqrt(gain / h1),
            "b2": np.zeros(h2),
            "wh": rng.standard_normal((h2, num_classes)) * np.sqrt(1.0 / h2),
            "bh": np.zeros(num_classes),
        }
        return cls(params, activation, layer, tuple(class_names))

    @property
    def num_classes(self) -> int:
        return self.params["bh"].shape[0]

    def _forward(self, x: np.ndarray) -> _Cache:
        p = self.params
        z1 = x @ p["w1"] + p["b1"]
        a1 = _act(self.activation, z1)
        z2 = a1 @ p["w2"] + p["b2"]
        a2 = _act(self.activation, z2)
        arg = np.argmax(a2, axis=-2)
        pooled = np.take_along_axis(a2, arg[..., None, :], axis=-2)[..., 0, :]
        logits = pooled @ p["wh"] + p["bh"]
        return _Cache(x, z1, a1, z2, a2, arg, pooled, logits)

    def logits(self, points: np.ndarray) -> np.ndarray:
        x = np.asarray(points, dtype=np.float64)
        if x.shape[-1] != 3:
            raise InvalidParameterError("points must have 3 coordinates")
        return self._forward(x).logits

    def predict(self, points: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(points), axis=-1)

    def features(self, points: np.ndarray, layer: Optional[str] = None) -> np.ndarray:
        cache = self._forward(np.asarray(points, dtype=np.float64))
        return {"mlp1": cache.a1, "mlp2": cache.a2, "global": cache.pooled}[layer or self.layer]

    def _backward(self, cache: _Cache, dlogits: np.ndarray, feat_grads: dict, need_params: bool):
        """Backprop through head, max-pool and the shared MLP.

        ``feat_grads`` maps a layer name to an extra gradient on that
        activation. Works on a single cloud (N, 3) or a batch (B, N, 3).
        """
        p = self.params
        dpooled = dlogits @ p["wh"].T
        if "global" in feat_grads:
            dpooled = dpooled + feat_grads["global"]
        da2 = np.zeros_like(cache.a2)
        np.put_along_axis(da2, cache.argmax[..., None, :], dpooled[..., None, :], axis=-2)
        if "mlp2" in feat_grads:
            da2 += feat_grads["mlp2"]
        dz2 = da2 * _act_grad(self.activation, cache.z2, cache.a2)
        da1 = dz2 @ p["w2"].T
        if "mlp1" in feat_grads:
            da1 += feat_grads["mlp1"]
        dz1 = da1 * _act_grad(self.activation, cache.z1, cache.a1)
        dx = dz1 @ p["w1"].T
        grads = None
        if need_params:
            flat = lambda t: t.reshape(-1, t.shape[-1])  # noqa: E731
            grads = {
                "wh": flat(cache.pooled).T @ flat(dlogits),
                "bh": flat(dlogits).sum(axis=0),
                "w2": flat(cache.a1).T @ flat(dz2),
                "b2": flat(dz2).sum(axis=0),
                "w1": flat(cache.x).T @ flat(dz1),
                "b1": flat(dz1).sum(axis=0),
            }
        return dx, grads

    def loss_and_gradient(self, points: np.ndarray, label: int, alpha: float = 0.0,
                          layer: Optional[str] = None, need_params: bool = False):
        """Composite loss of one cloud and its gradient with respect to the coordinates.

        Returns ``(loss, ce, feature_norm, probs, dX, param_grads)``.
        """
        x = np.asarray(points, dtype=np.float64)
        cache = self._forward(x)
        probs = softmax(cache.logits)
        ce = float(-np.log(max(probs[label], 1e-300)))
        layer = layer or self.layer
        feat = {"mlp1": cache.a1, "mlp2": cache.a2, "global": cache.pooled}[layer]
        fnorm = float(np.linalg.norm(feat))
        dlogits = probs.copy()
        dlogits[label] -= 1.0
        feat_grads = {}
        if alpha > 0 and fnorm > 0:
            feat_grads[layer] = alpha * feat / fnorm
        dx, grads = self._backward(cache, dlogits, feat_grads, need_params)
        return ce + alpha * fnorm, ce, fnorm, probs, dx, grads

    def ce_losses(self, batch: np.ndarray, label: int) -> np.ndarray:
        """Cross-entropy of every cloud in a (B, N, 3) batch against one label."""
        probs = softmax(self.logits(batch))
        return -np.log(np.maximum(probs[..., label], 1e-300))

    # -- persistence ----------------------------------------------------

    def save(self, path) -> None:
        meta = {"activation": self.activation, "layer": self.layer, "class_names": list(self.class_names)}
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta)), **self.params)

    @classmethod
    def load(cls, path) -> "ToyClassifier":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            params = {k: data[k].copy() for k in data.files if k != "meta"}
        return cls(params, meta["activation"], meta["layer"], tuple(meta["class_names"]))


@dataclass
class TrainingReport:
    train_accuracy: float
    heldout_accuracy: float
    losses: list = field(default_factory=list)


def train_toy_classifier(dataset, epochs: int = 40, seed: int = 0, heldout=None, widths=(64, 128),
                         activation: str = "tanh", lr: float = 2e-3, batch_size: int = 32,
                         jitter: float = 0.0) -> tuple[ToyClassifier, TrainingReport]:
    """Train with Adam on mini-batches; fully deterministic for a given seed."""
    labels = dataset.labels
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2 or counts.min() < 20:
        raise InvalidParameterError("training needs at least 2 classes with at least 20 clouds each")
    num_classes = len(dataset.class_names) or int(labels.max()) + 1
    model = ToyClassifier.initialize(num_classes, widths, activation, seed, class_names=dataset.class_names)
    x_all = np.stack([c.points for c in dataset.clouds])
    rng = np.random.default_rng(seed + 1)
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(v) for k, v in model.params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(x_all))
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            xb = x_all[idx]
            if jitter > 0:
                xb = xb + jitter * rng.standard_normal(xb.shape)
            yb = labels[idx]
            cache = model._forward(xb)
            probs = softmax(cache.logits)
            loss = float(-np.log(np.maximum(probs[np.arange(len(idx)), yb], 1e-300)).mean())
            if not np.isfinite(loss):
                raise TrainingError("training loss diverged (NaN); lower the step size")
            dlogits = probs.copy()
            dlogits[np.arange(len(idx)), yb] -= 1.0
            dlogits /= len(idx)
            _, grads = model._backward(cache, dlogits, {}, need_params=True)
            step += 1
            for k, g in grads.items():
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                mhat = m[k] / (1 - b1 ** step)
                vhat = v[k] / (1 - b2 ** step)
                model.params[k] -= lr * mhat / (np.sqrt(vhat) + eps)
            epoch_loss += loss * len(idx)
        losses.append(epoch_loss / len(x_all))
    train_acc = float(np.mean(model.predict(x_all) == labels))
    held_acc = float("nan")
    if heldout is not None:
        held_acc = float(np.mean(model.predict(np.stack([c.points for c in heldout.clouds])) == heldout.labels))
    log.info("toy classifier: train acc %.3f, held-out acc %.3f", train_acc, held_acc)
    return model, TrainingReport(train_acc, held_acc, losses)


# ---------------------------------------------------------------------------
# External process backend


class ExternalOracle:
    """Synchronous NDJSON request/response over a subprocess's stdin/stdout."""

    def __init__(self, command, timeout: float = 30.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self._proc = None
        self._lines: queue.Queue = queue.Queue()
        self._next_id = 0

    def _start(self):
        if self._proc is not None and self._proc.poll() is None:
            return
        try:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
            )
        except OSError as exc:
            raise OracleError(f"cannot start external oracle {self.command}: {exc}") from exc
        self._lines = queue.Queue()
        threading.Thread(target=self._pump, args=(self._proc.stdout, self._lines), daemon=True).start()

    @staticmethod
    def _pump(stream, sink):
        for line in stream:
            sink.put(line)
        sink.put(None)

    def request(self, points: np.ndarray, need_gradient: bool = True) -> dict:
        self._start()
        rid = self._next_id
        self._next_id += 1
        msg = {"id": rid, "points": np.asarray(points, dtype=float).tolist(), "need_gradient": bool(need_gradient)}
        try:
            self._proc.stdin.write(json.dumps(msg) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise OracleError(f"external oracle closed its input: {exc}") from exc
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            self.close()
            raise OracleError(f"external oracle timed out after {self.timeout} s") from None
        if line is None:
            raise OracleError("external oracle exited without replying")
        try:
            resp = json.loads(line)
        except json.JSONDecodeError as exc:
            raise OracleError(f"external oracle sent invalid JSON: {exc}") from exc
        if not isinstance(resp, dict) or resp.get("id") != rid:
            raise OracleError(f"external oracle reply id mismatch (expected {rid})")
        for key in ("loss", "ce_loss", "feature_norm", "class_scores"):
            if key not in resp:
                raise OracleError(f"external oracle reply lacks {key!r}")
        return resp

    def close(self):
        if self._proc is not None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(model: ToyClassifier, alpha: float, stdin, stdout) -> None:
    """Answer oracle requests for ``model`` until stdin closes (server side of the protocol)."""
    for line in stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        pts = np.asarray(req["points"], dtype=np.float64)
        label = int(model.predict(pts))
        loss, ce, fnorm, probs, dx, _ = model.loss_and_gradient(pts, label, alpha)
        resp = {
            "id": req["id"],
            "loss": loss,
            "ce_loss": ce,
            "feature_norm": fnorm,
            "class_scores": probs.tolist(),
            "gradient": dx.tolist() if req.get("need_gradient") else None,
        }
        stdout.write(json.dumps(resp) + "\n")
        stdout.flush()


# ---------------------------------------------------------------------------
# Oracle evaluation


def _points(cloud) -> np.ndarray:
    return np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)


def _scores(model, points: np.ndarray) -> np.ndarray:
    if isinstance(model, ToyClassifier):
        return softmax(model.logits(points))
    return np.asarray(model.request(points, need_gradient=False)["class_scores"], dtype=np.float64)


def _batch_ce(model, batch: np.ndarray, label: int) -> np.ndarray:
    if isinstance(model, ToyClassifier):
        return model.ce_losses(batch, label)
    return np.array([-np.log(max(_scores(model, b)[label], 1e-300)) for b in batch])


def pseudo_label(model, cloud) -> int:
    return int(np.argmax(_scores(model, _points(cloud))))


def zeroth_order_gradient(model, points: np.ndarray, label: int, directions: int = 64,
                          smoothing: float = 1e-3, seed: int = 0) -> np.ndarray:
    """(1/q) sum_u [CE(x + mu u) - CE(x - mu u)] / (2 mu) * u with Gaussian directions u."""
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((directions,) + points.shape)
    plus = _batch_ce(model, points[None] + smoothing * u, label)
    minus = _batch_ce(model, points[None] - smoothing * u, label)
    slopes = (plus - minus) / (2.0 * smoothing)
    return np.tensordot(slopes, u, axes=1) / directions


def evaluate(model, cloud, config: OracleConfig = OracleConfig(), label: Optional[int] = None,
             need_gradient: bool = True) -> OracleOutput:
    """Composite loss, its coordinate gradient and the class scores for one cloud.

    ``label`` defaults to the pseudo-label (the model's prediction on this
    input); pass it explicitly to keep it frozen across repeated evaluations.
    """
    pts = _points(cloud)
    mode = config.mode
    if mode == "external":
        if not isinstance(model, ExternalOracle):
            raise OracleError("external mode needs an ExternalOracle")
        resp = model.request(pts, need_gradient=need_gradient)
        scores = np.asarray(resp["class_scores"], dtype=np.float64)
        grad = resp.get("gradient")
        if need_gradient:
            if grad is None:
                raise OracleError("external oracle returned no gradient")
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != pts.shape:
                raise OracleError(f"external gradient has shape {grad.shape}, expected {pts.shape}")
        out = OracleOutput(float(resp["loss"]), float(resp["ce_loss"]), float(resp["feature_norm"]),
                           grad, int(np.argmax(scores)), scores,
                           int(np.argmax(scores)) if label is None else int(label))
    elif mode == "analytic":
        if not isinstance(model, ToyClassifier):
            raise OracleError("analytic mode needs a ToyClassifier")
        lbl = int(model.predict(pts)) if label is None else int(label)
        loss, ce, fnorm, probs, dx, _ = model.loss_and_gradient(pts, lbl, config.alpha, config.layer)
        out = OracleOutput(loss, ce, fnorm, dx if need_gradient else None, int(np.argmax(probs)), probs, lbl)
    else:
        scores = _scores(model, pts)
        lbl = int(np.argmax(scores)) if label is None else int(label)
        ce = float(-np.log(max(scores[lbl], 1e-300)))
        grad = None
        if need_gradient:
            grad = zeroth_order_gradient(model, pts, lbl, config.zo_directions, config.zo_smoothing, config.seed)
        # The feature term is unobservable in the black-box setting and is dropped.
        out = OracleOutput(ce, ce, 0.0, grad, int(np.argmax(scores)), scores, lbl)
    if not np.isfinite(out.loss) or (out.coord_gradient is not None and not np.isfinite(out.coord_gradient).all()):
        raise NumericError("oracle produced a non-finite loss or gradient")
    return out


def project_gradient_to_wavelets(coord_gradient: np.ndarray, ops, literal: bool = False) -> tuple:
    """dL/dpsi_s for s = 1..S, each (N, 3).

    By default this is the exact chain rule through the synthesis map used to
    reconstruct (T_s g for tight banks, T_s (W^T W)^-1 g for the pseudo-inverse).
    ``literal=True`` applies T_s alone regardless of the bank.
    """
    g = np.asarray(coord_gradient, dtype=np.float64)
    stacked = ops.analysis(g) if literal else ops.synthesis_adjoint(g)
    return tuple(stacked[1:])


def load_model(spec: str, timeout: float = 30.0):
    """Resolve an ``--oracle`` string: a model path, ``toy:<path>``, or ``external:<cmd>``."""
    if spec.startswith("external:"):
        return ExternalOracle(spec[len("external:"):], timeout)
    path = spec[len("toy:"):] if spec.startswith("toy:") else spec
    if not Path(path).exists():
        raise OracleError(f"model file {path} not found")
    return ToyClassifier.load(path)
