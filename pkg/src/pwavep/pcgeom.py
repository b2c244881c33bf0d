"""Point clouds, symmetrized K-NN graphs, Laplacians and point-cloud file I/O."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import DataError, GraphError, InvalidParameterError, ParseError

FORMATS = ("xyz-text", "ply-ascii", "csv")
_EXTENSIONS = {".xyz": "xyz-text", ".txt": "xyz-text", ".ply": "ply-ascii", ".csv": "csv"}


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    """N points in model units with stable integer ids.

    Ids survive removal: ``remove_ids`` never renumbers the survivors.
    """

    points: np.ndarray
    ids: np.ndarray = None
    label: Optional[int] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DataError(f"points must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise DataError("a point cloud needs at least one point")
        bad = ~np.isfinite(pts).all(axis=1)
        if bad.any():
            raise DataError(f"non-finite coordinate in row {int(np.argmax(bad))}")
        ids = np.arange(len(pts)) if self.ids is None else np.asarray(self.ids)
        if ids.shape != (len(pts),):
            raise DataError("ids must be one per point")
        ids = ids.astype(np.int64)
        if len(np.unique(ids)) != len(ids):
            raise DataError("point ids must be unique")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "ids", _frozen(ids))
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))

    def __len__(self):
        return self.points.shape[0]

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        """Same ids and label, new coordinates."""
        return PointCloud(points, self.ids, self.label)

    def remove_ids(self, ids) -> "PointCloud":
        keep = ~np.isin(self.ids, np.asarray(list(ids), dtype=np.int64))
        return PointCloud(self.points[keep], self.ids[keep], self.label)

    def select(self, mask_or_index) -> "PointCloud":
        return PointCloud(self.points[mask_or_index], self.ids[mask_or_index], self.label)

    def append(self, points: np.ndarray) -> "PointCloud":
        """Append points with fresh ids above the current maximum."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        start = int(self.ids.max()) + 1
        new_ids = np.arange(start, start + len(points))
        return PointCloud(
            np.vstack([self.points, points]), np.concatenate([self.ids, new_ids]), self.label
        )

    def index_of(self, ids) -> np.ndarray:
        """Row positions of the given ids."""
        lookup = {int(v): i for i, v in enumerate(self.ids)}
        try:
            return np.array([lookup[int(v)] for v in ids], dtype=np.int64)
        except KeyError as exc:
            raise InvalidParameterError(f"unknown point id {exc.args[0]}") from None


@dataclass(frozen=True)
class KnnGraph:
    n: int
    k: int
    adjacency: sp.csr_matrix
    degrees: np.ndarray

    def neighbors(self, i: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[i]:a.indptr[i + 1]]

    @property
    def edge_count(self) -> int:
        return int(self.adjacency.nnz // 2)

    def is_connected(self) -> bool:
        ncomp, _ = connected_components(self.adjacency, directed=False)
        return ncomp == 1


@dataclass(frozen=True)
class LaplacianPair:
    combinatorial: sp.csr_matrix
    normalized: sp.csr_matrix
    lambda_max_estimate: float
    degrees: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.combinatorial.shape[0]


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Exact differences, not the |a|^2 - 2ab + |b|^2 expansion: ties must compare equal.
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def knn_indices(points: np.ndarray, ids: np.ndarray, k: int, chunk: int = 256) -> np.ndarray:
    """Row indices of the k nearest other points, ties broken by lower id.

    Brute force in row chunks, O(N^2) time and O(chunk * N) memory.
    """
    n = len(points)
    out = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d = _pairwise_sq(points[start:stop], points)
        d[np.arange(stop - start), np.arange(start, stop)] = np.inf
        kth = np.partition(d, k - 1, axis=1)[:, k - 1]
        for r in range(stop - start):
            cand = np.flatnonzero(d[r] <= kth[r])
            order = np.lexsort((ids[cand], d[r, cand]))
            out[start + r] = cand[order[:k]]
    return out


def build_knn_graph(cloud: PointCloud, k: int = 20) -> KnnGraph:
    """Unweighted K-NN graph symmetrized by union (edge if either end selects the other)."""
    n = cloud.n
    if k < 1 or k >= n:
        raise InvalidParameterError(f"k must satisfy 1 <= k < N (k={k}, N={n})")
    nbrs = knn_indices(cloud.points, cloud.ids, k)
    rows = np.repeat(np.arange(n), k)
    directed = sp.csr_matrix((np.ones(n * k, dtype=np.int64), (rows, nbrs.ravel())), shape=(n, n))
    adj = ((directed + directed.T) > 0).astype(np.int64).tocsr()
    adj.sort_indices()
    degrees = np.asarray(adj.sum(axis=1)).ravel().astype(np.int64)
    return KnnGraph(n=n, k=k, adjacency=adj, degrees=degrees)


def graph_from_adjacency(adjacency, k: Optional[int] = None) -> KnnGraph:
    """Wrap an arbitrary symmetric 0/1 adjacency matrix (small hand-built graphs, tests)."""
    adj = sp.csr_matrix(adjacency, dtype=np.int64)
    if (adj != adj.T).nnz:
        raise GraphError("adjacency must be symmetric")
    if adj.diagonal().any():
        raise GraphError("adjacency must have a zero diagonal")
    adj.sort_indices()
    degrees = np.asarray(adj.sum(axis=1)).ravel().astype(np.int64)
    return KnnGraph(n=adj.shape[0], k=k if k is not None else int(degrees.min()), adjacency=adj, degrees=degrees)


def power_iteration_lambda_max(matrix, iters: int = 1000, tol: float = 1e-10, seed: int = 0) -> float:
    """Rayleigh-quotient estimate of the largest eigenvalue of a PSD matrix."""
    n = matrix.shape[0]
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = matrix @ v
        new = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(new - est) <= tol * max(1.0, abs(new)):
            est = new
            break
        est = new
    return est


def build_laplacians(graph: KnnGraph, safety: float = 1.01) -> LaplacianPair:
    """L = D - A and L_hat = I - D^-1/2 A D^-1/2, plus a safe upper bound on lambda_max(L_hat)."""
    deg = graph.degrees
    if (deg < 1).any():
        raise GraphError(f"node {int(np.argmin(deg))} is isolated; cannot normalize")
    adj = graph.adjacency
    lap = (sp.diags(deg) - adj).tocsr()
    inv_sqrt = sp.diags(1.0 / np.sqrt(deg.astype(np.float64)))
    norm = (sp.identity(graph.n, format="csr") - inv_sqrt @ adj.astype(np.float64) @ inv_sqrt).tocsr()
    norm = ((norm + norm.T) * 0.5).tocsr()
    lmax = min(2.0, safety * power_iteration_lambda_max(norm))
    return LaplacianPair(combinatorial=lap, normalized=norm, lambda_max_estimate=lmax, degrees=deg)


# ---------------------------------------------------------------------------
# File I/O


def infer_format(path) -> str:
    ext = Path(path).suffix.lower()
    if ext not in _EXTENSIONS:
        raise DataError(f"cannot infer point-cloud format from extension {ext!r}")
    return _EXTENSIONS[ext]


def _parse_float(token: str, line: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"not a number: {token!r}", line) from None
    if not math.isfinite(value):
        raise DataError(f"line {line}: non-finite value {token!r}")
    return value


def _has_default_ids(cloud: PointCloud) -> bool:
    return bool(np.array_equal(cloud.ids, np.arange(cloud.n)))


def _load_xyz(text: str):
    pts, ids = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) not in (3, 4):
            raise ParseError(f"expected 'x y z' (optionally followed by an id), got {len(tok)} fields", lineno)
        pts.append([_parse_float(t, lineno) for t in tok[:3]])
        if len(tok) == 4:
            try:
                ids.append(int(tok[3]))
            except ValueError:
                raise ParseError(f"bad point id {tok[3]!r}", lineno) from None
    if ids and len(ids) != len(pts):
        raise ParseError("either every row or no row may carry an id")
    return pts, ids or None


def _load_csv(text: str):
    reader = csv.reader(io.StringIO(text))
    header = None
    pts, ids = [], []
    for lineno, row in enumerate(reader, start=1):
        if not row or not "".join(row).strip():
            continue
        if header is None:
            header = [h.strip().lower() for h in row]
            if header not in (["x", "y", "z"], ["id", "x", "y", "z"]):
                raise ParseError(f"csv header must be x,y,z or id,x,y,z, got {','.join(row)}", lineno)
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
        vals = dict(zip(header, (c.strip() for c in row)))
        pts.append([_parse_float(vals[a], lineno) for a in "xyz"])
        if "id" in vals:
            try:
                ids.append(int(vals["id"]))
            except ValueError:
                raise ParseError(f"bad point id {vals['id']!r}", lineno) from None
    if header is None:
        raise ParseError("empty csv file")
    return pts, ids or None


def _load_ply(text: str):
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1)
    elements = []  # (name, count, [props])
    body_start = None
    for lineno, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise ParseError("only ascii ply is supported", lineno)
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError("malformed element line", lineno)
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before element", lineno)
            elements[-1][2].append(tok[-1])
        elif tok[0] == "end_header":
            body_start = lineno
            break
        else:
            raise ParseError(f"unexpected header keyword {tok[0]!r}", lineno)
    if body_start is None:
        raise ParseError("missing end_header")
    pts, ids = [], []
    cursor = body_start  # 0-based index of first body line == 1-based header end
    for name, count, props in elements:
        for _ in range(count):
            lineno = cursor + 1
            if cursor >= len(lines):
                raise ParseError(f"unexpected end of file in element {name!r}", lineno)
            tok = lines[cursor].split()
            cursor += 1
            if name != "vertex":
                continue
            if len(tok) < len(props):
                raise ParseError(f"expected {len(props)} vertex fields, got {len(tok)}", lineno)
            row = dict(zip(props, tok))
            try:
                pts.append([_parse_float(row[a], lineno) for a in "xyz"])
            except KeyError:
                raise ParseError("vertex element lacks x/y/z properties", lineno) from None
            if "id" in row:
                ids.append(int(row["id"]))
    return pts, ids or None


def load_cloud(path, format: Optional[str] = None, label: Optional[int] = None) -> PointCloud:
    fmt = format or infer_format(path)
    text = Path(path).read_text()
    loaders = {"xyz-text": _load_xyz, "csv": _load_csv, "ply-ascii": _load_ply}
    if fmt not in loaders:
        raise DataError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    pts, ids = loaders[fmt](text)
    if not pts:
        raise DataError(f"{path}: no points")
    return PointCloud(np.array(pts, dtype=np.float64), ids, label)


def format_cloud(cloud: PointCloud, format: str) -> str:
    with_ids = not _has_default_ids(cloud)
    rows = []
    for pid, (x, y, z) in zip(cloud.ids, cloud.points):
        rows.append((repr(float(x)), repr(float(y)), repr(float(z)), str(int(pid))))
    if format == "xyz-text":
        return "".join(" ".join(r if with_ids else r[:3]) + "\n" for r in rows)
    if format == "csv":
        head = "id,x,y,z\n" if with_ids else "x,y,z\n"
        return head + "".join(",".join((r[3],) + r[:3] if with_ids else r[:3]) + "\n" for r in rows)
    if format == "ply-ascii":
        props = "property double x\nproperty double y\nproperty double z\n"
        if with_ids:
            props += "property int id\n"
        head = f"ply\nformat ascii 1.0\nelement vertex {cloud.n}\n{props}end_header\n"
        return head + "".join(" ".join(r if with_ids else r[:3]) + "\n" for r in rows)
    raise DataError(f"unknown format {format!r}; expected one of {FORMATS}")


def save_cloud(cloud: PointCloud, path, format: Optional[str] = None) -> None:
    fmt = format or infer_format(path)
    Path(path).write_text(format_cloud(cloud, fmt))
