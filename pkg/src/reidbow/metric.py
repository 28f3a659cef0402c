"""KISSME Mahalanobis metrics learned from strip-constrained feature pairs."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError

DEFAULT_REGULARIZATION = 1e-3
_ENUMERATE_LIMIT = 4_000_000


@dataclass(frozen=True, eq=False)
class PairSet:
    positives: np.ndarray  # (|P|, 2) row indices
    negatives: np.ndarray  # (|N|, 2)
    strip_constrained: bool = True


@dataclass(frozen=True, eq=False)
class ScatterPair:
    delta_p: np.ndarray
    delta_n: np.ndarray
    count_p: int
    count_n: int


@dataclass(frozen=True, eq=False)
class MetricModel:
    """PSD matrix ``m`` with whitener ``L`` such that ``L.T @ L == m``."""

    m: np.ndarray
    whitener: np.ndarray
    eigen_floor: float = 0.0
    regularization: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.m.shape[0]


# -- pairs -------------------------------------------------------------------


def _codes(values) -> np.ndarray:
    return np.unique(np.asarray(values), return_inverse=True)[1].ravel().astype(np.int64)


def _group_bounds(keys_sorted: np.ndarray):
    cuts = np.flatnonzero(np.diff(keys_sorted)) + 1
    return np.concatenate([[0], cuts]), np.concatenate([cuts, [len(keys_sorted)]])


def _positive_pairs(id_code, camera, strip, strip_constrained):
    n_ids = int(id_code.max()) + 1
    key = (strip if strip_constrained else np.zeros_like(strip)) * n_ids + id_code
    order = np.lexsort((camera, key))
    starts, ends = _group_bounds(key[order])
    out = []
    for s, e in zip(starts, ends):
        rows = order[s:e]
        cams = camera[rows]
        ucams = np.unique(cams)
        for ia, ca in enumerate(ucams):
            ra = rows[cams == ca]
            for cb in ucams[ia + 1:]:
                rb = rows[cams == cb]
                aa, bb = np.meshgrid(ra, rb, indexing="ij")
                out.append(np.stack([aa.ravel(), bb.ravel()], axis=1))
    if not out:
        return np.empty((0, 2), dtype=np.int64)
    return np.concatenate(out).astype(np.int64)


def _tri_decode(t: np.ndarray, m: int):
    """Invert the row-major enumeration of pairs i < j of ``m`` items."""
    t = np.asarray(t, dtype=np.int64)
    b = 2 * m - 1
    i = np.floor((b - np.sqrt(np.maximum(b * b - 8.0 * t, 0.0))) / 2).astype(np.int64)
    start = lambda k: k * (2 * m - k - 1) // 2  # noqa: E731
    i = np.where(start(i) > t, i - 1, i)
    i = np.where(start(i + 1) <= t, i + 1, i)
    j = t - start(i) + i + 1
    return i, j


def _negative_pairs(id_code, strip, strip_constrained, target, rng):
    key = strip if strip_constrained else np.zeros_like(strip)
    order = np.lexsort((id_code, key))
    starts, ends = _group_bounds(key[order])
    groups = [order[s:e] for s, e in zip(starts, ends)]
    sizes = np.array([len(g) for g in groups], dtype=np.int64)
    totals = sizes * (sizes - 1) // 2
    cross = []
    for g in groups:
        _, cnt = np.unique(id_code[g], return_counts=True)
        cross.append(len(g) * (len(g) - 1) // 2 - int((cnt * (cnt - 1) // 2).sum()))
    n_cross = int(sum(cross))
    if n_cross == 0 or target == 0:
        return np.empty((0, 2), dtype=np.int64)
    target = min(target, n_cross)

    if totals.sum() <= _ENUMERATE_LIMIT:
        cand = []
        for g in groups:
            iu, ju = np.triu_indices(len(g), 1)
            keep = id_code[g[iu]] != id_code[g[ju]]
            cand.append(np.stack([g[iu[keep]], g[ju[keep]]], axis=1))
        cand = np.concatenate(cand)
        pick = np.sort(rng.choice(len(cand), size=target, replace=False))
        return cand[pick].astype(np.int64)

    # Rejection sampling over all same-strip pairs; uniform over cross-id pairs.
    offsets = np.concatenate([[0], np.cumsum(totals)])
    chosen: set[int] = set()
    while len(chosen) < target:
        need = target - len(chosen)
        t = rng.integers(0, offsets[-1], size=max(2 * need, 1024))
        gi = np.searchsorted(offsets, t, side="right") - 1
        keep = np.zeros(len(t), dtype=bool)
        for g in np.unique(gi):
            sel = gi == g
            i, j = _tri_decode(t[sel] - offsets[g], len(groups[g]))
            rows = groups[g]
            keep[sel] = id_code[rows[i]] != id_code[rows[j]]
        for v in t[keep].tolist():
            if len(chosen) >= target:
                break
            chosen.add(v)
    t = np.array(sorted(chosen), dtype=np.int64)
    gi = np.searchsorted(offsets, t, side="right") - 1
    out = np.empty((len(t), 2), dtype=np.int64)
    for g in np.unique(gi):
        sel = gi == g
        i, j = _tri_decode(t[sel] - offsets[g], len(groups[g]))
        out[sel, 0] = groups[g][i]
        out[sel, 1] = groups[g][j]
    return out


def build_pairs(ids, cameras, strips, n_negative_ratio: float = 1.0, seed=0,
                strip_constrained: bool = True) -> PairSet:
    """Positive and negative pairs over feature rows tagged with id/camera/strip.

    Positives are every cross-camera, same-identity pair within a strip.
    Negatives are a uniform sample, without replacement, of unordered
    different-identity pairs within a strip, sized ``n_negative_ratio``
    times the positives (or all of them if fewer exist).
    """
    id_code = _codes(ids)
    camera = np.asarray(cameras, dtype=np.int64)
    strip = np.asarray(strips, dtype=np.int64)
    if not (len(id_code) == len(camera) == len(strip)):
        raise DataError("ids, cameras and strips must have equal length")
    if len(id_code) == 0:
        raise DataError("no features to pair")
    pos = _positive_pairs(id_code, camera, strip, strip_constrained)
    if len(pos) == 0:
        raise DataError("no positive pairs: need an identity seen by two cameras")
    target = max(1, int(round(n_negative_ratio * len(pos))))
    neg = _negative_pairs(id_code, strip, strip_constrained, target,
                          np.random.default_rng(seed))
    if len(neg) == 0:
        raise DataError("no negative pairs: need at least two identities")
    return PairSet(pos, neg, strip_constrained)


# -- scatter and fitting -----------------------------------------------------


def _mean_outer(X: np.ndarray, pairs: np.ndarray, chunk: int = 1 << 16) -> np.ndarray:
    d = X.shape[1]
    acc = np.zeros((d, d))
    for s in range(0, len(pairs), chunk):
        p = pairs[s:s + chunk]
        D = X[p[:, 0]] - X[p[:, 1]]
        acc += D.T @ D
    acc /= len(pairs)
    return (acc + acc.T) / 2.0


def accumulate_scatter(X, pairs: PairSet) -> ScatterPair:
    """Mean outer products of pair differences over P and over N."""
    X = np.asarray(X, dtype=np.float64)
    if len(pairs.positives) == 0 or len(pairs.negatives) == 0:
        raise DataError("scatter needs non-empty positive and negative pair sets")
    return ScatterPair(_mean_outer(X, pairs.positives), _mean_outer(X, pairs.negatives),
                       len(pairs.positives), len(pairs.negatives))


def _check_symmetric(a: np.ndarray, name: str):
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DataError(f"{name} must be square")
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} has non-finite entries")
    tol = 1e-10 * max(1.0, float(np.abs(a).max()))
    if np.abs(a - a.T).max() > tol:
        raise DataError(f"{name} is not symmetric")


def _ridge_inverse(a: np.ndarray, eps: float) -> np.ndarray:
    d = a.shape[0]
    reg = a + eps * (np.trace(a) / d) * np.eye(d) if eps > 0 else a
    try:
        inv = np.linalg.inv(reg)
    except np.linalg.LinAlgError as exc:
        raise NumericError("scatter matrix is singular; increase regularization") from exc
    if not np.all(np.isfinite(inv)):
        raise NumericError("scatter inverse is not finite")
    return inv


def kissme_matrix(scatter: ScatterPair, regularization: float = DEFAULT_REGULARIZATION) -> np.ndarray:
    """Unprojected ``inv(delta_p) - inv(delta_n)`` with trace-scaled ridge."""
    if regularization < 0:
        raise DataError("regularization must be >= 0")
    _check_symmetric(scatter.delta_p, "delta_p")
    _check_symmetric(scatter.delta_n, "delta_n")
    m = _ridge_inverse(scatter.delta_p, regularization) - _ridge_inverse(scatter.delta_n, regularization)
    return (m + m.T) / 2.0


def kissme_fit(scatter: ScatterPair, regularization: float = DEFAULT_REGULARIZATION) -> MetricModel:
    raw = kissme_matrix(scatter, regularization)
    model = psd_project(raw)
    return MetricModel(model.m, model.whitener, model.eigen_floor, regularization,
                       {"count_p": scatter.count_p, "count_n": scatter.count_n})


def psd_project(m, eigen_floor: float = 0.0) -> MetricModel:
    """Nearest PSD matrix in Frobenius norm, by clamping negative eigenvalues.

    The whitener is the symmetric square root ``U sqrt(Lambda) U^T`` of the
    clamped decomposition.
    """
    m = np.asarray(m, dtype=np.float64)
    _check_symmetric(m, "metric")
    try:
        w, U = np.linalg.eigh((m + m.T) / 2.0)
    except np.linalg.LinAlgError as exc:
        raise NumericError("eigendecomposition failed") from exc
    w = np.where(w < eigen_floor, 0.0, w)
    out = (U * w) @ U.T
    L = (U * np.sqrt(w)) @ U.T
    return MetricModel((out + out.T) / 2.0, (L + L.T) / 2.0, eigen_floor)


def identity_metric(d: int) -> MetricModel:
    return MetricModel(np.eye(d), np.eye(d), 0.0, None, {"kind": "identity"})


def fit_channel_metric(X, ids, cameras, strips, n_negative_ratio=1.0,
                       regularization=DEFAULT_REGULARIZATION, seed=0) -> MetricModel:
    pairs = build_pairs(ids, cameras, strips, n_negative_ratio, seed)
    return kissme_fit(accumulate_scatter(X, pairs), regularization)


# -- distances ---------------------------------------------------------------


def _check_dim(model: MetricModel, *vs):
    for v in vs:
        if np.shape(v)[-1] != model.dim:
            raise DataError(f"vector dim {np.shape(v)[-1]} does not match metric dim {model.dim}")


def whiten(model: MetricModel, x) -> np.ndarray:
    """Map ``x`` (a vector or rows of a matrix) to ``L x``."""
    x = np.asarray(x, dtype=np.float64)
    _check_dim(model, x)
    return x @ model.whitener.T


def mahalanobis_distance(model: MetricModel, x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_dim(model, x, y)
    return float(np.linalg.norm(model.whitener @ (x - y)))


def pairwise_sq_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows, clipped at 0."""
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


# -- model file --------------------------------------------------------------

METRIC_MAGIC = b"RBMETR01"
_METRIC_HEAD = struct.Struct("<8sI")


def metric_to_bytes(model: MetricModel) -> bytes:
    d = model.dim
    meta = json.dumps(model.meta, sort_keys=True).encode()
    eps = np.nan if model.regularization is None else float(model.regularization)
    return b"".join([
        _METRIC_HEAD.pack(METRIC_MAGIC, d),
        np.ascontiguousarray(model.m, dtype="<f8").tobytes(),
        np.ascontiguousarray(model.whitener, dtype="<f8").tobytes(),
        struct.pack("<ddI", eps, model.eigen_floor, len(meta)),
        meta,
    ])


def metric_from_bytes(data: bytes, offset: int = 0) -> tuple[MetricModel, int]:
    """Decode a metric blob at ``offset``; returns the model and the end offset."""
    magic, d = _METRIC_HEAD.unpack_from(data, offset)
    if magic != METRIC_MAGIC:
        raise DataError("not a metric model blob")
    pos = offset + _METRIC_HEAD.size
    n = d * d * 8
    m = np.frombuffer(data, "<f8", d * d, pos).reshape(d, d).copy()
    L = np.frombuffer(data, "<f8", d * d, pos + n).reshape(d, d).copy()
    pos += 2 * n
    eps, floor, meta_len = struct.unpack_from("<ddI", data, pos)
    pos += struct.calcsize("<ddI")
    meta = json.loads(data[pos:pos + meta_len].decode())
    pos += meta_len
    return MetricModel(m, L, floor, None if np.isnan(eps) else eps, meta), pos


def save_metric(model: MetricModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(metric_to_bytes(model))


def load_metric(path) -> MetricModel:
    with open(path, "rb") as fh:
        return metric_from_bytes(fh.read())[0]
