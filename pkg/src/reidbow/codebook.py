"""Visual-word codebooks clustered under a learned Mahalanobis metric."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import DataError, NumericError
from .features import Channel
from .metric import (MetricModel, identity_metric, metric_from_bytes, metric_to_bytes,
                     pairwise_sq_distances, whiten)

DEFAULT_K = 350
DEFAULT_MA = 10
MAX_ITERS = 100
TOL = 1e-4


@dataclass(frozen=True, eq=False)
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    inertia: float
    history: list
    n_iter: int


@dataclass(frozen=True, eq=False)
class Codebook:
    channel: Channel | None
    words: np.ndarray          # k x d, original feature space
    metric: MetricModel
    inertia: float = float("nan")
    history: list = field(default_factory=list)
    labels: np.ndarray | None = None  # training assignments; not persisted

    @property
    def k(self) -> int:
        return self.words.shape[0]

    @property
    def dim(self) -> int:
        return self.words.shape[1]

    @property
    def whitened_words(self) -> np.ndarray:
        cached = self.__dict__.get("_ww")
        if cached is None:
            cached = whiten(self.metric, self.words)
            object.__setattr__(self, "_ww", cached)
        return cached


def cluster_sums(X: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    n = len(labels)
    onehot = sparse.csr_matrix((np.ones(n), (labels, np.arange(n))), shape=(k, n))
    return np.asarray(onehot @ X)


def kmeans_plusplus(Z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """D^2-weighted seeding; returns the chosen row indices."""
    n = len(Z)
    chosen = [int(rng.integers(n))]
    d2 = ((Z - Z[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rest[rng.integers(len(rest))])
        else:
            cum = np.cumsum(d2)
            idx = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
            idx = min(idx, n - 1)
        chosen.append(idx)
        d2 = np.minimum(d2, ((Z - Z[idx]) ** 2).sum(1))
    return np.array(chosen)


def _reseed_empty(Z, centers, labels, dmin, counts):
    empty = np.flatnonzero(counts == 0)
    if len(empty) == 0:
        return centers
    # Farthest points from their own centers, largest first.
    far = np.argsort(-dmin, kind="stable")
    for c, idx in zip(empty, far):
        centers[c] = Z[idx]
    return centers


def kmeans(Z, k: int, max_iters: int = MAX_ITERS, tol: float = TOL, seed=0) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding in plain Euclidean space.

    Stops once the relative change of inertia drops below ``tol``. Empty
    clusters are moved onto the points farthest from their centers.
    """
    Z = np.asarray(Z, dtype=np.float64)
    n = len(Z)
    if k < 1 or n < k:
        raise DataError(f"need at least k={k} points, got {n}")
    if not np.all(np.isfinite(Z)):
        raise NumericError("non-finite features")
    rng = np.random.default_rng(seed)
    centers = Z[kmeans_plusplus(Z, k, rng)].copy()
    history = []
    it = 0
    while True:
        D = pairwise_sq_distances(Z, centers)
        labels = D.argmin(axis=1)
        dmin = D[np.arange(n), labels]
        inertia = float(dmin.sum())
        history.append(inertia)
        it += 1
        if len(history) > 1:
            prev = history[-2]
            if abs(prev - inertia) <= tol * max(prev, np.finfo(float).tiny):
                break
        if it >= max_iters:
            break
        counts = np.bincount(labels, minlength=k)
        sums = cluster_sums(Z, labels, k)
        nz = counts > 0
        centers = centers.copy()
        centers[nz] = sums[nz] / counts[nz, None]
        centers = _reseed_empty(Z, centers, labels, dmin, counts)
    return KMeansResult(centers, labels, inertia, history, it)


def fit_kmeans(features, k: int = DEFAULT_K, metric: MetricModel | None = None,
               max_iters: int = MAX_ITERS, tol: float = TOL, seed=0,
               channel=None) -> Codebook:
    """Cluster ``features`` into ``k`` visual words under ``metric``.

    Clustering runs on the whitened features. Words are the original-space
    means of each final cluster's members.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise DataError("features must be an n x d matrix")
    if not np.all(np.isfinite(X)):
        raise NumericError("non-finite features")
    metric = metric or identity_metric(X.shape[1])
    res = kmeans(whiten(metric, X), k, max_iters, tol, seed)
    counts = np.bincount(res.labels, minlength=k)
    sums = cluster_sums(X, res.labels, k)
    words = np.empty_like(sums)
    nz = counts > 0
    words[nz] = sums[nz] / counts[nz, None]
    if not nz.all():
        # Only reachable with duplicate points; fall back to the whitened center.
        words[~nz] = res.centers[~nz] @ np.linalg.pinv(metric.whitener.T)
    return Codebook(Channel(channel) if channel is not None else None, words, metric,
                    res.inertia, res.history, res.labels)


def encode_ma(codebook: Codebook, feature, ma: int = DEFAULT_MA) -> list[tuple[int, int]]:
    """The ``ma`` nearest words under the codebook metric, each with TF weight 1."""
    f = np.asarray(feature, dtype=np.float64)
    if f.shape != (codebook.dim,):
        raise DataError(f"feature dim {f.shape} does not match codebook dim {codebook.dim}")
    if not 1 <= ma <= codebook.k:
        raise DataError(f"ma must be in [1, {codebook.k}]")
    diff = codebook.whitened_words - whiten(codebook.metric, f)
    d = np.sqrt((diff * diff).sum(1))
    order = np.argsort(d, kind="stable")[:ma]
    return [(int(w), 1) for w in order]


def encode_ma_batch(codebook: Codebook, X, ma: int = DEFAULT_MA) -> np.ndarray:
    """Row-wise ``encode_ma``: (n, ma) word indices, nearest first."""
    X = np.asarray(X, dtype=np.float64).reshape(-1, codebook.dim)
    if not 1 <= ma <= codebook.k:
        raise DataError(f"ma must be in [1, {codebook.k}]")
    if len(X) == 0:
        return np.empty((0, ma), dtype=np.int64)
    D = pairwise_sq_distances(whiten(codebook.metric, X), codebook.whitened_words)
    if ma < codebook.k:
        part = np.argpartition(D, ma - 1, axis=1)[:, :ma]
        # argpartition breaks ties arbitrarily; widen to every word tied with the
        # ma-th distance and finish with a stable sort.
        kth = np.take_along_axis(D, part, 1).max(axis=1, keepdims=True)
        if np.any((D <= kth).sum(1) > ma):
            order = np.argsort(D, axis=1, kind="stable")[:, :ma]
            return order.astype(np.int64)
        sub = np.take_along_axis(D, part, 1)
        idx = np.lexsort((part, sub))
        return np.take_along_axis(part, idx, 1).astype(np.int64)
    return np.argsort(D, axis=1, kind="stable").astype(np.int64)


# -- file format -------------------------------------------------------------

CODEBOOK_MAGIC = b"RBCODE01"
_CODE_HEAD = struct.Struct("<8s8sII")


def codebook_to_bytes(cb: Codebook) -> bytes:
    tag = (cb.channel.value if cb.channel is not None else "").encode().ljust(8)
    return b"".join([
        _CODE_HEAD.pack(CODEBOOK_MAGIC, tag, cb.k, cb.dim),
        np.ascontiguousarray(cb.words, dtype="<f8").tobytes(),
        metric_to_bytes(cb.metric),
    ])


def codebook_from_bytes(data: bytes) -> Codebook:
    magic, tag, k, d = _CODE_HEAD.unpack_from(data)
    if magic != CODEBOOK_MAGIC:
        raise DataError("not a codebook file")
    pos = _CODE_HEAD.size
    words = np.frombuffer(data, "<f8", k * d, pos).reshape(k, d).copy()
    metric, _ = metric_from_bytes(data, pos + k * d * 8)
    tag = tag.rstrip(b" ").decode()
    return Codebook(Channel(tag) if tag else None, words, metric)


def save_codebook(cb: Codebook, path) -> None:
    with open(path, "wb") as fh:
        fh.write(codebook_to_bytes(cb))


def load_codebook(path) -> Codebook:
    with open(path, "rb") as fh:
        return codebook_from_bytes(fh.read())
