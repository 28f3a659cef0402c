"""Descriptor-level learners: XQDA, the discriminative null space, KISSME.

All of them produce a :class:`ProjectionModel`: subtract the training mean,
project with ``w`` and compare projections either with a Mahalanobis metric
(XQDA, KISSME) or Euclidean distance (NFST, plain Euclidean).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DataError, NumericError
from .metric import (DEFAULT_REGULARIZATION, MetricModel, ScatterPair, accumulate_scatter,
                     build_pairs, kissme_fit, metric_from_bytes, metric_to_bytes,
                     pairwise_sq_distances)

KINDS = ("EUCLIDEAN", "KISSME", "XQDA", "NFST")
_RANK_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class ProjectionModel:
    kind: str
    mean: np.ndarray | None = None     # (d,)
    w: np.ndarray | None = None        # (d, r); None means identity
    metric: MetricModel | None = None  # in the projected space
    meta: dict = field(default_factory=dict)

    @property
    def r(self) -> int | None:
        return None if self.w is None else self.w.shape[1]

    @property
    def dim(self) -> int | None:
        if self.w is not None:
            return self.w.shape[0]
        return None if self.mean is None else len(self.mean)


# -- scatter matrices --------------------------------------------------------


def _class_index(labels):
    classes, idx = np.unique(np.asarray(labels), return_inverse=True)
    return classes, idx.ravel()


def compute_scatters(X, labels) -> tuple[np.ndarray, np.ndarray]:
    """Between-class and within-class scatter sums, ``S_b + S_w = S_t``."""
    X = np.asarray(X, dtype=np.float64)
    classes, idx = _class_index(labels)
    if len(classes) < 2:
        raise DataError("need at least two classes")
    mu = X.mean(axis=0)
    counts = np.bincount(idx)
    sums = np.zeros((len(classes), X.shape[1]))
    np.add.at(sums, idx, X)
    means = sums / counts[:, None]
    Xw = X - means[idx]
    Mb = (means - mu) * np.sqrt(counts)[:, None]
    Sw = Xw.T @ Xw
    Sb = Mb.T @ Mb
    return (Sb + Sb.T) / 2, (Sw + Sw.T) / 2


def cross_view_scatters(A, ya, B, yb) -> tuple[np.ndarray, np.ndarray, int, int]:
    """Mean outer products of ``a_i - b_j`` over different- and same-identity pairs.

    Returns ``(extra, intra, n_extra, n_intra)``, computed in closed form
    from per-class sums instead of enumerating the ``len(A) * len(B)`` pairs.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    classes, idx = np.unique(np.concatenate([np.asarray(ya), np.asarray(yb)]), return_inverse=True)
    ia, ib = idx[:len(A)], idx[len(A):]
    c = len(classes)
    na_c = np.bincount(ia, minlength=c).astype(np.float64)
    nb_c = np.bincount(ib, minlength=c).astype(np.float64)
    Sa = np.zeros((c, A.shape[1]))
    Sb = np.zeros((c, B.shape[1]))
    np.add.at(Sa, ia, A)
    np.add.at(Sb, ib, B)
    sa, sb = A.sum(0), B.sum(0)

    total = len(B) * (A.T @ A) + len(A) * (B.T @ B) - np.outer(sa, sb) - np.outer(sb, sa)
    fa, fb = nb_c[ia], na_c[ib]
    same = (A.T * fa) @ A + (B.T * fb) @ B - Sa.T @ Sb - Sb.T @ Sa
    n_intra = int((na_c * nb_c).sum())
    n_extra = len(A) * len(B) - n_intra
    if n_intra == 0 or n_extra == 0:
        raise DataError("need both matching and non-matching cross-view pairs")
    intra = same / n_intra
    extra = (total - same) / n_extra
    return (extra + extra.T) / 2, (intra + intra.T) / 2, n_extra, n_intra


def generalized_eigen(S_b, S_w, target_dim=None):
    """Eigenpairs of ``S_b w = lambda S_w w`` sorted by decreasing eigenvalue.

    ``target_dim`` may be an int, ``"auto"`` (keep eigenvalues above 1, at
    least one) or None (keep all).
    """
    try:
        lam, V = scipy.linalg.eigh(S_b, S_w)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericError("generalized eigenproblem failed; S_w must be positive definite") from exc
    order = np.argsort(-lam, kind="stable")
    lam, V = lam[order], V[:, order]
    if target_dim == "auto":
        r = max(1, int((lam > 1).sum()))
    elif target_dim is None:
        r = len(lam)
    else:
        r = min(int(target_dim), len(lam))
        if r < 1:
            raise DataError("target_dim must be >= 1")
    return lam[:r], V[:, :r]


def _span_basis(Xc: np.ndarray):
    """Orthonormal basis of the row space of centered data, or None if full rank."""
    n, d = Xc.shape
    if n > d:
        return None
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    keep = s > _RANK_TOL * max(s[0], np.finfo(float).tiny) if s.size else s > 0
    return Vt[keep].T


def _ridge(S, eps):
    d = S.shape[0]
    scale = np.trace(S) / d if d else 0.0
    return S + eps * (scale if scale > 0 else 1.0) * np.eye(d)


# -- XQDA --------------------------------------------------------------------


def xqda_fit(descriptors_cam_a, descriptors_cam_b, labels_a, labels_b=None,
             target_dim="auto", regularization: float = DEFAULT_REGULARIZATION) -> ProjectionModel:
    """Cross-view quadratic discriminant analysis.

    Maximizes the ratio of extra-personal to intra-personal difference
    variance, then fits KISSME on the projected pair statistics.
    """
    A = np.asarray(descriptors_cam_a, dtype=np.float64)
    B = np.asarray(descriptors_cam_b, dtype=np.float64)
    labels_b = labels_a if labels_b is None else labels_b
    mean = np.vstack([A, B]).mean(axis=0)
    Ac, Bc = A - mean, B - mean
    Q = _span_basis(np.vstack([Ac, Bc]))
    if Q is not None:
        Ac, Bc = Ac @ Q, Bc @ Q
    extra, intra, n_e, n_i = cross_view_scatters(Ac, labels_a, Bc, labels_b)
    intra_reg = _ridge(intra, regularization)
    lam, V = generalized_eigen(extra, intra_reg, target_dim)
    scatter = ScatterPair(V.T @ intra_reg @ V, V.T @ extra @ V, n_i, n_e)
    scatter = ScatterPair((scatter.delta_p + scatter.delta_p.T) / 2,
                          (scatter.delta_n + scatter.delta_n.T) / 2, n_i, n_e)
    metric = kissme_fit(scatter, 0.0)
    W = V if Q is None else Q @ V
    return ProjectionModel("XQDA", mean, W, metric,
                           {"eigenvalues": lam.tolist(), "regularization": regularization})


def xqda_fit_views(X, ids, cameras, target_dim="auto",
                   regularization: float = DEFAULT_REGULARIZATION) -> ProjectionModel:
    """XQDA on descriptors from any number of cameras (all camera pairs pooled)."""
    X = np.asarray(X, dtype=np.float64)
    ids = np.asarray(ids)
    cameras = np.asarray(cameras)
    cams = np.unique(cameras)
    if len(cams) < 2:
        raise DataError("XQDA needs at least two cameras")
    if len(cams) == 2:
        a, b = cameras == cams[0], cameras == cams[1]
        return xqda_fit(X[a], X[b], ids[a], ids[b], target_dim, regularization)
    mean = X.mean(axis=0)
    Xc = X - mean
    Q = _span_basis(Xc)
    Z = Xc if Q is None else Xc @ Q
    d = Z.shape[1]
    E, I = np.zeros((d, d)), np.zeros((d, d))
    ne = ni = 0
    for i, ca in enumerate(cams):
        for cb in cams[i + 1:]:
            a, b = cameras == ca, cameras == cb
            try:
                e, s, n_e, n_i = cross_view_scatters(Z[a], ids[a], Z[b], ids[b])
            except DataError:
                continue
            E += e * n_e
            I += s * n_i
            ne += n_e
            ni += n_i
    if ne == 0 or ni == 0:
        raise DataError("no cross-view pairs")
    extra, intra_reg = E / ne, _ridge(I / ni, regularization)
    lam, V = generalized_eigen(extra, intra_reg, target_dim)
    pi, pe = V.T @ intra_reg @ V, V.T @ extra @ V
    metric = kissme_fit(ScatterPair((pi + pi.T) / 2, (pe + pe.T) / 2, ni, ne), 0.0)
    W = V if Q is None else Q @ V
    return ProjectionModel("XQDA", mean, W, metric,
                           {"eigenvalues": lam.tolist(), "regularization": regularization})


# -- null space --------------------------------------------------------------


def nfst_fit(descriptors, labels) -> ProjectionModel:
    """Discriminative null space of the within-class scatter.

    Works in the span of the centered training data, finds the directions
    there with zero within-class scatter, and keeps at most ``c - 1`` of
    them along which the class means spread.
    """
    X = np.asarray(descriptors, dtype=np.float64)
    classes, idx = _class_index(labels)
    c = len(classes)
    if c < 2:
        raise DataError("need at least two classes")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        raise NumericError("training data has no spread")
    tol = _RANK_TOL * s[0]
    Q = Vt[s > tol].T  # d x r_t, basis of the data span

    counts = np.bincount(idx)
    sums = np.zeros((c, X.shape[1]))
    np.add.at(sums, idx, X)
    means = sums / counts[:, None]
    Y = (X - means[idx]) @ Q
    _, sw, Vw = np.linalg.svd(Y, full_matrices=True)
    rank_w = int((sw > tol).sum())
    null = Vw[rank_w:].T
    if null.shape[1] == 0:
        raise DataError("no null direction: within-class scatter is full rank on the data span "
                        f"(n={len(X)}, c={c}, d={X.shape[1]})")
    W = Q @ null
    Mb = (means - mean) @ W
    _, sb, Vb = np.linalg.svd(Mb, full_matrices=False)
    keep = sb > _RANK_TOL * max(sb[0], np.finfo(float).tiny) if sb.size else []
    Vb = Vb[keep][: c - 1]
    if len(Vb) == 0:
        raise DataError("null space carries no between-class spread")
    W = W @ Vb.T
    W, _ = np.linalg.qr(W)
    return ProjectionModel("NFST", mean, W, None, {"null_dim": int(null.shape[1])})


# -- KISSME and Euclidean on descriptors -------------------------------------


def pca_basis(Xc: np.ndarray, dim: int) -> np.ndarray:
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    keep = s > _RANK_TOL * max(s[0], np.finfo(float).tiny) if s.size else []
    basis = Vt[keep]
    return basis[:dim].T


def kissme_descriptor_fit(X, ids, cameras, pca_dim: int = 100, n_negative_ratio: float = 10.0,
                          regularization: float = DEFAULT_REGULARIZATION, seed=0) -> ProjectionModel:
    """PCA followed by KISSME on cross-camera image pairs."""
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0)
    W = pca_basis(X - mean, pca_dim)
    Z = (X - mean) @ W
    pairs = build_pairs(ids, cameras, np.zeros(len(X), dtype=np.int64), n_negative_ratio, seed)
    metric = kissme_fit(accumulate_scatter(Z, pairs), regularization)
    return ProjectionModel("KISSME", mean, W, metric, {"pca_dim": int(W.shape[1])})


def euclidean_model() -> ProjectionModel:
    return ProjectionModel("EUCLIDEAN")


def fit_learner(kind: str, X, ids, cameras, *, target_dim="auto", pca_dim: int = 100,
                n_negative_ratio: float = 10.0, regularization: float = DEFAULT_REGULARIZATION,
                seed=0) -> ProjectionModel:
    kind = kind.upper()
    if kind == "EUCLIDEAN":
        return euclidean_model()
    if kind == "KISSME":
        return kissme_descriptor_fit(X, ids, cameras, pca_dim, n_negative_ratio, regularization, seed)
    if kind == "XQDA":
        return xqda_fit_views(X, ids, cameras, target_dim, regularization)
    if kind == "NFST":
        return nfst_fit(X, ids)
    raise DataError(f"unknown learner {kind!r}; expected one of {KINDS}")


# -- scoring -----------------------------------------------------------------


def project(model: ProjectionModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if model.dim is not None and X.shape[-1] != model.dim:
        raise DataError(f"descriptor dim {X.shape[-1]} does not match model dim {model.dim}")
    Z = X if model.mean is None else X - model.mean
    Z = Z if model.w is None else Z @ model.w
    if model.metric is not None:
        Z = Z @ model.metric.whitener.T
    return Z


def score(model: ProjectionModel, query, gallery_item) -> float:
    """Distance between two descriptors under ``model``; lower is more similar."""
    zq, zg = project(model, query), project(model, gallery_item)
    return float(np.linalg.norm(zq - zg))


def distance_matrix(model: ProjectionModel, Q, G) -> np.ndarray:
    return np.sqrt(pairwise_sq_distances(project(model, np.atleast_2d(Q)),
                                         project(model, np.atleast_2d(G))))


# -- file format -------------------------------------------------------------

PROJECTION_MAGIC = b"RBPROJ01"
_PROJ_HEAD = struct.Struct("<8s16sIIBBB")


def projection_to_bytes(model: ProjectionModel) -> bytes:
    d = model.dim or 0
    r = model.r or 0
    meta = json.dumps(model.meta, sort_keys=True).encode()
    parts = [_PROJ_HEAD.pack(PROJECTION_MAGIC, model.kind.encode().ljust(16), d, r,
                             model.mean is not None, model.w is not None, model.metric is not None)]
    if model.mean is not None:
        parts.append(np.ascontiguousarray(model.mean, dtype="<f8").tobytes())
    if model.w is not None:
        parts.append(np.ascontiguousarray(model.w, dtype="<f8").tobytes())
    if model.metric is not None:
        parts.append(metric_to_bytes(model.metric))
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    return b"".join(parts)


def projection_from_bytes(data: bytes) -> ProjectionModel:
    magic, kind, d, r, has_mean, has_w, has_metric = _PROJ_HEAD.unpack_from(data)
    if magic != PROJECTION_MAGIC:
        raise DataError("not a projection model file")
    pos = _PROJ_HEAD.size
    mean = w = metric = None
    if has_mean:
        mean = np.frombuffer(data, "<f8", d, pos).copy()
        pos += d * 8
    if has_w:
        w = np.frombuffer(data, "<f8", d * r, pos).reshape(d, r).copy()
        pos += d * r * 8
    if has_metric:
        metric, pos = metric_from_bytes(data, pos)
    (n,) = struct.unpack_from("<I", data, pos)
    meta = json.loads(data[pos + 4:pos + 4 + n].decode())
    return ProjectionModel(kind.rstrip(b" ").decode(), mean, w, metric, meta)


def save_projection(model: ProjectionModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(projection_to_bytes(model))


def load_projection(path) -> ProjectionModel:
    with open(path, "rb") as fh:
        return projection_from_bytes(fh.read())
