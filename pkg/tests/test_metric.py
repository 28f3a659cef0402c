import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from reidbow import metric as mt
from reidbow.errors import DataError, NumericError
from reidbow.metric import (MetricModel, PairSet, ScatterPair, accumulate_scatter, build_pairs,
                            identity_metric, kissme_fit, kissme_matrix, load_metric,
                            mahalanobis_distance, metric_from_bytes, metric_to_bytes,
                            psd_project, save_metric, whiten)


def random_psd(rng, d, rank=None):
    A = rng.normal(size=(d, rank or d))
    return A @ A.T


def tags(n_ids, n_cams, n_strips, per=1):
    ids, cams, strips = [], [], []
    for i in range(n_ids):
        for c in range(n_cams):
            for j in range(n_strips):
                for _ in range(per):
                    ids.append(f"p{i}")
                    cams.append(c)
                    strips.append(j)
    return np.array(ids), np.array(cams), np.array(strips)


def enumerate_pairs(ids, cams, strips):
    pos, neg = set(), set()
    for a, b in itertools.combinations(range(len(ids)), 2):
        if strips[a] != strips[b]:
            continue
        if ids[a] == ids[b] and cams[a] != cams[b]:
            pos.add((a, b))
        elif ids[a] != ids[b]:
            neg.add((a, b))
    return pos, neg


def as_set(pairs):
    return {tuple(sorted(map(int, p))) for p in pairs}


# -- pairs -------------------------------------------------------------------


def test_single_identity_has_no_negatives():
    ids, cams, strips = tags(1, 2, 5)
    with pytest.raises(DataError):
        build_pairs(ids, cams, strips)
    pos = mt._positive_pairs(mt._codes(ids), cams, strips, True)
    assert len(pos) == 5


def test_two_ids_two_cameras_counts():
    J = 6
    ids, cams, strips = tags(2, 2, J)
    pairs = build_pairs(ids, cams, strips, 1.0, seed=4)
    pos, neg = enumerate_pairs(ids, cams, strips)
    assert len(pos) == 2 * J and len(neg) == 4 * J
    assert as_set(pairs.positives) == pos
    assert len(pairs.negatives) == 2 * J
    assert as_set(pairs.negatives) <= neg
    assert len(as_set(pairs.negatives)) == 2 * J


def test_no_positive_pairs():
    ids, cams, strips = tags(3, 1, 2)
    with pytest.raises(DataError):
        build_pairs(ids, cams, strips)


@given(st.integers(2, 5), st.integers(1, 3), st.integers(1, 4), st.integers(1, 3),
       st.floats(0.2, 3.0), st.integers(0, 2**16))
def test_pairs_match_exhaustive_enumeration(n_ids, n_cams, n_strips, per, ratio, seed):
    ids, cams, strips = tags(n_ids, n_cams, n_strips, per)
    pos, neg = enumerate_pairs(ids, cams, strips)
    if not pos:
        with pytest.raises(DataError):
            build_pairs(ids, cams, strips, ratio, seed)
        return
    pairs = build_pairs(ids, cams, strips, ratio, seed)
    assert as_set(pairs.positives) == pos and len(pairs.positives) == len(pos)
    got = as_set(pairs.negatives)
    assert got <= neg and len(got) == len(pairs.negatives)
    assert len(got) == min(len(neg), max(1, int(round(ratio * len(pos)))))
    again = build_pairs(ids, cams, strips, ratio, seed)
    assert np.array_equal(again.negatives, pairs.negatives)


def test_unconstrained_pairs_cross_strips():
    ids, cams, strips = tags(2, 2, 3)
    p = build_pairs(ids, cams, strips, 1.0, strip_constrained=False)
    assert len(p.positives) == 2 * 9  # 3x3 cross-camera strip combinations per id


def test_rejection_sampler_is_valid_and_uniform(monkeypatch):
    monkeypatch.setattr(mt, "_ENUMERATE_LIMIT", 0)
    ids, cams, strips = tags(3, 2, 2)
    _, neg = enumerate_pairs(ids, cams, strips)
    neg = sorted(neg)
    hits = dict.fromkeys(neg, 0)
    trials = 600
    for s in range(trials):
        p = build_pairs(ids, cams, strips, 1.0, seed=s)
        got = as_set(p.negatives)
        assert got <= set(neg) and len(got) == len(p.negatives) == 6
        for q in got:
            hits[q] += 1
    expected = trials * 6 / len(neg)
    counts = np.array(list(hits.values()))
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert chi2 < 60  # 23 dof; p << 1e-4 beyond this


# -- scatter -----------------------------------------------------------------


def test_scatter_examples():
    X = np.array([[0.0, 0, 0], [1, 0, 0], [2, 1, 0], [1, 2, 3]])
    one = PairSet(np.array([[1, 0]]), np.array([[2, 3]]))
    s = accumulate_scatter(X, one)
    assert np.array_equal(s.delta_p, np.diag([1.0, 0, 0]))
    v = X[2] - X[0]
    sym = PairSet(np.array([[2, 0], [0, 2]]), np.array([[1, 3]]))
    assert np.allclose(accumulate_scatter(X, sym).delta_p, np.outer(v, v))
    with pytest.raises(DataError):
        accumulate_scatter(X, PairSet(np.empty((0, 2), int), np.array([[0, 1]])))


def test_scatter_matches_naive_loops(rng):
    X = rng.normal(size=(300, 6))
    P = rng.integers(0, 300, (1000, 2))
    N = rng.integers(0, 300, (700, 2))
    s = accumulate_scatter(X, PairSet(P, N))
    for got, pairs in ((s.delta_p, P), (s.delta_n, N)):
        naive = np.zeros((6, 6))
        for a, b in pairs:
            d = X[a] - X[b]
            for i in range(6):
                for j in range(6):
                    naive[i, j] += d[i] * d[j]
        naive /= len(pairs)
        assert np.abs(got - naive).max() < 1e-10
    assert np.abs(s.delta_p - s.delta_p.T).max() < 1e-12
    assert (s.count_p, s.count_n) == (1000, 700)


def test_scatter_ignores_pair_order(rng):
    X = rng.normal(size=(50, 4))
    P = rng.integers(0, 50, (200, 2))
    N = rng.integers(0, 50, (300, 2))
    a = kissme_fit(accumulate_scatter(X, PairSet(P, N)))
    b = kissme_fit(accumulate_scatter(X, PairSet(P[::-1, ::-1], rng.permutation(N))))
    assert np.allclose(a.m, b.m, atol=1e-10)


# -- KISSME ------------------------------------------------------------------


def test_kissme_identical_scatter_is_zero(rng):
    S = random_psd(rng, 4) + np.eye(4)
    assert np.abs(kissme_matrix(ScatterPair(S, S, 1, 1), 0.0)).max() < 1e-10


def test_kissme_scalar():
    m = kissme_matrix(ScatterPair(np.array([[0.25]]), np.array([[4.0]]), 1, 1), 0.0)
    assert m[0, 0] == pytest.approx(3.75)


def test_kissme_two_dim_sampled():
    rng = np.random.default_rng(0)
    n = 100_000
    dp = rng.normal(size=(n, 2)) * np.sqrt([0.1, 1.0])
    dn = rng.normal(size=(n, 2))
    s = ScatterPair(dp.T @ dp / n, dn.T @ dn / n, n, n)
    assert np.abs(kissme_matrix(s, 0.0) - np.diag([9.0, 0.0])).max() < 0.3


def test_kissme_errors():
    bad = ScatterPair(np.array([[1.0, 2.0], [0.0, 1.0]]), np.eye(2), 1, 1)
    with pytest.raises(DataError):
        kissme_fit(bad)
    sing = ScatterPair(np.zeros((2, 2)), np.eye(2), 1, 1)
    with pytest.raises(NumericError):
        kissme_fit(sing, 0.0)
    with pytest.raises(DataError):
        kissme_fit(ScatterPair(np.eye(2), np.eye(2), 1, 1), -1.0)


def test_regularization_rescues_rank_deficient_scatter(rng):
    S = random_psd(rng, 5, rank=2)
    model = kissme_fit(ScatterPair(S, np.eye(5), 1, 1), 1e-3)
    assert np.all(np.isfinite(model.m))


def test_scaling_property(rng):
    X = rng.normal(size=(80, 3))
    P, N = rng.integers(0, 80, (150, 2)), rng.integers(0, 80, (150, 2))
    s1 = accumulate_scatter(X, PairSet(P, N))
    s2 = accumulate_scatter(3 * X, PairSet(P, N))
    assert np.allclose(s2.delta_p, 9 * s1.delta_p)
    m1, m2 = kissme_matrix(s1, 0.0), kissme_matrix(s2, 0.0)
    assert np.allclose(m2, m1 / 9)
    a, b = kissme_fit(s1, 0.0), kissme_fit(s2, 0.0)
    Q = rng.integers(0, 80, (40, 2))
    d1 = [mahalanobis_distance(a, X[i], X[j]) for i, j in Q]
    d2 = [mahalanobis_distance(b, 3 * X[i], 3 * X[j]) for i, j in Q]
    assert np.allclose(d1, d2)
    assert np.array_equal(np.argsort(d1, kind="stable"), np.argsort(d2, kind="stable"))


# -- PSD projection, distances, whitening ------------------------------------


def test_psd_fixed_point_and_clamp(rng):
    S = random_psd(rng, 5)
    assert np.abs(psd_project(S).m - S).max() < 1e-10
    assert np.allclose(psd_project(np.diag([1.0, -2.0])).m, np.diag([1.0, 0.0]))
    with pytest.raises(NumericError):
        psd_project(np.array([[np.nan, 0], [0, 1]]))


@given(st.integers(0, 2**20))
def test_psd_projection_is_frobenius_nearest(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(5, 5))
    A = (A + A.T) / 2
    out = psd_project(A).m
    assert np.linalg.eigvalsh(out).min() >= -1e-12
    best = np.linalg.norm(out - A)
    for _ in range(50):
        Q = random_psd(rng, 5, rank=int(rng.integers(1, 6))) * rng.uniform(0, 2)
        assert best <= np.linalg.norm(Q - A) + 1e-12
        t = rng.normal(size=(5, 2)) * 1e-2
        near = out + t @ t.T  # PSD neighbors of the answer
        assert best <= np.linalg.norm(near - A) + 1e-12


def test_whitener_examples():
    x = np.array([3.0, -1.5])
    assert np.array_equal(whiten(identity_metric(2), x), x)
    m = psd_project(np.diag([4.0, 1.0]))
    assert np.allclose(whiten(m, x), [6.0, -1.5])
    assert mahalanobis_distance(m, np.array([1.0, 1.0]), np.zeros(2)) == pytest.approx(np.sqrt(5))
    assert mahalanobis_distance(m, x, x) == 0
    assert mahalanobis_distance(identity_metric(2), x, np.zeros(2)) == pytest.approx(np.linalg.norm(x))
    with pytest.raises(DataError):
        whiten(m, np.ones(3))


def test_distance_identity_and_triangle(rng):
    A = rng.normal(size=(6, 6))
    model = psd_project((A + A.T) / 2)
    assert np.allclose(model.whitener.T @ model.whitener, model.m, atol=1e-10)
    X, Y, Z = rng.normal(size=(3, 1000, 6))
    for x, y, z in zip(X, Y, Z):
        quad = np.sqrt(max((x - y) @ model.m @ (x - y), 0.0))
        lx = np.linalg.norm(whiten(model, x) - whiten(model, y))
        assert abs(lx - quad) <= 1e-8 * max(quad, 1e-300) + 1e-12
        dxy = mahalanobis_distance(model, x, y)
        assert dxy <= mahalanobis_distance(model, x, z) + mahalanobis_distance(model, z, y) + 1e-9


def test_fit_channel_metric_end_to_end(rng):
    ids, cams, strips = tags(10, 2, 3, per=2)
    base = rng.normal(size=(10, 4))
    X = base[[int(i[1:]) for i in ids]] + 0.1 * rng.normal(size=(len(ids), 4))
    model = mt.fit_channel_metric(X, ids, cams, strips, 1.0, 1e-3, seed=0)
    assert np.linalg.eigvalsh(model.m).min() >= -1e-12
    assert model.meta["count_p"] > 0


def test_metric_file_roundtrip(tmp_path, rng):
    model = psd_project(random_psd(rng, 4))
    model = MetricModel(model.m, model.whitener, 0.0, 1e-3, {"config_hash": "abc"})
    save_metric(model, tmp_path / "m.bin")
    back = load_metric(tmp_path / "m.bin")
    assert np.array_equal(back.m, model.m) and np.array_equal(back.whitener, model.whitener)
    assert back.regularization == 1e-3 and back.meta == {"config_hash": "abc"}
    blob = b"pad" + metric_to_bytes(model)
    again, end = metric_from_bytes(blob, 3)
    assert end == len(blob) and np.array_equal(again.m, model.m)
    with pytest.raises(DataError):
        metric_from_bytes(b"x" * 64)
