"""Acceptance criteria 1-8, each at its stated tolerance and runtime budget.

Every criterion prints one ``criterion N: PASS|FAIL ...`` line. Run with
``pytest tests/test_acceptance.py -v`` or directly as a script.
"""

import sys
import time
from fractions import Fraction

import numpy as np
import pytest

from reidbow.codebook import fit_kmeans, kmeans
from reidbow.evaluation import cmc, mean_ap, rank_all
from reidbow.features import root_normalize, siltp_histograms
from reidbow.imgio import CameraShift, make_splits, synthesize_dataset, synthetic_color_name_table
from reidbow.metric import PairSet, accumulate_scatter, kissme_matrix, psd_project
from reidbow.pipeline import PipelineConfig, prepare_features, run_protocol
from reidbow.slic import segment
from reidbow.subspace import compute_scatters, cross_view_scatters, generalized_eigen, nfst_fit


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line, flush=True)
    return ok


# -- oracles -----------------------------------------------------------------


def gauss_jordan_inverse(A):
    """Plain-Python Gauss-Jordan elimination with partial pivoting."""
    n = len(A)
    M = [list(map(float, row)) + [1.0 if i == j else 0.0 for j in range(n)] for i, row in enumerate(A)]
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(M[r][col]))
        M[col], M[piv] = M[piv], M[col]
        p = M[col][col]
        M[col] = [v / p for v in M[col]]
        for r in range(n):
            if r != col and M[r][col] != 0.0:
                f = M[r][col]
                M[r] = [a - f * b for a, b in zip(M[r], M[col])]
    return np.array([row[n:] for row in M])


def random_spd(rng, d, lo=0.5, hi=2.0):
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return (Q * rng.uniform(lo, hi, d)) @ Q.T


def brute_first_match(scores, qid, gids):
    order = sorted(range(len(scores)), key=lambda i: (scores[i], i))
    return [gids[i] == qid for i in order]


# -- criteria ----------------------------------------------------------------


def criterion_1():
    rng = np.random.default_rng(101)
    d, n = 5, 100_000
    Sp, Sn = random_spd(rng, d), random_spd(rng, d)
    dp = rng.multivariate_normal(np.zeros(d), Sp, n)
    dn = rng.multivariate_normal(np.zeros(d), Sn, n)
    base = rng.normal(size=(2 * n, d))
    X = np.vstack([base, base[:n] - dp, base[n:] - dn])
    idx = np.arange(n)
    pairs = PairSet(np.stack([idx, 2 * n + idx], 1), np.stack([n + idx, 3 * n + idx], 1))
    t0 = time.perf_counter()
    m_raw = kissme_matrix(accumulate_scatter(X, pairs), 0.0)
    elapsed = time.perf_counter() - t0
    emp_p = np.zeros((d, d))
    emp_n = np.zeros((d, d))
    for v in dp:
        emp_p += np.outer(v, v)
    for v in dn:
        emp_n += np.outer(v, v)
    emp_p /= n
    emp_n /= n
    oracle = gauss_jordan_inverse(emp_p) - gauss_jordan_inverse(emp_n)
    err = np.linalg.norm(m_raw - oracle)
    ok = err <= 1e-8 and elapsed < 5.0
    return report(1, ok, f"KISSME vs Gauss-Jordan oracle: ||dM||_F = {err:.2e} (<= 1e-8), "
                         f"{elapsed:.2f} s (< 5 s)")


def criterion_2():
    n, d, k = 5000, 20, 50
    worst_rel, same, slowest = 0.0, True, 0.0
    for seed in range(3):
        rng = np.random.default_rng(200 + seed)
        X = rng.normal(size=(n, d)) + rng.integers(0, 8, (n, 1)) * rng.normal(size=d)
        A = rng.normal(size=(d, d))
        M = A @ A.T + 1e-3 * np.eye(d)
        metric = psd_project(M)
        t0 = time.perf_counter()
        cb = fit_kmeans(X, k, metric, seed=seed)
        slowest = max(slowest, time.perf_counter() - t0)
        C = np.linalg.cholesky(M)  # M = C C^T, so x -> C^T x whitens
        ref = kmeans(X @ C, k, seed=seed)
        worst_rel = max(worst_rel, abs(cb.inertia - ref.inertia) / ref.inertia)
        same &= bool(np.array_equal(cb.labels, ref.labels))
    ok = worst_rel <= 1e-9 and same and slowest < 10.0
    return report(2, ok, f"metric k-means vs Cholesky-whitened k-means: rel inertia diff "
                         f"{worst_rel:.2e} (<= 1e-9), assignments identical={same}, "
                         f"slowest fit {slowest:.2f} s (< 10 s)")


def criterion_3():
    rng = np.random.default_rng(303)
    d, c, n = 200, 10, 40
    y = np.repeat(np.arange(c), n // c)
    X = rng.normal(size=(c, d))[y] + 0.5 * rng.normal(size=(n, d))
    model = nfst_fit(X, y)
    Z = (X - model.mean) @ model.w
    spread = max(np.abs(Z[y == k] - Z[y == k].mean(0)).max() for k in range(c))
    Sb, Sw = compute_scatters(Z, y)
    ratio = np.trace(Sb) / max(np.trace(Sw), np.finfo(float).tiny)
    ok = spread <= 1e-6 and np.trace(Sb) > 1e6 * np.trace(Sw)
    return report(3, ok, f"NFST collapse: max offset from class mean {spread:.2e} (<= 1e-6), "
                         f"tr(Sb)/tr(Sw) = {ratio:.2e} (> 1e6)")


def criterion_4():
    worst, kept = 0.0, 0
    for seed in range(20):
        rng = np.random.default_rng(400 + seed)
        d = int(rng.integers(4, 40))
        c = int(rng.integers(d + 5, 3 * d + 10))
        mu = rng.normal(size=(c, d)) * rng.uniform(0.5, 2.0, d)
        A = mu + rng.normal(size=(c, d)) * rng.uniform(0.05, 1.0, d)
        B = mu + rng.normal(size=(c, d)) * rng.uniform(0.05, 1.0, d)
        extra, intra, _, _ = cross_view_scatters(A, np.arange(c), B, np.arange(c))
        intra = intra + 1e-3 * np.trace(intra) / d * np.eye(d)
        for target in ("auto", d // 2):
            lam, V = generalized_eigen(extra, intra, target)
            for l, w in zip(lam, V.T):
                sbw = extra @ w
                worst = max(worst, np.linalg.norm(sbw - l * intra @ w) / np.linalg.norm(sbw))
                kept += 1
    ok = worst <= 1e-8
    return report(4, ok, f"XQDA eigen residuals over {kept} kept pairs: max relative {worst:.2e} (<= 1e-8)")


def criterion_5():
    rng = np.random.default_rng(505)
    mismatches = 0
    for _ in range(100):
        img = rng.integers(0, 256, (48, 24, 3)).astype(np.float64)
        seg = segment(img.astype(np.uint8), 30)
        ref = siltp_histograms(img, seg).tobytes()
        for s in (0.5, 2.0, 10.0):
            mismatches += siltp_histograms(img * s, seg).tobytes() != ref
    ok = mismatches == 0
    return report(5, ok, f"SILTP scale invariance on 100 images x s in {{0.5, 2, 10}}: "
                         f"{mismatches} non-identical histograms (0 allowed)")


def criterion_6():
    rng = np.random.default_rng(606)
    worst = 0.0
    for _ in range(1000):
        d = int(rng.integers(1, 200))
        u = rng.exponential(size=d) * (rng.random(d) > 0.3)
        v = rng.exponential(size=d) * (rng.random(d) > 0.3)
        u[rng.integers(d)] += 1e-3
        v[rng.integers(d)] += 1e-3
        lhs = np.sum((root_normalize(u) - root_normalize(v)) ** 2)
        uh = [Fraction(x) / Fraction(float(u.sum())) for x in u]
        vh = [Fraction(x) / Fraction(float(v.sum())) for x in v]
        bc = sum(np.sqrt(float(a * b)) for a, b in zip(uh, vh))
        worst = max(worst, abs(lhs - 2 * (1 - bc)))
    ok = worst <= 1e-10
    return report(6, ok, f"root-norm / Hellinger identity on 1000 vectors: max error {worst:.2e} (<= 1e-10)")


def criterion_7():
    rng = np.random.default_rng(707)
    worst_cmc = worst_ap = 0.0
    for _ in range(500):
        n_gal = int(rng.integers(1, 21))
        gids = [str(g) for g in rng.integers(0, 5, n_gal)]
        present = sorted(set(gids))
        nq = int(rng.integers(1, 6))
        qids = [present[i] for i in rng.integers(0, len(present), nq)]
        scores = rng.integers(0, 8, (nq, n_gal)).astype(float)
        ranked = rank_all(scores, qids, [0] * nq, gids, [1] * n_gal)
        max_rank = 20
        hits = [0] * max_rank
        aps = []
        for s, q in zip(scores, qids):
            rel = brute_first_match(list(s), q, gids)
            first = rel.index(True)
            for k in range(first, max_rank):
                hits[k] += 1
            prec = [sum(rel[:i + 1]) / (i + 1) for i in range(len(rel)) if rel[i]]
            aps.append(sum(prec) / len(prec))
        worst_cmc = max(worst_cmc, np.abs(cmc(ranked, max_rank) - np.array(hits) / nq).max())
        worst_ap = max(worst_ap, abs(mean_ap(ranked) - sum(aps) / nq))
    ok = worst_cmc <= 1e-12 and worst_ap <= 1e-12
    return report(7, ok, f"CMC/mAP vs brute force on 500 instances: max CMC error {worst_cmc:.1e}, "
                         f"max mAP error {worst_ap:.1e} (<= 1e-12)")


# Desk-scale benchmark: 100 identities, one view per camera, camera 1 is a
# hue/gamma/noise/translation shift of camera 0.
BENCH_SHIFT = CameraShift(hue=0.05, gamma=1.3, noise=8.0, translate=2)
BENCH = dict(n_superpixels=500, n_strips=16, codebook_k=100, ma=10, n_trials=1)


def criterion_8():
    table = synthetic_color_name_table()
    t0 = time.perf_counter()
    rows = []
    for seed in range(5):
        images = synthesize_dataset(100, 1, BENCH_SHIFT, seed=seed)
        cfg = PipelineConfig(**BENCH, seed=seed)
        store = prepare_features(images, cfg, table)
        splits = make_splits(images, "half_split", 1, seed=seed)
        learned = run_protocol(images, splits, cfg, table, store).cmc[0]
        plain = run_protocol(images, splits, cfg.replace(codebook_metric="euclidean"), table,
                             store).cmc[0]
        rows.append((learned, plain))
    elapsed = time.perf_counter() - t0
    r = np.array(rows)
    gap = float((r[:, 0] - r[:, 1]).mean())
    per_seed = bool(np.all(r[:, 0] >= r[:, 1]))
    ok = per_seed and r[:, 0].mean() >= r[:, 1].mean() and gap >= 0.02 and elapsed < 300
    seeds = ", ".join(f"{a:.2f}/{b:.2f}" for a, b in rows)
    return report(8, ok, f"metric vs Euclidean codebook rank-1 per seed [{seeds}]; mean "
                         f"{r[:, 0].mean():.3f} vs {r[:, 1].mean():.3f}, gap {100 * gap:.1f} "
                         f"points (>= 2), {elapsed:.0f} s (< 300 s)")


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
            criterion_7, criterion_8]


@pytest.mark.parametrize("criterion", CRITERIA, ids=[f"criterion_{i}" for i in range(1, 9)])
def test_acceptance(criterion, capsys):
    with capsys.disabled():
        ok = criterion()
    assert ok


if __name__ == "__main__":
    results = [c() for c in CRITERIA]
    sys.exit(0 if all(results) else 1)
