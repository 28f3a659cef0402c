"""Gallery ranking, CMC curves and mean average precision."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .imgio import DISTRACTOR_ID


@dataclass(frozen=True)
class JunkFilter:
    """Gallery entries ignored for a query.

    ``same_camera_same_id`` drops views of the query identity taken by the
    query's own camera; ``excluded_ids`` drops whole identities.
    """

    same_camera_same_id: bool = True
    excluded_ids: frozenset = frozenset()

    def keep(self, query_id, query_camera, gallery_ids, gallery_cameras) -> np.ndarray:
        gids = np.asarray(gallery_ids).astype(str)
        gcams = np.asarray(gallery_cameras)
        keep = np.ones(len(gids), dtype=bool)
        if self.same_camera_same_id:
            keep &= ~((gids == str(query_id)) & (gcams == query_camera))
        if self.excluded_ids:
            keep &= ~np.isin(gids, list(self.excluded_ids))
        return keep


NO_JUNK = JunkFilter(False)
MARKET_JUNK = JunkFilter(True, frozenset({DISTRACTOR_ID}))


@dataclass(frozen=True, eq=False)
class RankedList:
    query_id: str
    query_camera: int
    order: np.ndarray    # gallery indices, best first
    scores: np.ndarray   # scores along ``order``
    matches: np.ndarray  # bool along ``order``

    @property
    def first_match_rank(self) -> int:
        hits = np.flatnonzero(self.matches)
        if len(hits) == 0:
            raise DataError(f"query {self.query_id!r} has no true match in the gallery")
        return int(hits[0]) + 1


@dataclass
class EvalReport:
    cmc: np.ndarray
    map: float
    per_trial: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def rank(self, k: int) -> float:
        return float(self.cmc[k - 1])

    def summary(self, ranks=(1, 5, 10, 20, 30)) -> dict:
        out = {f"rank{k}": self.rank(k) for k in ranks if k <= len(self.cmc)}
        out["mAP"] = float(self.map)
        return out


def rank_gallery(scores, query_id, query_camera, gallery_ids, gallery_cameras,
                 junk_filter: JunkFilter | None = None) -> RankedList:
    """Sort the junk-filtered gallery by ascending score, ties by gallery index."""
    scores = np.asarray(scores, dtype=np.float64)
    gids = np.asarray(gallery_ids).astype(str)
    if len(scores) != len(gids):
        raise DataError("one score per gallery item required")
    keep = np.ones(len(gids), bool) if junk_filter is None else junk_filter.keep(
        query_id, query_camera, gids, gallery_cameras)
    idx = np.flatnonzero(keep)
    if len(idx) == 0:
        raise DataError(f"gallery is empty after junk filtering for query {query_id!r}")
    order = idx[np.argsort(scores[idx], kind="stable")]
    return RankedList(str(query_id), int(query_camera), order, scores[order], gids[order] == str(query_id))


def rank_all(dist: np.ndarray, query_ids, query_cams, gallery_ids, gallery_cams,
             junk_filter: JunkFilter | None = None) -> list[RankedList]:
    return [rank_gallery(dist[q], query_ids[q], query_cams[q], gallery_ids, gallery_cams, junk_filter)
            for q in range(len(dist))]


def cmc(ranked: list[RankedList], max_rank: int = 50) -> np.ndarray:
    """Fraction of queries whose first true match is at rank <= k, k = 1..max_rank."""
    if not ranked:
        raise DataError("no queries")
    first = np.array([r.first_match_rank for r in ranked])
    ks = np.arange(1, max_rank + 1)
    return (first[None, :] <= ks[:, None]).mean(axis=1)


def average_precision(matches: np.ndarray) -> float:
    hits = np.flatnonzero(matches)
    if len(hits) == 0:
        raise DataError("no true match")
    return float(np.mean(np.arange(1, len(hits) + 1) / (hits + 1)))


def mean_ap(ranked: list[RankedList]) -> float:
    if not ranked:
        raise DataError("no queries")
    return float(np.mean([average_precision(r.matches) for r in ranked]))


def aggregate(per_trial: list[EvalReport], metadata=None) -> EvalReport:
    cmcs = np.array([t.cmc for t in per_trial])
    return EvalReport(cmcs.mean(axis=0), float(np.mean([t.map for t in per_trial])),
                      list(per_trial), dict(metadata or {}))
