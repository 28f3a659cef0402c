"""End-to-end protocol: features -> local metrics -> codebooks -> descriptors -> ranking."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from . import evaluation as ev
from .codebook import fit_kmeans
from .descriptor import DescriptorConfig, describe_store
from .errors import ConfigError, DataError, LeakageError
from .features import Channel, FeatureStore, image_features
from .imgio import DISTRACTOR_ID, JUNK_ID, SplitPlan
from .metric import fit_channel_metric, identity_metric
from .slic import mark_foreground, segment
from .subspace import KINDS, fit_learner

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    # dataset
    dataset_root: str | None = None
    layout: str = "pair_folders"
    target_size: tuple = (128, 48)
    color_names: str | None = None
    # superpixels and local features
    n_superpixels: int = 500
    compactness: float = 20.0
    fg_threshold: float = 0.5
    n_strips: int = 16
    channels: tuple = ("HSV", "CN", "HOG", "SILTP")
    # codebooks
    codebook_k: int = 350
    ma: int = 10
    codebook_metric: str = "kissme"
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-4
    codebook_samples: int = 0
    # local KISSME
    kissme_regularization: float = 1e-3
    negative_ratio: float = 1.0
    # descriptor-level learner
    learner: str = "euclidean"
    pca_dim: int = 100
    target_dim: str = "auto"
    learner_negative_ratio: float = 10.0
    # protocol
    protocol: str = "half_split"
    n_trials: int = 10
    train_file: str | None = None
    test_file: str | None = None
    multi_query: bool = False
    max_rank: int = 50
    seed: int = 0
    output_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.layout in ("pair_folders", "market_style", "synthetic_manifest", "market1501"),
             f"unknown layout {self.layout!r}")
        need(len(self.target_size) == 2 and min(self.target_size) >= 8, "target_size must be >= 8x8")
        need(self.n_superpixels >= 1, "n_superpixels must be >= 1")
        need(self.compactness > 0, "compactness must be > 0")
        need(0 <= self.fg_threshold <= 1, "fg_threshold must lie in [0, 1]")
        need(self.n_strips >= 1, "n_strips must be >= 1")
        need(len(self.channels) >= 1, "at least one channel")
        for c in self.channels:
            need(c in Channel.__members__, f"unknown channel {c!r}")
        need(self.codebook_k >= 1, "codebook_k must be >= 1")
        need(1 <= self.ma <= self.codebook_k, "ma must lie in [1, codebook_k]")
        need(self.codebook_metric in ("kissme", "euclidean"), "codebook_metric is kissme or euclidean")
        need(self.kmeans_max_iters >= 1 and self.kmeans_tol >= 0, "bad k-means limits")
        need(self.codebook_samples >= 0, "codebook_samples must be >= 0")
        need(self.kissme_regularization >= 0, "kissme_regularization must be >= 0")
        need(self.negative_ratio > 0 and self.learner_negative_ratio > 0, "negative ratios must be > 0")
        need(self.learner.upper() in KINDS, f"learner must be one of {[k.lower() for k in KINDS]}")
        need(self.pca_dim >= 1, "pca_dim must be >= 1")
        need(self.target_dim == "auto" or str(self.target_dim).isdigit(), "target_dim is 'auto' or an int")
        need(self.protocol in ("half_split", "fixed_files"), "protocol is half_split or fixed_files")
        need(self.n_trials >= 1, "n_trials must be >= 1")
        need(self.max_rank >= 1, "max_rank must be >= 1")

    @property
    def descriptor(self) -> DescriptorConfig:
        return DescriptorConfig(self.n_strips, self.ma, tuple(Channel(c) for c in self.channels))

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)


def prepare_features(images, config: PipelineConfig, table=None) -> FeatureStore:
    """Segment every image and extract its root-normalized local features."""
    chans = tuple(Channel(c) for c in config.channels)
    parts = []
    for im in images:
        seg = segment(im, config.n_superpixels, config.compactness)
        seg = mark_foreground(seg, im.mask, config.fg_threshold)
        parts.append(image_features(im, seg, config.n_strips, table, chans))
    if not parts:
        raise DataError("no images to extract features from")
    return FeatureStore.concatenate(parts)


def train_codebooks(store: FeatureStore, config: PipelineConfig, seed=0) -> dict:
    """Per-channel local metric and codebook from the training rows of ``store``."""
    codebooks = {}
    for ci, ch in enumerate(Channel(c) for c in config.channels):
        rows = np.flatnonzero(store.usable(ch))
        X = store.vectors[ch][rows]
        if config.codebook_metric == "kissme":
            metric = fit_channel_metric(X, store.ids[rows], store.camera[rows], store.strip[rows],
                                        config.negative_ratio, config.kissme_regularization,
                                        seed=seed + 101 * ci)
        else:
            metric = identity_metric(ch.dim)
        if config.codebook_samples and len(X) > config.codebook_samples:
            rng = np.random.default_rng(seed + 7 + ci)
            X = X[np.sort(rng.choice(len(X), config.codebook_samples, replace=False))]
        codebooks[ch] = fit_kmeans(X, config.codebook_k, metric, config.kmeans_max_iters,
                                   config.kmeans_tol, seed=seed + ci, channel=ch)
    return codebooks


def _target_dim(config):
    return "auto" if config.target_dim == "auto" else int(config.target_dim)


def fit_part_two(D_train, ids, cams, config: PipelineConfig, seed=0):
    return fit_learner(config.learner, D_train, ids, cams, target_dim=_target_dim(config),
                       pca_dim=config.pca_dim, n_negative_ratio=config.learner_negative_ratio,
                       regularization=config.kissme_regularization, seed=seed)


def query_gallery(images, test_ids) -> tuple[np.ndarray, np.ndarray, ev.JunkFilter]:
    """Query and gallery image indices for one trial.

    Images carrying ``query``/``gallery`` roles use them (gallery keeps
    distractors). Otherwise the lowest camera probes the other cameras.
    """
    roles = {im.role for im in images}
    if "query" in roles:
        q = [i for i, im in enumerate(images) if im.role == "query" and im.id in test_ids]
        g = [i for i, im in enumerate(images) if im.role == "gallery"
             and (im.id in test_ids or im.id in (DISTRACTOR_ID, JUNK_ID))]
        return np.array(q), np.array(g), ev.MARKET_JUNK
    test = [i for i, im in enumerate(images) if im.id in test_ids]
    cams = sorted({images[i].camera for i in test})
    if len(cams) < 2:
        raise DataError("test set needs two cameras")
    q = [i for i in test if images[i].camera == cams[0]]
    g = [i for i in test if images[i].camera != cams[0]]
    return np.array(q), np.array(g), ev.NO_JUNK


def pool_queries(D, ids, cams):
    """Element-wise mean of descriptors sharing (identity, camera)."""
    keys = list(dict.fromkeys(zip(ids, cams)))
    pos = {k: i for i, k in enumerate(keys)}
    idx = np.array([pos[k] for k in zip(ids, cams)])
    sums = np.zeros((len(keys), D.shape[1]))
    np.add.at(sums, idx, D)
    pooled = sums / np.bincount(idx)[:, None]
    return pooled, np.array([k[0] for k in keys], dtype=object), np.array([k[1] for k in keys])


def check_leakage(plan: SplitPlan, train_image_ids) -> None:
    overlap = plan.train_ids & plan.test_ids
    if overlap:
        raise LeakageError(f"train/test identities overlap, e.g. {sorted(overlap)[0]!r}")
    leaked = set(map(str, train_image_ids)) & set(plan.test_ids)
    if leaked:
        raise LeakageError(f"test identity {sorted(leaked)[0]!r} reached training")


def evaluate_descriptors(D, images, test_ids, model, config: PipelineConfig) -> ev.EvalReport:
    from .subspace import distance_matrix

    q, g, junk = query_gallery(images, test_ids)
    ids = np.array([im.id for im in images], dtype=object)
    cams = np.array([im.camera for im in images])
    DQ, qids, qcams = D[q], ids[q], cams[q]
    if config.multi_query:
        DQ, qids, qcams = pool_queries(DQ, list(qids), list(qcams))
    dist = distance_matrix(model, DQ, D[g])
    ranked = ev.rank_all(dist, qids, qcams, ids[g], cams[g], junk)
    return ev.EvalReport(ev.cmc(ranked, config.max_rank), ev.mean_ap(ranked),
                         metadata={"n_queries": len(ranked), "n_gallery": int(len(g))})


def run_trial(images, plan: SplitPlan, config: PipelineConfig, store: FeatureStore,
              seed=0) -> ev.EvalReport:
    train_idx = [i for i, im in enumerate(images) if im.id in plan.train_ids]
    train_store = store.for_images(train_idx)
    check_leakage(plan, train_store.ids)
    codebooks = train_codebooks(train_store, config, seed)
    D = describe_store(store, codebooks, config.descriptor)
    ids = np.array([images[i].id for i in train_idx], dtype=object)
    cams = np.array([images[i].camera for i in train_idx])
    model = fit_part_two(D[train_idx], ids, cams, config, seed)
    return evaluate_descriptors(D, images, plan.test_ids, model, config)


def run_protocol(images, splits: list[SplitPlan], config: PipelineConfig, table=None,
                 store: FeatureStore | None = None) -> ev.EvalReport:
    """Train and evaluate every split; returns per-trial and mean results.

    ``store`` may hold precomputed features for ``images`` (they do not
    depend on the split and can be shared between configurations).
    """
    if store is None:
        store = prepare_features(images, config, table)
    trials = []
    for t, plan in enumerate(splits):
        seed = config.seed + 1000 * t
        report = run_trial(images, plan, config, store, seed)
        logger.info("trial %d: rank-1 %.4f mAP %.4f", t, report.cmc[0], report.map)
        trials.append(report)
    return ev.aggregate(trials, {"n_trials": len(trials), "learner": config.learner,
                                 "codebook_metric": config.codebook_metric})
