"""Bag-of-words image descriptors: per-strip TF histograms fused across channels."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codebook import DEFAULT_MA, Codebook, encode_ma_batch
from .errors import DataError
from .features import CHANNELS, Channel, FeatureStore, LocalFeature, image_features


@dataclass(frozen=True)
class DescriptorConfig:
    n_strips: int = 16
    ma: int = DEFAULT_MA
    channels: tuple = CHANNELS
    normalize_blocks: bool = True


@dataclass(frozen=True, eq=False)
class StripHistogram:
    strip: int
    channel: Channel | None
    counts: np.ndarray


@dataclass(frozen=True, eq=False)
class ImageDescriptor:
    image_id: str
    camera: int
    blocks: dict
    full: np.ndarray


def strip_histogram(codebook: Codebook, features_in_strip, ma: int = DEFAULT_MA,
                    strip: int = 0) -> StripHistogram:
    """Visual-word counts of the features of one strip, ``ma`` votes each."""
    feats = list(features_in_strip) if not isinstance(features_in_strip, np.ndarray) else features_in_strip
    if len(feats) and isinstance(feats[0], LocalFeature):
        if codebook.channel is not None and any(f.channel != codebook.channel for f in feats):
            raise DataError("feature channel does not match codebook channel")
        strip = feats[0].strip
        X = np.array([f.vector for f in feats])
    else:
        X = np.asarray(feats, dtype=np.float64).reshape(-1, codebook.dim)
    words = encode_ma_batch(codebook, X, ma)
    counts = np.bincount(words.ravel(), minlength=codebook.k).astype(np.float64)
    return StripHistogram(strip, codebook.channel, counts)


def _l2_rows(M: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(M, axis=1, keepdims=True)
    return np.divide(M, norms, out=np.zeros_like(M), where=norms > 0)


def channel_blocks(store: FeatureStore, codebook: Codebook, channel, n_strips: int,
                   ma: int, normalize: bool = True) -> np.ndarray:
    """Strip-major histogram block of one channel for every image in ``store``."""
    ch = Channel(channel)
    k = codebook.k
    rows = np.flatnonzero(store.usable(ch))
    words = encode_ma_batch(codebook, store.vectors[ch][rows], ma)
    base = (store.image[rows] * n_strips + store.strip[rows]) * k
    flat = (base[:, None] + words).ravel()
    counts = np.bincount(flat, minlength=store.n_images * n_strips * k).astype(np.float64)
    block = counts.reshape(store.n_images, n_strips * k)
    return _l2_rows(block) if normalize else block


def describe_store(store: FeatureStore, codebooks: dict, config: DescriptorConfig) -> np.ndarray:
    """Descriptor matrix (one row per image) in channel order ``config.channels``."""
    blocks = []
    for ch in config.channels:
        ch = Channel(ch)
        if ch not in codebooks:
            raise DataError(f"no codebook for channel {ch.value}")
        blocks.append(channel_blocks(store, codebooks[ch], ch, config.n_strips, config.ma,
                                     config.normalize_blocks))
    return np.hstack(blocks)


def build_descriptor(image, seg, codebooks: dict, config: DescriptorConfig,
                     table=None) -> ImageDescriptor:
    """Extract, encode and histogram the foreground superpixels of one image."""
    for ch in config.channels:
        if Channel(ch) not in codebooks:
            raise DataError(f"no codebook for channel {Channel(ch).value}")
    store = image_features(image, seg, config.n_strips, table, config.channels)
    full = describe_store(store, codebooks, config)[0]
    blocks, pos = {}, 0
    for ch in config.channels:
        n = config.n_strips * codebooks[Channel(ch)].k
        blocks[Channel(ch)] = full[pos:pos + n]
        pos += n
    return ImageDescriptor(image.id, image.camera, blocks, full)


def descriptor_length(codebooks: dict, config: DescriptorConfig) -> int:
    return sum(config.n_strips * codebooks[Channel(c)].k for c in config.channels)


# -- file format -------------------------------------------------------------

DESCRIPTOR_MAGIC = b"RBDESC01"
_DESC_HEAD = struct.Struct("<8sII")


def write_descriptors(path, D: np.ndarray, ids, cameras) -> None:
    D = np.ascontiguousarray(D, dtype="<f4")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_DESC_HEAD.pack(DESCRIPTOR_MAGIC, D.shape[0], D.shape[1]))
        fh.write(D.tobytes())
    lines = [json.dumps({"id": str(i), "camera": int(c)}, sort_keys=True) for i, c in zip(ids, cameras)]
    path.with_suffix(".jsonl").write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_descriptors(path):
    path = Path(path)
    data = path.read_bytes()
    magic, n, dim = _DESC_HEAD.unpack_from(data)
    if magic != DESCRIPTOR_MAGIC:
        raise DataError(f"{path}: not a descriptor file")
    D = np.frombuffer(data, "<f4", n * dim, _DESC_HEAD.size).reshape(n, dim).astype(np.float64)
    meta = [json.loads(ln) for ln in path.with_suffix(".jsonl").read_text(encoding="utf-8").splitlines()
            if ln.strip()]
    return D, [m["id"] for m in meta], np.array([m["camera"] for m in meta], dtype=np.int64)
