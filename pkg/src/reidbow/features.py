"""Per-superpixel appearance features: HSV, color names, HOG and SILTP.

Each extractor has a single-superpixel form (``extract_*``) and a batch form
(``*_histograms``) that computes every superpixel of an image in one pass.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import color
from .errors import DataError
from .slic import SuperpixelSegmentation


class Channel(str, enum.Enum):
    HSV = "HSV"
    CN = "CN"
    HOG = "HOG"
    SILTP = "SILTP"

    @property
    def dim(self) -> int:
        return CHANNEL_DIMS[self]


CHANNEL_DIMS = {Channel.HSV: 20, Channel.CN: 11, Channel.HOG: 9, Channel.SILTP: 162}
CHANNELS = tuple(Channel)

HSV_BINS = 10
HOG_BINS = 9
SILTP_TAU = 0.3
SILTP_RADII = (3, 5)
SILTP_CODES = 81


def _pixels(image) -> np.ndarray:
    return image.pixels if hasattr(image, "pixels") else np.asarray(image)


def _rgb(image) -> np.ndarray:
    p = _pixels(image)
    if p.ndim != 3:
        raise DataError("color features need an RGB image")
    return p


def _superpixel_stats(labels, n, values, bins):
    """Histogram integer ``values`` (H x W) per superpixel into ``bins`` bins."""
    flat = labels.ravel() * bins + values.ravel()
    return np.bincount(flat, minlength=n * bins).reshape(n, bins).astype(np.float64)


# -- HSV ---------------------------------------------------------------------


def hsv_bin_maps(image) -> tuple[np.ndarray, np.ndarray]:
    hsv = color.rgb_to_hsv(_rgb(image) / 255.0)
    h = np.minimum((hsv[..., 0] * HSV_BINS).astype(np.int64), HSV_BINS - 1)
    s = np.minimum((hsv[..., 1] * HSV_BINS).astype(np.int64), HSV_BINS - 1)
    return h, s


def hsv_histograms(image, seg: SuperpixelSegmentation) -> np.ndarray:
    """Marginal hue and saturation counts, ``[hist_H | hist_S]`` per superpixel."""
    h, s = hsv_bin_maps(image)
    n = seg.n_superpixels
    return np.hstack([_superpixel_stats(seg.labels, n, h, HSV_BINS),
                      _superpixel_stats(seg.labels, n, s, HSV_BINS)])


def extract_hsv(image, seg: SuperpixelSegmentation, superpixel_index: int) -> np.ndarray:
    h, s = hsv_bin_maps(image)
    sel = seg.labels == superpixel_index
    return np.concatenate([np.bincount(h[sel], minlength=HSV_BINS),
                           np.bincount(s[sel], minlength=HSV_BINS)]).astype(np.float64)


# -- color names -------------------------------------------------------------


def cn_histograms(image, seg: SuperpixelSegmentation, table) -> np.ndarray:
    """Mean color-name probability vector of each superpixel."""
    rows = table.lookup(_rgb(image)).reshape(-1, table.rows.shape[1])
    n = seg.n_superpixels
    flat = seg.labels.ravel()
    out = np.stack([np.bincount(flat, rows[:, t], n) for t in range(rows.shape[1])], axis=1)
    return out / seg.sizes[:, None]


def extract_cn(image, seg: SuperpixelSegmentation, superpixel_index: int, table) -> np.ndarray:
    sel = seg.labels == superpixel_index
    return table.lookup(_rgb(image)[sel]).mean(axis=0)


# -- HOG ---------------------------------------------------------------------


def gradient_orientation(image) -> tuple[np.ndarray, np.ndarray]:
    """Unsigned orientation bin and magnitude per pixel of the gray image.

    Central differences with replicated borders; rows grow downwards, so a
    ramp increasing with both row and column has orientation 45 degrees.
    """
    g = np.pad(color.gray(_pixels(image)), 1, mode="edge")
    gx = (g[1:-1, 2:] - g[1:-1, :-2]) / 2.0
    gy = (g[2:, 1:-1] - g[:-2, 1:-1]) / 2.0
    mag = np.hypot(gx, gy)
    theta = np.degrees(np.arctan2(gy, gx)) % 180.0
    bins = np.minimum((theta // (180.0 / HOG_BINS)).astype(np.int64), HOG_BINS - 1)
    return bins, mag


def hog_histograms(image, seg: SuperpixelSegmentation) -> np.ndarray:
    bins, mag = gradient_orientation(image)
    flat = seg.labels.ravel() * HOG_BINS + bins.ravel()
    n = seg.n_superpixels
    return np.bincount(flat, mag.ravel(), n * HOG_BINS).reshape(n, HOG_BINS)


def extract_hog(image, seg: SuperpixelSegmentation, superpixel_index: int) -> np.ndarray:
    bins, mag = gradient_orientation(image)
    sel = seg.labels == superpixel_index
    return np.bincount(bins[sel], mag[sel], HOG_BINS)


# -- SILTP -------------------------------------------------------------------


def siltp_codes(image, radius: int, tau: float = SILTP_TAU) -> np.ndarray:
    """Base-3 SILTP code in [0, 81) per pixel, neighbors (up, right, down, left).

    A neighbor scores 2 above ``(1 + tau) * center``, 1 below
    ``(1 - tau) * center`` and 0 otherwise; the up neighbor is the most
    significant digit. ``tau`` is compared as an exact fraction so that
    scaling the image by a constant never flips a digit.
    """
    g = color.luma_units(_pixels(image))
    H, W = g.shape
    frac = Fraction(tau).limit_denominator(1000)
    num, den = float(frac.numerator), float(frac.denominator)
    r = np.arange(H)
    c = np.arange(W)
    up = g[np.clip(r - radius, 0, H - 1)]
    down = g[np.clip(r + radius, 0, H - 1)]
    left = g[:, np.clip(c - radius, 0, W - 1)]
    right = g[:, np.clip(c + radius, 0, W - 1)]
    hi = (den + num) * g
    lo = (den - num) * g
    code = np.zeros((H, W), dtype=np.int64)
    for nb in (up, right, down, left):
        scaled = den * nb
        code = code * 3 + np.where(scaled > hi, 2, np.where(scaled < lo, 1, 0))
    return code


def siltp_histograms(image, seg: SuperpixelSegmentation, radii=SILTP_RADII,
                     tau: float = SILTP_TAU) -> np.ndarray:
    n = seg.n_superpixels
    return np.hstack([_superpixel_stats(seg.labels, n, siltp_codes(image, r, tau), SILTP_CODES)
                      for r in radii])


def extract_siltp(image, seg: SuperpixelSegmentation, superpixel_index: int,
                  radii=SILTP_RADII, tau: float = SILTP_TAU) -> np.ndarray:
    sel = seg.labels == superpixel_index
    return np.concatenate([np.bincount(siltp_codes(image, r, tau)[sel], minlength=SILTP_CODES)
                           for r in radii]).astype(np.float64)


# -- normalization and strips ------------------------------------------------


def root_normalize(v) -> np.ndarray:
    """L1-normalize then take the elementwise square root (Hellinger embedding)."""
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0):
        raise DataError("root_normalize needs a nonnegative vector")
    total = v.sum(axis=-1, keepdims=True)
    return np.sqrt(np.divide(v, total, out=np.zeros_like(v), where=total > 0))


def assign_strips(seg: SuperpixelSegmentation, n_strips: int, image_height: int) -> np.ndarray:
    if n_strips < 1:
        raise DataError("n_strips must be >= 1")
    strips = np.floor(seg.centroids[:, 0] * n_strips / image_height).astype(np.int64)
    return np.minimum(strips, n_strips - 1)


# -- per-image and multi-image containers ------------------------------------


@dataclass(frozen=True)
class LocalFeature:
    image_id: str
    camera: int
    strip: int
    superpixel: int
    channel: Channel
    vector: np.ndarray


def raw_features(image, seg: SuperpixelSegmentation, table=None, channels=CHANNELS) -> dict:
    """Unnormalized per-superpixel vectors for every requested channel."""
    out = {}
    for ch in channels:
        ch = Channel(ch)
        if ch is Channel.HSV:
            out[ch] = hsv_histograms(image, seg)
        elif ch is Channel.CN:
            if table is None:
                raise DataError("color-name channel requested without a table")
            out[ch] = cn_histograms(image, seg, table)
        elif ch is Channel.HOG:
            out[ch] = hog_histograms(image, seg)
        else:
            out[ch] = siltp_histograms(image, seg)
    return out


@dataclass(frozen=True, eq=False)
class FeatureStore:
    """Root-normalized local features of many images, one row per superpixel.

    ``vectors`` maps each channel to an (n, d) matrix; the remaining arrays
    tag rows with their image position, identity, camera, strip, superpixel
    index and foreground flag.
    """

    vectors: dict
    image: np.ndarray
    ids: np.ndarray
    camera: np.ndarray
    strip: np.ndarray
    superpixel: np.ndarray
    foreground: np.ndarray
    n_images: int

    def __len__(self):
        return len(self.image)

    @property
    def channels(self):
        return tuple(self.vectors)

    def usable(self, channel) -> np.ndarray:
        """Rows that enter training: foreground and not all-zero."""
        v = self.vectors[Channel(channel)]
        return self.foreground & np.any(v != 0, axis=1)

    def subset(self, rows: np.ndarray) -> "FeatureStore":
        rows = np.asarray(rows)
        return FeatureStore({c: v[rows] for c, v in self.vectors.items()}, self.image[rows],
                            self.ids[rows], self.camera[rows], self.strip[rows],
                            self.superpixel[rows], self.foreground[rows], self.n_images)

    def for_images(self, image_indices) -> "FeatureStore":
        return self.subset(np.flatnonzero(np.isin(self.image, np.asarray(list(image_indices)))))

    def local_features(self, channel):
        ch = Channel(channel)
        for r in range(len(self)):
            yield LocalFeature(str(self.ids[r]), int(self.camera[r]), int(self.strip[r]),
                               int(self.superpixel[r]), ch, self.vectors[ch][r])

    @classmethod
    def empty(cls, channels=CHANNELS) -> "FeatureStore":
        z = np.zeros(0, dtype=np.int64)
        return cls({Channel(c): np.zeros((0, Channel(c).dim)) for c in channels}, z,
                   np.zeros(0, dtype=object), z, z, z, np.zeros(0, dtype=bool), 0)

    @classmethod
    def concatenate(cls, parts: list["FeatureStore"]) -> "FeatureStore":
        if not parts:
            raise DataError("nothing to concatenate")
        offsets = np.cumsum([0] + [p.n_images for p in parts])
        chans = parts[0].channels
        return cls({c: np.vstack([p.vectors[c] for p in parts]) for c in chans},
                   np.concatenate([p.image + o for p, o in zip(parts, offsets)]),
                   np.concatenate([p.ids for p in parts]),
                   np.concatenate([p.camera for p in parts]),
                   np.concatenate([p.strip for p in parts]),
                   np.concatenate([p.superpixel for p in parts]),
                   np.concatenate([p.foreground for p in parts]),
                   int(offsets[-1]))


def image_features(image, seg: SuperpixelSegmentation, n_strips: int, table=None,
                   channels=CHANNELS) -> FeatureStore:
    """Extract and root-normalize all channels of one segmented image."""
    raw = raw_features(image, seg, table, channels)
    n = seg.n_superpixels
    return FeatureStore(
        {c: root_normalize(v) for c, v in raw.items()},
        np.zeros(n, dtype=np.int64),
        np.array([image.id] * n, dtype=object),
        np.full(n, image.camera, dtype=np.int64),
        assign_strips(seg, n_strips, seg.labels.shape[0]),
        np.arange(n, dtype=np.int64),
        np.asarray(seg.foreground_flags, dtype=bool).copy(),
        1,
    )


# -- dump files --------------------------------------------------------------

FEATURE_MAGIC = b"RBFEAT01"
_FEATURE_HEADER = struct.Struct("<8s8sII")


def write_feature_dump(store: FeatureStore, channel, path, image_names=None) -> None:
    """Binary matrix (magic, channel, dim, count, float32 rows) + JSON-lines index."""
    ch = Channel(channel)
    v = np.ascontiguousarray(store.vectors[ch], dtype="<f4").reshape(-1, ch.dim)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, ch.value.encode().ljust(8), ch.dim, len(v)))
        fh.write(v.tobytes())
    write_feature_index(store, path.with_suffix(".jsonl"), image_names)


def write_feature_index(store: FeatureStore, path, image_names=None) -> None:
    lines = []
    for r in range(len(store)):
        row = {"image_id": str(store.ids[r]), "camera": int(store.camera[r]),
               "strip": int(store.strip[r]), "superpixel": int(store.superpixel[r]),
               "image": int(store.image[r]), "foreground": bool(store.foreground[r])}
        if image_names is not None:
            row["name"] = image_names[int(store.image[r])]
        lines.append(json.dumps(row, sort_keys=True))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_feature_dump(path) -> tuple[Channel, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < _FEATURE_HEADER.size:
        raise DataError(f"{path}: truncated feature dump")
    magic, ch, dim, count = _FEATURE_HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise DataError(f"{path}: not a feature dump")
    body = np.frombuffer(data, dtype="<f4", offset=_FEATURE_HEADER.size)
    if body.size != dim * count:
        raise DataError(f"{path}: expected {dim * count} values, found {body.size}")
    return Channel(ch.rstrip(b" ").decode()), body.reshape(count, dim).astype(np.float64)


def read_feature_index(path) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8")
    return [json.loads(ln) for ln in text.splitlines() if ln.strip()]


def store_from_dumps(dumps: dict, index: list[dict], n_images: int) -> FeatureStore:
    n = len(index)
    for ch, v in dumps.items():
        if len(v) != n:
            raise DataError(f"{ch.value} dump has {len(v)} rows, index has {n}")
    return FeatureStore(
        dict(dumps),
        np.array([r["image"] for r in index], dtype=np.int64),
        np.array([r["image_id"] for r in index], dtype=object),
        np.array([r["camera"] for r in index], dtype=np.int64),
        np.array([r["strip"] for r in index], dtype=np.int64),
        np.array([r["superpixel"] for r in index], dtype=np.int64),
        np.array([r["foreground"] for r in index], dtype=bool),
        n_images,
    )
