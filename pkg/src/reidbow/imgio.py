"""Dataset ingestion, color-name tables, train/test splits and synthetic data."""

from __future__ import annotations

import colorsys
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from . import color
from .errors import DataError

logger = logging.getLogger(__name__)

DEFAULT_SIZE = (128, 48)
CN_BINS = 32
CN_TERMS = 11
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}

# Market1501 bookkeeping ids.
DISTRACTOR_ID = "-1"
JUNK_ID = "0000"


@dataclass(frozen=True, eq=False)
class PedestrianImage:
    id: str
    camera: int
    pixels: np.ndarray
    mask: np.ndarray | None = None
    name: str = ""
    role: str | None = None

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or self.pixels.size == 0:
            raise DataError(f"{self.name or self.id}: expected a non-empty HxWx3 array")
        if self.mask is not None and self.mask.shape != self.pixels.shape[:2]:
            raise DataError(
                f"{self.name or self.id}: mask {self.mask.shape} does not match "
                f"image {self.pixels.shape[:2]}"
            )
        self.pixels.setflags(write=False)
        if self.mask is not None:
            self.mask.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]


@dataclass(frozen=True, eq=False)
class ColorNameTable:
    """Lookup from quantized RGB to probabilities over the 11 basic color terms.

    ``rows`` is indexed by ``r * bins**2 + g * bins + b`` where each channel
    value is binned as ``c // (256 // bins)``.
    """

    rows: np.ndarray
    bins_per_channel: int = CN_BINS

    def __post_init__(self):
        b = self.bins_per_channel
        if self.rows.shape != (b**3, CN_TERMS):
            raise DataError(f"color-name table must have shape ({b**3}, {CN_TERMS})")
        if np.any(self.rows < 0) or not np.allclose(self.rows.sum(axis=1), 1.0, atol=1e-4):
            raise DataError("color-name rows must be nonnegative and sum to 1")
        self.rows.setflags(write=False)

    def index(self, pixels: np.ndarray) -> np.ndarray:
        q = np.asarray(pixels).astype(np.int64) // (256 // self.bins_per_channel)
        b = self.bins_per_channel
        return (q[..., 0] * b + q[..., 1]) * b + q[..., 2]

    def lookup(self, pixels: np.ndarray) -> np.ndarray:
        return self.rows[self.index(pixels)]


@dataclass(frozen=True)
class SplitPlan:
    trial_seed: int | None
    train_ids: frozenset[str]
    test_ids: frozenset[str]
    n_trials: int = 1

    def __post_init__(self):
        if self.train_ids & self.test_ids:
            raise DataError("train and test identities overlap")


@dataclass(frozen=True)
class CameraShift:
    """Perturbation turning a camera-0 view into the camera-1 view.

    ``hue`` rotates hue by that fraction of a turn, ``gamma`` is applied to
    intensities in [0, 1], ``noise`` is the standard deviation of additive
    Gaussian noise in 8-bit units and ``translate`` the maximum integer
    pixel offset drawn per image.
    """

    hue: float = 0.0
    gamma: float = 1.0
    noise: float = 0.0
    translate: int = 0

    @property
    def is_identity(self) -> bool:
        return self.hue == 0 and self.gamma == 1 and self.noise == 0 and self.translate == 0


# ---------------------------------------------------------------------------
# loading


_PAIR_RE = re.compile(r"^(?P<id>[^_]+)_cam(?P<cam>\d+)$")
_MARKET_RE = re.compile(r"^(?P<id>-1|\d+)_c(?P<cam>\d+)s(?P<seq>\d+)_(?P<frame>\d+)")


def parse_name(stem: str, layout: str) -> tuple[str, int]:
    if layout == "pair_folders":
        m = _PAIR_RE.match(stem)
    elif layout == "market_style":
        m = _MARKET_RE.match(stem)
    else:
        raise DataError(f"layout {layout!r} does not encode labels in filenames")
    if m is None:
        raise DataError(f"cannot parse id/camera from {stem!r} ({layout})")
    return m["id"], int(m["cam"])


def _read_rgb(path: Path, target_size: tuple[int, int]) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (target_size[1], target_size[0]):
            im = im.resize((target_size[1], target_size[0]), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8).copy()


def _read_mask(path: Path, native_shape: tuple[int, int], target_size) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L")
        if (im.size[1], im.size[0]) != native_shape:
            raise DataError(f"mask {path.name} is {im.size[1]}x{im.size[0]}, image is {native_shape}")
        if im.size != (target_size[1], target_size[0]):
            im = im.resize((target_size[1], target_size[0]), Image.BILINEAR)
        return np.asarray(im) >= 128


def _native_shape(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        return im.size[1], im.size[0]


def _find_mask(mask_dir: Path | None, stem: str) -> Path | None:
    if mask_dir is None:
        return None
    for suffix in (".png", ".bmp", ".jpg"):
        p = mask_dir / (stem + suffix)
        if p.exists():
            return p
    return None


def _load_one(path: Path, pid: str, cam: int, mask_path: Path | None, target_size, role=None):
    pixels = _read_rgb(path, target_size)
    mask = None
    if mask_path is not None:
        mask = _read_mask(mask_path, _native_shape(path), target_size)
    return PedestrianImage(pid, cam, pixels, mask, name=path.name, role=role)


def load_dataset(root_path, layout: str = "pair_folders", target_size=DEFAULT_SIZE,
                 role: str | None = None) -> list[PedestrianImage]:
    """Load every image under ``root_path`` and resize it to ``target_size``.

    ``layout`` is one of ``pair_folders`` (``<id>_cam<k>.<ext>``),
    ``market_style`` (``<id>_c<k>s<seq>_<frame>.jpg``) or
    ``synthetic_manifest`` (a ``manifest.jsonl`` file with one
    ``{"file", "id", "camera"[, "mask"]}`` object per line). Masks are taken
    from a sibling ``masks/`` directory holding files with matching stems.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    target_size = tuple(int(v) for v in target_size)
    images: list[PedestrianImage] = []

    if layout == "synthetic_manifest":
        manifest = root / "manifest.jsonl"
        if not manifest.exists():
            logger.warning("no manifest.jsonl in %s; returning empty dataset", root)
            return images
        for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                path = root / row["file"]
                pid, cam = str(row["id"]), int(row["camera"])
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{manifest}:{lineno}: bad manifest row") from exc
            mask_path = root / row["mask"] if row.get("mask") else None
            images.append(_load_one(path, pid, cam, mask_path, target_size, row.get("role", role)))
    elif layout in ("pair_folders", "market_style"):
        mask_dir = root / "masks"
        mask_dir = mask_dir if mask_dir.is_dir() else None
        files = sorted(p for p in root.iterdir()
                       if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        for path in files:
            pid, cam = parse_name(path.stem, layout)
            images.append(_load_one(path, pid, cam, _find_mask(mask_dir, path.stem),
                                    target_size, role))
    else:
        raise DataError(f"unknown layout {layout!r}")

    if not images:
        logger.warning("no images found under %s", root)
    return images


def load_market1501(root_path, target_size=DEFAULT_SIZE) -> list[PedestrianImage]:
    """Load the standard train / query / gallery folders, tagging each image's role."""
    root = Path(root_path)
    parts = [("bounding_box_train", "train"), ("query", "query"), ("bounding_box_test", "gallery")]
    images = []
    for sub, role in parts:
        images.extend(load_dataset(root / sub, "market_style", target_size, role=role))
    return images


def identities(images: Iterable[PedestrianImage]) -> list[str]:
    return sorted({im.id for im in images})


# ---------------------------------------------------------------------------
# color names


def load_color_name_table(path) -> ColorNameTable:
    """Read a ``r g b p1 .. p11`` text table over 32 bins per channel."""
    path = Path(path)
    try:
        data = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read color-name table {path}: {exc}") from exc
    n_rows = CN_BINS**3
    if data.shape != (n_rows, 3 + CN_TERMS):
        raise DataError(f"color-name table must have {n_rows} rows of {3 + CN_TERMS} columns, "
                        f"got {data.shape}")
    rgb = data[:, :3]
    if np.any(rgb < 0) or np.any(rgb >= CN_BINS) or np.any(rgb != np.floor(rgb)):
        raise DataError("color-name bin indices must be integers in [0, 32)")
    probs = data[:, 3:]
    if np.any(probs < 0):
        raise DataError("color-name table has negative probabilities")
    sums = probs.sum(axis=1)
    if np.any(sums < 0.9) or np.any(sums > 1.1):
        raise DataError("color-name row sums must lie in [0.9, 1.1]")
    idx = ((rgb[:, 0] * CN_BINS + rgb[:, 1]) * CN_BINS + rgb[:, 2]).astype(np.int64)
    if len(np.unique(idx)) != n_rows:
        raise DataError("color-name table has duplicate RGB bins")
    rows = np.empty_like(probs)
    rows[idx] = probs / sums[:, None]
    return ColorNameTable(rows)


def write_color_name_table(table: ColorNameTable, path) -> None:
    b = table.bins_per_channel
    r, g, bb = np.meshgrid(np.arange(b), np.arange(b), np.arange(b), indexing="ij")
    rgb = np.stack([r.ravel(), g.ravel(), bb.ravel()], axis=1)
    with open(path, "w", encoding="utf-8") as fh:
        for (ri, gi, bi), row in zip(rgb, table.rows):
            fh.write(f"{ri} {gi} {bi} " + " ".join(f"{p:.6g}" for p in row) + "\n")


# Prototype RGB values for black, blue, brown, grey, green, orange, pink,
# purple, red, white, yellow.
_CN_PROTOTYPES = np.array([
    [0, 0, 0], [0, 0, 255], [130, 80, 30], [128, 128, 128], [0, 160, 0],
    [255, 140, 0], [255, 160, 200], [128, 0, 160], [220, 0, 0],
    [255, 255, 255], [255, 255, 0],
], dtype=np.float64)


def synthetic_color_name_table(sharpness: float = 40.0) -> ColorNameTable:
    """Soft nearest-prototype color naming.

    A stand-in for the learned table when the real one is not available.
    Each bin center gets a softmax over negative RGB distances to the
    prototype colors above.
    """
    centers = (np.arange(CN_BINS) + 0.5) * (256 / CN_BINS)
    r, g, b = np.meshgrid(centers, centers, centers, indexing="ij")
    rgb = np.stack([r.ravel(), g.ravel(), b.ravel()], axis=1)
    d = np.linalg.norm(rgb[:, None, :] - _CN_PROTOTYPES[None], axis=2)
    logits = -d / sharpness
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return ColorNameTable(p / p.sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# splits


def read_id_list(path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip()]


def make_splits(images: Sequence[PedestrianImage], protocol: str = "half_split",
                n_trials: int = 10, seed: int = 0, train_file=None,
                test_file=None) -> list[SplitPlan]:
    """Train/test identity partitions.

    ``half_split`` draws ``n_trials`` independent partitions with
    ``floor(n_ids / 2)`` training identities each. ``fixed_files`` reads one
    identity per line from ``train_file`` and ``test_file`` (if no files are
    given, images tagged with role ``train`` define the training side).
    """
    if n_trials < 1:
        raise DataError("n_trials must be at least 1")
    ids = identities(images)

    if protocol == "half_split":
        cams_per_id: dict[str, set[int]] = {}
        for im in images:
            cams_per_id.setdefault(im.id, set()).add(im.camera)
        lonely = [i for i, c in cams_per_id.items() if len(c) < 2]
        if lonely:
            raise DataError(f"{len(lonely)} identities lack a second camera, e.g. {lonely[0]!r}")
        ss = np.random.SeedSequence(seed)
        plans = []
        for t, child in enumerate(ss.spawn(n_trials)):
            rng = np.random.default_rng(child)
            perm = rng.permutation(len(ids))
            n_train = len(ids) // 2
            train = frozenset(ids[i] for i in perm[:n_train])
            test = frozenset(ids[i] for i in perm[n_train:])
            plans.append(SplitPlan(int(child.generate_state(1)[0]), train, test, n_trials))
        return plans

    if protocol == "fixed_files":
        known = set(ids)
        if train_file is not None:
            train = set(read_id_list(train_file))
            test = set(read_id_list(test_file)) if test_file is not None else known - train
        else:
            train = {im.id for im in images if im.role == "train"}
            test = {im.id for im in images if im.role in ("query", "gallery")}
            test -= {DISTRACTOR_ID, JUNK_ID}
        unknown = (train | test) - known
        if unknown:
            raise DataError(f"split references unknown ids, e.g. {sorted(unknown)[0]!r}")
        return [SplitPlan(None, frozenset(train), frozenset(test), 1)]

    raise DataError(f"unknown split protocol {protocol!r}")


# ---------------------------------------------------------------------------
# synthetic two-camera data


def _hsv_to_rgb(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v)) * 255.0


def _render_identity(rng: np.random.Generator, size: tuple[int, int]):
    """Draw one procedural pedestrian: colored, textured body bands on clutter."""
    H, W = size
    rows = np.arange(H)[:, None] / H
    cols = np.arange(W)[None, :] / W

    img = np.empty((H, W, 3))
    # Cluttered background: low-saturation blotches.
    bg = _hsv_to_rgb(rng.random(), 0.15 * rng.random(), 0.3 + 0.5 * rng.random())
    blotch = np.sin(2 * np.pi * (rng.random() * 3 * rows + rng.random() * 3 * cols + rng.random()))
    img[:] = bg + 25.0 * blotch[..., None]

    # Silhouette: head ellipse, torso and legs trapezoids.
    cx = 0.5 + 0.04 * (rng.random() - 0.5)
    head = ((rows - 0.09) / 0.07) ** 2 + ((cols - cx) / 0.13) ** 2 <= 1.0
    torso_w = 0.30 + 0.06 * rng.random()
    torso = (rows >= 0.15) & (rows < 0.55) & (np.abs(cols - cx) <= torso_w)
    leg_w = 0.22 + 0.05 * rng.random()
    legs = (rows >= 0.55) & (rows < 0.97) & (np.abs(cols - cx) <= leg_w)
    mask = head | torso | legs

    parts = [
        (head, 0.03 + 0.06 * rng.random(), 0.3 + 0.3 * rng.random(), 0.55 + 0.3 * rng.random()),
        (torso, rng.random(), 0.35 + 0.65 * rng.random(), 0.25 + 0.7 * rng.random()),
        (legs, rng.random(), 0.2 + 0.8 * rng.random(), 0.15 + 0.7 * rng.random()),
    ]
    for region, h, s, v in parts:
        base = _hsv_to_rgb(h, s, v)
        alt = _hsv_to_rgb(h + rng.uniform(0.1, 0.5), s, min(1.0, v * rng.uniform(0.4, 1.3)))
        kind = rng.integers(4)
        freq = rng.uniform(4, 14)
        if kind == 0:
            pattern = np.zeros_like(rows * cols)
        elif kind == 1:
            pattern = (np.sin(2 * np.pi * freq * rows + rng.random() * 6) > 0) * np.ones_like(cols)
        elif kind == 2:
            pattern = (np.sin(2 * np.pi * freq * cols * W / H + rng.random() * 6) > 0) * np.ones_like(rows)
        else:
            pattern = (np.sin(2 * np.pi * freq * (rows + cols * W / H)) > 0).astype(float)
        texture = base + pattern[..., None] * (alt - base)
        img[region] = texture[region]

    # A carried object on one side, sometimes.
    if rng.random() < 0.5:
        side = cx + (0.38 if rng.random() < 0.5 else -0.38)
        top = 0.35 + 0.25 * rng.random()
        bag = (np.abs(rows - top) <= 0.08) & (np.abs(cols - side) <= 0.12)
        img[bag] = _hsv_to_rgb(rng.random(), 0.6 + 0.4 * rng.random(), 0.3 + 0.6 * rng.random())
        mask = mask | bag

    return img, mask


def _translate(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    if dy == 0 and dx == 0:
        return a
    H, W = a.shape[:2]
    r = np.clip(np.arange(H) - dy, 0, H - 1)
    c = np.clip(np.arange(W) - dx, 0, W - 1)
    return a[r][:, c]


def apply_camera_shift(img: np.ndarray, mask: np.ndarray, shift: CameraShift,
                       rng: np.random.Generator):
    """Return the shifted view of float RGB ``img`` (values in [0, 255])."""
    if shift.is_identity:
        return img.copy(), mask.copy()
    out = img
    if shift.translate:
        dy, dx = rng.integers(-shift.translate, shift.translate + 1, size=2)
        out = _translate(out, int(dy), int(dx))
        mask = _translate(mask, int(dy), int(dx))
    if shift.hue:
        hsv = color.rgb_to_hsv(np.clip(out, 0, 255) / 255.0)
        hsv[..., 0] = (hsv[..., 0] + shift.hue) % 1.0
        out = color.hsv_to_rgb(hsv) * 255.0
    if shift.gamma != 1:
        out = 255.0 * (np.clip(out, 0, 255) / 255.0) ** shift.gamma
    if shift.noise:
        out = out + rng.normal(0.0, shift.noise, size=out.shape)
    return out, mask.copy()


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synthesize_dataset(n_ids: int, per_camera: int = 1, shift: CameraShift | None = None,
                       seed: int = 0, size: tuple[int, int] = DEFAULT_SIZE,
                       view_jitter: int = 0) -> list[PedestrianImage]:
    """Generate a two-camera dataset of procedurally drawn pedestrians.

    Each identity gets ``per_camera`` camera-0 views (independently
    translated by up to ``view_jitter`` pixels) and the same number of
    camera-1 views obtained by passing each camera-0 view through ``shift``.
    Ids are zero-padded integers. Output is a deterministic function of the
    arguments.
    """
    if n_ids < 2:
        raise DataError("n_ids must be at least 2")
    if per_camera < 1 or size[0] < 8 or size[1] < 8:
        raise DataError("degenerate synthetic dataset size")
    shift = shift or CameraShift()
    width = max(4, len(str(n_ids - 1)))
    images = []
    for pid, child in enumerate(np.random.SeedSequence(seed).spawn(n_ids)):
        rng = np.random.default_rng(child)
        base, base_mask = _render_identity(rng, size)
        name = str(pid).zfill(width)
        for v in range(per_camera):
            if view_jitter:
                dy, dx = rng.integers(-view_jitter, view_jitter + 1, size=2)
                view, vmask = _translate(base, int(dy), int(dx)), _translate(base_mask, int(dy), int(dx))
            else:
                view, vmask = base, base_mask
            cam1, cam1_mask = apply_camera_shift(view, vmask, shift, rng)
            images.append(PedestrianImage(name, 0, _quantize(view), vmask.copy(),
                                          name=f"{name}_cam0_{v}.png"))
            images.append(PedestrianImage(name, 1, _quantize(cam1), cam1_mask,
                                          name=f"{name}_cam1_{v}.png"))
    return images


def write_dataset(images: Sequence[PedestrianImage], root) -> Path:
    """Write images (and masks) in the ``synthetic_manifest`` layout."""
    root = Path(root)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, im in enumerate(images):
        fname = im.name or f"{im.id}_cam{im.camera}_{i}.png"
        Image.fromarray(im.pixels).save(root / fname)
        row = {"file": fname, "id": im.id, "camera": im.camera}
        if im.mask is not None:
            mname = f"masks/{Path(fname).stem}.png"
            Image.fromarray(im.mask.astype(np.uint8) * 255).save(root / mname)
            row["mask"] = mname
        if im.role is not None:
            row["role"] = im.role
        rows.append(json.dumps(row, sort_keys=True))
    (root / "manifest.jsonl").write_text("\n".join(rows) + ("\n" if rows else ""), encoding="utf-8")
    return root
