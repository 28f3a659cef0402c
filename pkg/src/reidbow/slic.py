"""SLIC superpixels in CIELAB + xy space, with connectivity enforcement."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numba
import numpy as np

from .color import rgb_to_lab
from .errors import DataError

N_ITERATIONS = 10


@dataclass(frozen=True, eq=False)
class SuperpixelSegmentation:
    labels: np.ndarray            # H x W int64 in [0, n)
    centroids: np.ndarray         # n x 2 (row, col) means
    sizes: np.ndarray             # n pixel counts
    foreground_flags: np.ndarray  # n booleans

    @property
    def n_superpixels(self) -> int:
        return len(self.sizes)


def _as_pixels(image) -> np.ndarray:
    return image.pixels if hasattr(image, "pixels") else np.asarray(image)


def grid_seeds(H: int, W: int, k: int) -> tuple[np.ndarray, float]:
    """Seed centers on a regular grid with spacing ``S = sqrt(HW / k)``."""
    S = math.sqrt(H * W / k)
    ny = max(1, min(H, int(round(H / S))))
    nx = max(1, min(W, int(round(W / S))))
    rows = (np.arange(ny) + 0.5) * H / ny - 0.5
    cols = (np.arange(nx) + 0.5) * W / nx - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1), S


@numba.njit(cache=True)
def _slic_iterate(lab, centers, labels, S, compactness, n_iter):
    H, W = labels.shape
    K = centers.shape[0]
    dist = np.empty((H, W))
    ratio = (compactness / S) ** 2
    win = int(math.ceil(S))
    sums = np.zeros((K, 5))
    counts = np.zeros(K)
    for _ in range(n_iter):
        dist[:, :] = np.inf
        for k in range(K):
            cy = centers[k, 3]
            cx = centers[k, 4]
            r0 = max(0, int(math.floor(cy - win)))
            r1 = min(H - 1, int(math.ceil(cy + win)))
            c0 = max(0, int(math.floor(cx - win)))
            c1 = min(W - 1, int(math.ceil(cx + win)))
            for r in range(r0, r1 + 1):
                dy = r - cy
                if abs(dy) > S:
                    continue
                for c in range(c0, c1 + 1):
                    dx = c - cx
                    if abs(dx) > S:
                        continue
                    dl = lab[r, c, 0] - centers[k, 0]
                    da = lab[r, c, 1] - centers[k, 1]
                    db = lab[r, c, 2] - centers[k, 2]
                    d = dl * dl + da * da + db * db + ratio * (dy * dy + dx * dx)
                    if d < dist[r, c]:
                        dist[r, c] = d
                        labels[r, c] = k
        sums[:, :] = 0.0
        counts[:] = 0.0
        for r in range(H):
            for c in range(W):
                k = labels[r, c]
                sums[k, 0] += lab[r, c, 0]
                sums[k, 1] += lab[r, c, 1]
                sums[k, 2] += lab[r, c, 2]
                sums[k, 3] += r
                sums[k, 4] += c
                counts[k] += 1.0
        for k in range(K):
            if counts[k] > 0:
                for j in range(5):
                    centers[k, j] = sums[k, j] / counts[k]
    return labels


@numba.njit(cache=True)
def _components(labels):
    """4-connected components of equal-label regions, numbered in raster order."""
    H, W = labels.shape
    comp = -np.ones((H, W), dtype=np.int64)
    stack = np.empty((H * W, 2), dtype=np.int64)
    n = 0
    for r0 in range(H):
        for c0 in range(W):
            if comp[r0, c0] >= 0:
                continue
            lab = labels[r0, c0]
            comp[r0, c0] = n
            top = 0
            stack[0, 0] = r0
            stack[0, 1] = c0
            top = 1
            while top > 0:
                top -= 1
                r = stack[top, 0]
                c = stack[top, 1]
                for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    rr = r + dr
                    cc = c + dc
                    if 0 <= rr < H and 0 <= cc < W and comp[rr, cc] < 0 and labels[rr, cc] == lab:
                        comp[rr, cc] = n
                        stack[top, 0] = rr
                        stack[top, 1] = cc
                        top += 1
            n += 1
    return comp, n


def _merge_small(comp: np.ndarray, n: int, min_size: float) -> np.ndarray:
    """Absorb components smaller than ``min_size`` into their largest neighbor."""
    sizes = np.bincount(comp.ravel(), minlength=n).astype(np.int64)
    if n == 1 or sizes.min() >= min_size:
        return comp
    a = np.concatenate([comp[:, :-1].ravel(), comp[:-1, :].ravel()])
    b = np.concatenate([comp[:, 1:].ravel(), comp[1:, :].ravel()])
    keep = a != b
    a, b = a[keep], b[keep]
    neighbors: list[set[int]] = [set() for _ in range(n)]
    for u, v in set(zip(a.tolist(), b.tolist())):
        neighbors[u].add(v)
        neighbors[v].add(u)

    parent = np.arange(n)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for s in sorted(range(n), key=lambda i: (sizes[i], i)):
        root = find(s)
        if sizes[root] >= min_size:
            continue
        adj = {find(t) for t in neighbors[root]} - {root}
        if not adj:
            continue
        target = max(adj, key=lambda t: (sizes[t], -t))
        parent[root] = target
        sizes[target] += sizes[root]
        neighbors[target] |= neighbors[root]
    roots = np.array([find(i) for i in range(n)])
    return roots[comp]


def _relabel(labels: np.ndarray) -> np.ndarray:
    """Renumber labels 0..n-1 in order of first raster appearance."""
    flat = labels.ravel()
    _, first = np.unique(flat, return_index=True)
    uniq = flat[np.sort(first)]
    lut = np.empty(flat.max() + 1, dtype=np.int64)
    lut[uniq] = np.arange(len(uniq))
    return lut[labels]


def _summarize(labels: np.ndarray, flags=None) -> SuperpixelSegmentation:
    H, W = labels.shape
    n = int(labels.max()) + 1
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=n)
    rr, cc = np.indices((H, W))
    cent = np.stack([np.bincount(flat, rr.ravel(), n), np.bincount(flat, cc.ravel(), n)], 1)
    cent /= sizes[:, None]
    if flags is None:
        flags = np.ones(n, dtype=bool)
    return SuperpixelSegmentation(labels, cent, sizes, flags)


def enforce_connectivity(labels: np.ndarray, min_size: float) -> np.ndarray:
    comp, n = _components(np.ascontiguousarray(labels))
    merged = _merge_small(comp, n, min_size)
    # Merging can only join adjacent components, so a second pass is not needed
    # for connectivity; relabeling makes the range contiguous.
    return _relabel(merged)


def segment(image, target_superpixels: int = 500, compactness: float = 20.0,
            n_iter: int = N_ITERATIONS) -> SuperpixelSegmentation:
    """Segment an RGB image into roughly ``target_superpixels`` compact regions.

    Pixels are clustered in (L, a, b, row, col) with distance
    ``D^2 = d_lab^2 + (compactness / S)^2 d_xy^2`` inside a 2S x 2S window
    around each center. Fragments smaller than a quarter of the nominal
    superpixel area are merged into their largest neighbor.
    """
    pixels = _as_pixels(image)
    H, W = pixels.shape[:2]
    if target_superpixels < 1:
        raise DataError("target_superpixels must be >= 1")
    if target_superpixels > H * W:
        raise DataError(f"cannot make {target_superpixels} superpixels from {H * W} pixels")
    if compactness <= 0:
        raise DataError("compactness must be positive")

    lab = rgb_to_lab(pixels[..., :3])
    seeds, S = grid_seeds(H, W, target_superpixels)
    iy = np.clip(np.rint(seeds[:, 0]).astype(int), 0, H - 1)
    ix = np.clip(np.rint(seeds[:, 1]).astype(int), 0, W - 1)
    centers = np.concatenate([lab[iy, ix], seeds], axis=1)

    # Starting labels: nearest seed on the grid, so every pixel is labeled even
    # if no window ever reaches it.
    ny = len(np.unique(seeds[:, 0]))
    nx = len(seeds) // ny
    cell_r = np.minimum((np.arange(H) + 0.5) * ny // H, ny - 1).astype(np.int64)
    cell_c = np.minimum((np.arange(W) + 0.5) * nx // W, nx - 1).astype(np.int64)
    labels = cell_r[:, None] * nx + cell_c[None, :]

    labels = _slic_iterate(lab, centers, labels, float(S), float(compactness), int(n_iter))
    labels = enforce_connectivity(labels, (H * W / target_superpixels) / 4.0)
    return _summarize(labels)


def mark_foreground(seg: SuperpixelSegmentation, mask, threshold: float = 0.5) -> SuperpixelSegmentation:
    """Flag superpixels whose foreground pixel fraction is at least ``threshold``."""
    if mask is None:
        return replace(seg, foreground_flags=np.ones(seg.n_superpixels, dtype=bool))
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != seg.labels.shape:
        raise DataError(f"mask shape {mask.shape} does not match labels {seg.labels.shape}")
    fg = np.bincount(seg.labels.ravel(), mask.ravel().astype(np.float64), seg.n_superpixels)
    return replace(seg, foreground_flags=fg / seg.sizes >= threshold)


def save_label_png(seg: SuperpixelSegmentation, path) -> None:
    from PIL import Image

    Image.fromarray(seg.labels.astype(np.uint16)).save(path)
