"""Vectorized color-space conversions on float arrays."""

import numpy as np

# sRGB -> XYZ (D65) and the D65 white point.
_RGB_TO_XYZ = np.array([
    [0.412453, 0.357580, 0.180423],
    [0.212671, 0.715160, 0.072169],
    [0.019334, 0.119193, 0.950227],
])
_WHITE_D65 = np.array([0.950456, 1.0, 1.088754])
_LAB_EPS = 0.008856
_LAB_KAPPA = 903.3


def rgb_to_hsv(rgb):
    """RGB in [0, 1] to HSV with H, S, V in [0, 1]. Achromatic pixels get H = 0."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)
    s = np.divide(c, v, out=np.zeros_like(v), where=v > 0)
    safe = np.where(c > 0, c, 1.0)
    h = np.where(v == r, ((g - b) / safe) % 6.0,
                 np.where(v == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(c > 0, h / 6.0, 0.0) % 1.0
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv):
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0] % 1.0, hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(np.int64) % 6
    out = np.choose(i[..., None] * np.ones(3, dtype=np.int64), [
        np.stack([v, t, p], -1), np.stack([q, v, p], -1), np.stack([p, v, t], -1),
        np.stack([p, q, v], -1), np.stack([t, p, v], -1), np.stack([v, p, q], -1),
    ])
    return out


def rgb_to_lab(rgb8):
    """8-bit sRGB to CIELAB under D65."""
    c = np.asarray(rgb8, dtype=np.float64) / 255.0
    lin = np.where(c > 0.04045, ((c + 0.055) / 1.055) ** 2.4, c / 12.92)
    xyz = lin @ _RGB_TO_XYZ.T / _WHITE_D65
    f = np.where(xyz > _LAB_EPS, np.cbrt(xyz), (_LAB_KAPPA * xyz + 16.0) / 116.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def luma_units(pixels):
    """Integer-weighted luma 299R + 587G + 114B (1000x the usual gray level).

    Kept unscaled so that multiplying integer RGB by a constant multiplies
    the result by exactly that constant; scale-sensitive consumers divide by
    1000.
    """
    p = np.asarray(pixels, dtype=np.float64)
    if p.ndim == 2:
        return p * 1000.0
    return 299.0 * p[..., 0] + 587.0 * p[..., 1] + 114.0 * p[..., 2]


def gray(pixels):
    return luma_units(pixels) / 1000.0
