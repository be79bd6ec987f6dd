"""Low-level raster helpers shared by preprocessing, conditioning and metrics.

Everything here is plain numpy on 2-D planes. Implementations are deliberately
simple and exactly reproducible; no external image library is involved so the
same code path serves images and masks (geometry must match bit for bit).
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError


def gaussian_kernel1d(sigma: float, truncate: float = 3.0) -> np.ndarray:
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    radius = max(1, int(round(truncate * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float, truncate: float = 3.0) -> np.ndarray:
    """Separable Gaussian blur with replicate borders.

    Interior mass is conserved (kernel sums to 1); border handling replicates
    the edge row/column rather than zero-padding so masked images do not bleed
    darkness inward.
    """
    if img.ndim != 2:
        raise DimensionError(f"expected a 2-D plane, got ndim={img.ndim}")
    k = gaussian_kernel1d(sigma, truncate)
    r = (len(k) - 1) // 2
    a = np.asarray(img, dtype=np.float64)
    # rows
    p = np.pad(a, ((0, 0), (r, r)), mode="edge")
    out = np.zeros_like(a)
    for i, w in enumerate(k):
        out += w * p[:, i:i + a.shape[1]]
    # cols
    p = np.pad(out, ((r, r), (0, 0)), mode="edge")
    out2 = np.zeros_like(a)
    for i, w in enumerate(k):
        out2 += w * p[i:i + a.shape[0], :]
    return out2


def binary_dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Dilate a {0,1} mask with a (2r+1) square structuring element."""
    if radius < 0:
        raise ConfigError(f"dilation radius must be >= 0, got {radius}")
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D mask, got ndim={m.ndim}")
    if radius == 0:
        return m.copy()
    r = radius
    p = np.pad(m, r, mode="constant", constant_values=False)
    out = np.zeros_like(m)
    H, W = m.shape
    for dy in range(2 * r + 1):
        for dx in range(2 * r + 1):
            out |= p[dy:dy + H, dx:dx + W]
    return out


def _src_coords(n_out: int, n_in: int) -> np.ndarray:
    # pixel-center mapping, clamped; identical for images and masks
    scale = n_in / n_out
    c = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    return np.clip(c, 0.0, n_in - 1.0)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if img.ndim != 2:
        raise DimensionError(f"expected a 2-D plane, got ndim={img.ndim}")
    if out_h < 1 or out_w < 1:
        raise ConfigError("output dims must be >= 1")
    a = np.asarray(img, dtype=np.float64)
    H, W = a.shape
    ys = _src_coords(out_h, H)
    xs = _src_coords(out_w, W)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = a[np.ix_(y0, x0)] * (1 - wx) + a[np.ix_(y0, x1)] * wx
    bot = a[np.ix_(y1, x0)] * (1 - wx) + a[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def nearest_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize with the same pixel-center mapping as bilinear."""
    if img.ndim != 2:
        raise DimensionError(f"expected a 2-D plane, got ndim={img.ndim}")
    if out_h < 1 or out_w < 1:
        raise ConfigError("output dims must be >= 1")
    a = np.asarray(img)
    H, W = a.shape
    ys = np.clip(np.round(_src_coords(out_h, H)).astype(np.int64), 0, H - 1)
    xs = np.clip(np.round(_src_coords(out_w, W)).astype(np.int64), 0, W - 1)
    return a[np.ix_(ys, xs)]


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected component labelling. Returns (labels, count); labels start at 1."""
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D mask, got ndim={m.ndim}")
    H, W = m.shape
    labels = np.zeros((H, W), dtype=np.int32)
    count = 0
    for sy in range(H):
        for sx in range(W):
            if not m[sy, sx] or labels[sy, sx]:
                continue
            count += 1
            stack = [(sy, sx)]
            labels[sy, sx] = count
            while stack:
                y, x = stack.pop()
                if y > 0 and m[y - 1, x] and not labels[y - 1, x]:
                    labels[y - 1, x] = count
                    stack.append((y - 1, x))
                if y + 1 < H and m[y + 1, x] and not labels[y + 1, x]:
                    labels[y + 1, x] = count
                    stack.append((y + 1, x))
                if x > 0 and m[y, x - 1] and not labels[y, x - 1]:
                    labels[y, x - 1] = count
                    stack.append((y, x - 1))
                if x + 1 < W and m[y, x + 1] and not labels[y, x + 1]:
                    labels[y, x + 1] = count
                    stack.append((y, x + 1))
    return labels, count
