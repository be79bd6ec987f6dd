"""Set-level and pair-level evaluation: Frechet distance over pluggable
features, windowed SSIM, and an LPIPS-shaped perceptual distance.

The feature backbone is deliberately not a pretrained network: either raw
downsampled pixels or a fixed seeded random conv stack. Scores are
self-consistent for comparing runs of this pipeline, not comparable to
published numbers produced with Inception/VGG backbones.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ConfigError,
    DegenerateInput,
    DimensionError,
    InsufficientData,
    NumericalError,
)
from .imgops import bilinear_resize, label_components
from .preprocess import PadGeometry, zero_side_regions


# ---------------------------------------------------------------------------
# feature extractors

class PixelExtractor:
    """Grayscale image downsampled to a small grid; the sanity baseline."""

    def __init__(self, grid: int = 8):
        self.grid = grid
        self.name = "pixels"
        self.D = grid * grid

    def __call__(self, image: np.ndarray) -> np.ndarray:
        gray = _gray_plane(image)
        return bilinear_resize(gray, self.grid, self.grid).ravel().astype(np.float64)


class RandConvExtractor:
    """Fixed seeded random conv stack with ReLU, stride-2 3x3 layers.

    He-scaled weights keep activation magnitudes stable through depth. The
    final layer's global average pool is the feature vector; intermediate
    spatial maps feed perceptual_distance.
    """

    def __init__(self, seed: int = 20331, channels: tuple[int, ...] = (16, 32, 64),
                 in_channels: int = 3):
        rng = np.random.Generator(np.random.PCG64(seed))
        self.name = "randconv"
        self.channels = tuple(channels)
        self.D = channels[-1]
        self.weights = []
        c_in = in_channels
        for c_out in channels:
            std = np.sqrt(2.0 / (c_in * 9))
            w = rng.normal(0.0, std, size=(c_out, c_in, 3, 3)).astype(np.float64)
            self.weights.append(w)
            c_in = c_out

    def feature_maps(self, image: np.ndarray) -> list[np.ndarray]:
        x = np.asarray(image, dtype=np.float64)
        if x.ndim == 2:
            x = np.repeat(x[None], 3, axis=0)
        if x.ndim != 3:
            raise DimensionError(f"expected (C,H,W) image, got ndim={x.ndim}")
        maps = []
        for w in self.weights:
            x = _conv3x3_stride2(x, w)
            x = np.maximum(x, 0.0)
            maps.append(x)
        return maps

    def __call__(self, image: np.ndarray) -> np.ndarray:
        return self.feature_maps(image)[-1].mean(axis=(1, 2))


def _gray_plane(image: np.ndarray) -> np.ndarray:
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 3:
        return a.mean(axis=0)
    if a.ndim == 2:
        return a
    raise DimensionError(f"expected 2-D or 3-plane image, got ndim={a.ndim}")


def _conv3x3_stride2(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    p = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    v = sliding_window_view(p, (3, 3), axis=(1, 2))[:, ::2, ::2]
    return np.einsum("oikl,ihwkl->ohw", w, v, optimize=True)


_DEFAULT_EXTRACTOR: RandConvExtractor | None = None


def default_randconv() -> RandConvExtractor:
    global _DEFAULT_EXTRACTOR
    if _DEFAULT_EXTRACTOR is None:
        _DEFAULT_EXTRACTOR = RandConvExtractor()
    return _DEFAULT_EXTRACTOR


def make_extractor(name: str):
    if name == "pixels":
        return PixelExtractor()
    if name == "randconv":
        return default_randconv()
    raise ConfigError(f"unknown extractor {name!r}")


# ---------------------------------------------------------------------------
# Frechet distance

@dataclass
class GaussianMoments:
    mu: np.ndarray
    sigma: np.ndarray


def fit_moments(features: np.ndarray) -> GaussianMoments:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise DimensionError(f"expected N x D features, got ndim={f.ndim}")
    n = f.shape[0]
    if n < 2:
        raise InsufficientData(f"need at least 2 samples for moments, got {n}")
    mu = f.mean(axis=0)
    centered = f - mu
    sigma = centered.T @ centered / (n - 1)
    sigma = (sigma + sigma.T) / 2.0
    return GaussianMoments(mu=mu, sigma=sigma)


def _psd_eigvals(sigma: np.ndarray, what: str) -> np.ndarray:
    vals = np.linalg.eigvalsh(sigma)
    tol = 1e-8 * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol:
        raise NumericalError(f"{what} is not PSD (min eigenvalue {vals.min()})")
    return vals


def frechet_distance(a: GaussianMoments, b: GaussianMoments) -> float:
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise DimensionError("moment dimensions differ")
    _psd_eigvals(a.sigma, "first covariance")
    w2, v2 = np.linalg.eigh(b.sigma)
    tol = 1e-8 * max(1.0, float(np.abs(w2).max(initial=0.0)))
    if w2.min(initial=0.0) < -tol:
        raise NumericalError(f"second covariance is not PSD (min eigenvalue {w2.min()})")
    root = v2 @ np.diag(np.sqrt(np.clip(w2, 0.0, None))) @ v2.T
    m = root @ a.sigma @ root
    m = (m + m.T) / 2.0
    g = np.linalg.eigvalsh(m)
    tol = 1e-8 * max(1.0, float(np.abs(g).max(initial=0.0)))
    if g.min(initial=0.0) < -tol:
        raise NumericalError(f"product matrix is not PSD (min eigenvalue {g.min()})")
    tr_sqrt = float(np.sqrt(np.clip(g, 0.0, None)).sum())
    diff = a.mu - b.mu
    d2 = float(diff @ diff) + float(np.trace(a.sigma)) + float(np.trace(b.sigma)) \
        - 2.0 * tr_sqrt
    return max(d2, 0.0)


# ---------------------------------------------------------------------------
# SSIM

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2
_SSIM_WINDOW = 8


def _ssim_plane(a: np.ndarray, b: np.ndarray) -> float:
    w = _SSIM_WINDOW
    n = w * w
    wa = sliding_window_view(a, (w, w))
    wb = sliding_window_view(b, (w, w))
    mu1 = wa.sum(axis=(-2, -1)) / n
    mu2 = wb.sum(axis=(-2, -1)) / n
    e11 = sliding_window_view(a * a, (w, w)).sum(axis=(-2, -1)) / n
    e22 = sliding_window_view(b * b, (w, w)).sum(axis=(-2, -1)) / n
    e12 = sliding_window_view(a * b, (w, w)).sum(axis=(-2, -1)) / n
    var1 = e11 - mu1 * mu1
    var2 = e22 - mu2 * mu2
    cov = e12 - mu1 * mu2
    num = (2.0 * mu1 * mu2 + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu1 * mu1 + mu2 * mu2 + _SSIM_C1) * (var1 + var2 + _SSIM_C2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Uniform 8x8-window SSIM, stride 1, L = 1; plane-wise mean for 3-plane input."""
    pa = np.asarray(a, dtype=np.float64)
    pb = np.asarray(b, dtype=np.float64)
    if pa.shape != pb.shape:
        raise DimensionError(f"shape mismatch {pa.shape} vs {pb.shape}")
    if pa.ndim == 2:
        pa, pb = pa[None], pb[None]
    if pa.ndim != 3:
        raise DimensionError(f"expected 2-D or plane-stacked images, got ndim={pa.ndim}")
    if pa.shape[1] < _SSIM_WINDOW or pa.shape[2] < _SSIM_WINDOW:
        raise DimensionError(f"images must be at least 8x8, got {pa.shape[1:]}")
    return float(np.mean([_ssim_plane(pa[i], pb[i]) for i in range(pa.shape[0])]))


# ---------------------------------------------------------------------------
# perceptual distance

def perceptual_distance(a: np.ndarray, b: np.ndarray, extractor_stack=None) -> float:
    """Sum over layers of spatially-averaged squared unit-normalized feature diffs."""
    pa = np.asarray(a, dtype=np.float64)
    pb = np.asarray(b, dtype=np.float64)
    if pa.shape != pb.shape:
        raise DimensionError(f"shape mismatch {pa.shape} vs {pb.shape}")
    if extractor_stack is None:
        ex = default_randconv()
        maps_a = ex.feature_maps(pa)
        maps_b = ex.feature_maps(pb)
    else:
        maps_a = [f(pa) for f in extractor_stack]
        maps_b = [f(pb) for f in extractor_stack]
    total = 0.0
    for fa, fb in zip(maps_a, maps_b):
        na = fa / np.sqrt((fa * fa).sum(axis=0, keepdims=True) + 1e-10)
        nb = fb / np.sqrt((fb * fb).sum(axis=0, keepdims=True) + 1e-10)
        d = na - nb
        total += float((d * d).sum(axis=0).mean())
    return total


# ---------------------------------------------------------------------------
# centroids for steering checks

def brightest_blob_centroid(image: np.ndarray, quantile: float = 0.93) -> tuple[float, float]:
    """Intensity-weighted centroid of the brightest 4-connected blob."""
    plane = _gray_plane(image)
    thr = float(np.quantile(plane, quantile))
    mask = plane >= thr
    labels, count = label_components(mask)
    if count == 0:
        raise DegenerateInput("no pixels above the blob threshold")
    best, best_sum = 1, -np.inf
    for k in range(1, count + 1):
        s = float(plane[labels == k].sum())
        if s > best_sum:
            best, best_sum = k, s
    ys, xs = np.nonzero(labels == best)
    wts = plane[ys, xs]
    wsum = float(wts.sum())
    if wsum <= 0:
        return float(ys.mean()), float(xs.mean())
    return float((ys * wts).sum() / wsum), float((xs * wts).sum() / wsum)


def mask_centroid(mask: np.ndarray) -> tuple[float, float]:
    ys, xs = np.nonzero(np.asarray(mask))
    if len(ys) == 0:
        raise DegenerateInput("empty mask has no centroid")
    return float(ys.mean()), float(xs.mean())


# ---------------------------------------------------------------------------
# end-to-end set evaluation

@dataclass
class EvalConfig:
    extractor: str = "randconv"
    post_process: bool = True
    pairing: str = "index"          # index | random
    seed: int = 0

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(asdict(self), sort_keys=True).encode()
        ).hexdigest()[:16]


@dataclass
class MetricsReport:
    fid: float
    ssim_mean: float
    lpips_mean: float
    n_real: int
    n_gen: int
    extractor_name: str
    post_processed: bool
    seed: int
    config_digest: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def evaluate_sets(
    real: list[np.ndarray],
    generated: list[np.ndarray],
    geometry: PadGeometry | None,
    cfg: EvalConfig,
) -> MetricsReport:
    """FID over set features plus paired SSIM / perceptual means.

    Pairing: with "index", generated image i is compared against real
    image i mod n_real (generation cycles conditioning images in real-set
    order, so this is conditioning provenance); "random" draws a seeded
    random real partner per generated image.
    """
    if len(real) < 2 or len(generated) < 2:
        raise InsufficientData(
            f"need >= 2 images per set, got {len(real)} real / {len(generated)} generated"
        )
    if cfg.pairing not in ("index", "random"):
        raise ConfigError(f"unknown pairing {cfg.pairing!r}")
    reals = [np.asarray(im, dtype=np.float32) for im in real]
    gens = [np.asarray(im, dtype=np.float32) for im in generated]
    shapes = {im.shape for im in reals} | {im.shape for im in gens}
    if len(shapes) != 1:
        raise DimensionError(f"inconsistent image shapes across sets: {sorted(shapes)}")
    if cfg.post_process:
        if geometry is None:
            raise ConfigError("post_process requires a pad geometry")
        reals = [zero_side_regions(im, geometry) for im in reals]
        gens = [zero_side_regions(im, geometry) for im in gens]
    ex = make_extractor(cfg.extractor)
    feats_r = np.stack([ex(im) for im in reals])
    feats_g = np.stack([ex(im) for im in gens])
    fid = frechet_distance(fit_moments(feats_r), fit_moments(feats_g))
    if cfg.pairing == "index":
        partners = [i % len(reals) for i in range(len(gens))]
    else:
        rng = np.random.Generator(np.random.PCG64(cfg.seed))
        partners = rng.integers(0, len(reals), size=len(gens)).tolist()
    ssim_vals = [ssim(gens[i], reals[j]) for i, j in enumerate(partners)]
    lpips_vals = [perceptual_distance(gens[i], reals[j]) for i, j in enumerate(partners)]
    return MetricsReport(
        fid=float(fid),
        ssim_mean=float(np.mean(ssim_vals)),
        lpips_mean=float(np.mean(lpips_vals)),
        n_real=len(reals),
        n_gen=len(gens),
        extractor_name=ex.name,
        post_processed=bool(cfg.post_process),
        seed=cfg.seed,
        config_digest=cfg.digest(),
    )
