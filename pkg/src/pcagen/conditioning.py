"""Anatomical conditioning maps.

Two constructions: the full map (prostate-masked Sobel edges, boosted, with
the lesion outline written on top) and the simple map (prostate + lesion
outlines on black). Soft-edge blurring and hand-drawn PNG ingestion round out
the set. All outputs are grayscale stored as 3 identical planes in [0,1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import (
    ConfigError,
    DimensionError,
    InvariantViolation,
    IoError,
    MissingFile,
)
from .dataset import SegmentationPair
from .imgops import binary_dilate, gaussian_blur, nearest_resize
from .preprocess import PadGeometry, PreprocessedSample


@dataclass
class ConditioningParams:
    edge_threshold: float = 0.2
    boost_factor: float = 2.0
    outline_thickness: int = 2
    prostate_outline_value: float = 0.5
    lesion_outline_value: float = 1.0
    soft_sigma: float = 2.0
    prostate_dilation: int = 4

    def __post_init__(self):
        if not (0.0 < self.edge_threshold < 1.0):
            raise ConfigError(f"edge_threshold must be in (0,1), got {self.edge_threshold}")
        if self.boost_factor < 1.0:
            raise ConfigError(f"boost_factor must be >= 1, got {self.boost_factor}")
        if self.outline_thickness < 1:
            raise ConfigError(f"outline_thickness must be >= 1, got {self.outline_thickness}")
        for name in ("prostate_outline_value", "lesion_outline_value"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ConfigError(f"{name} must be in (0,1], got {v}")
        if self.lesion_outline_value <= self.prostate_outline_value:
            raise ConfigError("lesion outline value must exceed the prostate one")
        if self.soft_sigma <= 0:
            raise ConfigError(f"soft_sigma must be positive, got {self.soft_sigma}")
        if self.prostate_dilation < 0:
            raise ConfigError(f"prostate_dilation must be >= 0, got {self.prostate_dilation}")

    @classmethod
    def for_resolution(cls, resolution: int, **overrides) -> "ConditioningParams":
        """Defaults with outline thickness rescaled from its 512-px reference."""
        params = dict(
            outline_thickness=max(1, round(2 * resolution / 512)),
            prostate_dilation=max(1, round(4 * resolution / 512)),
        )
        params.update(overrides)
        return cls(**params)


def _full_content_geometry(resolution: int) -> PadGeometry:
    return PadGeometry(
        scale=1.0,
        content_left=0,
        content_right=resolution,
        content_top=0,
        content_bottom=resolution,
        resolution=resolution,
    )


@dataclass
class ConditioningImage:
    pixels: np.ndarray              # (3, R, R) float32, planes identical
    mode: str                       # full | simple | soft_edge
    geometry: PadGeometry

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise InvariantViolation(f"expected (3, R, R), got {self.pixels.shape}")
        if self.mode not in ("full", "simple", "soft_edge"):
            raise InvariantViolation(f"unknown mode {self.mode!r}")
        if self.pixels.shape[1] != self.pixels.shape[2]:
            raise InvariantViolation("conditioning image must be square")
        if np.any(self.pixels < 0) or np.any(self.pixels > 1):
            raise InvariantViolation("values outside [0,1]")
        if np.any(self.pixels[1] != self.pixels[0]) or np.any(self.pixels[2] != self.pixels[0]):
            raise InvariantViolation("planes differ; conditioning is grayscale")

    @property
    def plane(self) -> np.ndarray:
        return self.pixels[0]


def sobel_magnitude(img: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Gradient magnitude with the classic 3x3 kernels and replicate borders.

    With normalize=True (default) the map is scaled into [0,1] by its global
    max; an all-zero map stays all-zero.
    """
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"expected 2-D image, got ndim={a.ndim}")
    if a.shape[0] < 3 or a.shape[1] < 3:
        raise DimensionError(f"image must be at least 3x3, got {a.shape}")
    p = np.pad(a, 1, mode="edge")
    # Gx = [[-1,0,1],[-2,0,2],[-1,0,1]], Gy = Gx transposed
    gx = (
        (p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:])
        - (p[:-2, :-2] + 2.0 * p[1:-1, :-2] + p[2:, :-2])
    )
    gy = (
        (p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:])
        - (p[:-2, :-2] + 2.0 * p[:-2, 1:-1] + p[:-2, 2:])
    )
    mag = np.sqrt(gx * gx + gy * gy)
    if normalize:
        m = mag.max()
        if m > 0:
            mag = mag / m
    return mag.astype(np.float32)


def boost_intensity(edges: np.ndarray, threshold: float, factor: float) -> np.ndarray:
    if not (0.0 < threshold < 1.0):
        raise ConfigError(f"threshold must be in (0,1), got {threshold}")
    if factor < 1.0:
        raise ConfigError(f"boost factor must be >= 1, got {factor}")
    e = np.asarray(edges, dtype=np.float32)
    boosted = np.minimum(e * factor, 1.0)
    return np.where(e >= threshold, boosted, e)


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """Inner 4-connected boundary; out-of-image neighbours count as background."""
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise DimensionError(f"expected 2-D mask, got ndim={m.ndim}")
    p = np.pad(m, 1, mode="constant", constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def draw_outline(
    mask: np.ndarray, thickness: int, value: float, canvas: np.ndarray
) -> np.ndarray:
    if thickness < 1:
        raise ConfigError(f"thickness must be >= 1, got {thickness}")
    m = np.asarray(mask)
    c = np.asarray(canvas)
    if m.shape != c.shape:
        raise DimensionError(f"mask {m.shape} vs canvas {c.shape}")
    band = mask_boundary(m)
    if thickness > 1:
        band = binary_dilate(band, thickness - 1)
    out = c.astype(np.float32, copy=True)
    out[band] = value
    return out


def _to_image(plane: np.ndarray, mode: str, geometry: PadGeometry) -> ConditioningImage:
    plane = np.clip(plane, 0.0, 1.0).astype(np.float32)
    return ConditioningImage(
        pixels=np.repeat(plane[None], 3, axis=0), mode=mode, geometry=geometry
    )


def make_full_condition(
    x_s: PreprocessedSample,
    masks: SegmentationPair,
    params: ConditioningParams,
) -> ConditioningImage:
    """Prostate-masked, boosted Sobel edges with the lesion outline on top."""
    R = x_s.geometry.resolution
    if masks.prostate.shape != (R, R):
        raise DimensionError(f"masks {masks.prostate.shape} are not model-space ({R})")
    gray = x_s.pixels.mean(axis=0)
    support = binary_dilate(masks.prostate, params.prostate_dilation)
    edges = sobel_magnitude(gray * support)
    edges = boost_intensity(edges, params.edge_threshold, params.boost_factor)
    # kill the one-pixel gradient halo just outside the support
    edges = edges * support
    plane = draw_outline(
        masks.lesion, params.outline_thickness, params.lesion_outline_value, edges
    )
    return _to_image(plane, "full", x_s.geometry)


def make_simple_condition(
    masks: SegmentationPair,
    params: ConditioningParams,
    geometry: PadGeometry | None = None,
) -> ConditioningImage:
    """Prostate and lesion outlines on black; lesion drawn last so it wins overlaps."""
    if masks.height != masks.width:
        raise DimensionError("model-space masks must be square")
    if geometry is None:
        geometry = _full_content_geometry(masks.height)
    plane = np.zeros((masks.height, masks.width), dtype=np.float32)
    plane = draw_outline(
        masks.prostate, params.outline_thickness, params.prostate_outline_value, plane
    )
    plane = draw_outline(
        masks.lesion, params.outline_thickness, params.lesion_outline_value, plane
    )
    return _to_image(plane, "simple", geometry)


def soft_edge(cond: ConditioningImage, sigma: float) -> ConditioningImage:
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    blurred = gaussian_blur(cond.plane, sigma)
    m = blurred.max()
    if m > 0:
        blurred = blurred / m
    return _to_image(blurred, "soft_edge", cond.geometry)


def export_png(cond: ConditioningImage, path) -> None:
    data = np.round(cond.plane * 255.0).astype(np.uint8)
    try:
        Image.fromarray(data, mode="L").save(path)
    except OSError as e:
        raise IoError(f"cannot write PNG {path}: {e}") from e


def load_hand_drawn(
    path,
    params: ConditioningParams,
    resolution: int,
    allow_resize: bool = True,
) -> ConditioningImage:
    """Read a hand-drawn outline PNG, snapping values to the simple-mode classes."""
    try:
        img = Image.open(path)
        arr = np.asarray(img.convert("L")).astype(np.float32) / 255.0
    except FileNotFoundError as e:
        raise MissingFile(str(path)) from e
    except OSError as e:
        raise IoError(f"cannot read PNG {path}: {e}") from e
    if arr.shape != (resolution, resolution):
        if not allow_resize:
            raise DimensionError(
                f"{path}: mask is {arr.shape}, model resolution is {resolution}"
            )
        arr = nearest_resize(arr, resolution, resolution).astype(np.float32)
    classes = np.array(
        [0.0, params.prostate_outline_value, params.lesion_outline_value],
        dtype=np.float32,
    )
    idx = np.argmin(np.abs(arr[..., None] - classes[None, None, :]), axis=-1)
    plane = classes[idx]
    return _to_image(plane, "simple", _full_content_geometry(resolution))
