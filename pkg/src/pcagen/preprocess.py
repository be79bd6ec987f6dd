"""Intensity normalization and canonical model-space geometry.

normalize implements the scalar affine map that lands every non-constant
input at mean 0.5 / std 0.125; resize_pad takes arbitrary slice dims to a
square model resolution while recording where the real content sits, so the
evaluation-time side-zeroing can be derived instead of hard-coded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .dataset import DwiSlice, SegmentationPair
from .errors import (
    ChannelCountError,
    ConfigError,
    DegenerateInput,
    DimensionError,
    GeometryMismatch,
    InvariantViolation,
)
from .imgops import bilinear_resize, nearest_resize


@dataclass
class PadGeometry:
    scale: float
    content_left: int
    content_right: int
    content_top: int
    content_bottom: int
    resolution: int

    def __post_init__(self):
        if not (0 <= self.content_left < self.content_right <= self.resolution):
            raise InvariantViolation(
                f"bad column bounds [{self.content_left}, {self.content_right}) "
                f"for resolution {self.resolution}"
            )
        if not (0 <= self.content_top < self.content_bottom <= self.resolution):
            raise InvariantViolation(
                f"bad row bounds [{self.content_top}, {self.content_bottom}) "
                f"for resolution {self.resolution}"
            )
        if self.scale <= 0:
            raise InvariantViolation(f"scale must be positive, got {self.scale}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PadGeometry":
        return cls(**json.loads(text))


@dataclass
class PreprocessedSample:
    pixels: np.ndarray              # (3, R, R) float32
    source: tuple[str, int]
    geometry: PadGeometry

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise InvariantViolation(f"expected (3, R, R), got {self.pixels.shape}")
        R = self.geometry.resolution
        if self.pixels.shape[1:] != (R, R):
            raise InvariantViolation(
                f"pixels {self.pixels.shape[1:]} vs geometry resolution {R}"
            )
        if not np.all(np.isfinite(self.pixels)):
            raise InvariantViolation("non-finite pixel values")


@dataclass
class PreprocessConfig:
    target_resolution: int = 512
    clamp: bool = True
    crop_to_prostate: bool = False
    crop_margin: float = 0.1


def normalize(x: np.ndarray) -> np.ndarray:
    """(x - (mean - 4*std)) / (8*std) with scalar stats over every element."""
    a = np.asarray(x)
    if not np.all(np.isfinite(a)):
        raise InvariantViolation("non-finite input")
    m = float(np.mean(a, dtype=np.float64))
    s = float(np.std(a, dtype=np.float64))        # population form
    if s == 0.0:
        raise DegenerateInput("constant image has no scale")
    out = (a.astype(np.float64) - (m - 4.0 * s)) / (8.0 * s)
    return out.astype(np.float32)


def _as_planes(x: np.ndarray) -> tuple[np.ndarray, bool]:
    a = np.asarray(x)
    if a.ndim == 2:
        return a[None], True
    if a.ndim == 3:
        return a, False
    raise DimensionError(f"expected 2-D or 3-plane array, got ndim={a.ndim}")


def resize_pad(x: np.ndarray, target: int) -> tuple[np.ndarray, PadGeometry]:
    """Aspect-preserving bilinear resize to a square canvas with zero side padding."""
    if target < 16:
        raise ConfigError(f"target resolution must be >= 16, got {target}")
    planes, single = _as_planes(x)
    _, H, W = planes.shape
    if H == 0 or W == 0:
        raise DimensionError("empty input")
    scale = target / max(H, W)
    out_h = int(round(H * scale))
    out_w = int(round(W * scale))
    pad_top = (target - out_h) // 2
    pad_left = (target - out_w) // 2
    geom = PadGeometry(
        scale=scale,
        content_left=pad_left,
        content_right=pad_left + out_w,
        content_top=pad_top,
        content_bottom=pad_top + out_h,
        resolution=target,
    )
    canvas = np.zeros((planes.shape[0], target, target), dtype=np.float32)
    for i in range(planes.shape[0]):
        canvas[i, pad_top:pad_top + out_h, pad_left:pad_left + out_w] = (
            bilinear_resize(planes[i], out_h, out_w)
        )
    if single:
        canvas = np.repeat(canvas, 3, axis=0)
    return canvas, geom


def resize_pad_mask(mask: np.ndarray, geometry: PadGeometry) -> np.ndarray:
    """Push a binary mask through the exact geometry of its paired image."""
    m = np.asarray(mask)
    out_h = geometry.content_bottom - geometry.content_top
    out_w = geometry.content_right - geometry.content_left
    canvas = np.zeros((geometry.resolution, geometry.resolution), dtype=np.uint8)
    canvas[
        geometry.content_top:geometry.content_bottom,
        geometry.content_left:geometry.content_right,
    ] = nearest_resize(m, out_h, out_w).astype(np.uint8)
    return canvas


def stack_channels(slc: DwiSlice) -> np.ndarray:
    if slc.pixels.shape[0] != 3:
        raise ChannelCountError(
            f"channel stacking needs exactly 3 planes, got {slc.pixels.shape[0]}"
        )
    # DwiSlice construction already sorted planes by ascending b-value
    return slc.pixels.copy()


def _crop_to_prostate(planes, masks: SegmentationPair, margin: float):
    ys, xs = np.nonzero(masks.prostate)
    if len(ys) == 0:
        raise DegenerateInput("crop requested but prostate mask is empty")
    H, W = masks.prostate.shape
    my = int(round((ys.max() - ys.min() + 1) * margin))
    mx = int(round((xs.max() - xs.min() + 1) * margin))
    y0, y1 = max(0, ys.min() - my), min(H, ys.max() + 1 + my)
    x0, x1 = max(0, xs.min() - mx), min(W, xs.max() + 1 + mx)
    planes = planes[:, y0:y1, x0:x1]
    masks = SegmentationPair(
        prostate=masks.prostate[y0:y1, x0:x1],
        lesion=masks.lesion[y0:y1, x0:x1],
    )
    return planes, masks


def prepare_sample(
    slc: DwiSlice,
    masks: SegmentationPair,
    cfg: PreprocessConfig,
) -> tuple[PreprocessedSample, SegmentationPair]:
    """Normalize then resize/pad one slice; masks ride the same geometry.

    Returns the model-space sample plus the masks resampled with
    nearest-neighbour through the identical resize and padding offsets.
    """
    if (masks.height, masks.width) != (slc.height, slc.width):
        raise GeometryMismatch(
            f"masks {(masks.height, masks.width)} vs slice {(slc.height, slc.width)}"
        )
    n = slc.pixels.shape[0]
    if n == 3:
        planes = stack_channels(slc)
    elif n == 1:
        planes = slc.pixels
    else:
        raise ChannelCountError(f"expected 1 or 3 planes, got {n}")
    if cfg.crop_to_prostate:
        planes, masks = _crop_to_prostate(planes, masks, cfg.crop_margin)
    x = normalize(planes if n == 3 else planes[0])
    pixels, geom = resize_pad(x, cfg.target_resolution)
    if cfg.clamp:
        pixels = np.clip(pixels, 0.0, 1.0)
    sample = PreprocessedSample(
        pixels=pixels,
        source=(slc.patient_id, slc.slice_index),
        geometry=geom,
    )
    model_masks = SegmentationPair(
        prostate=resize_pad_mask(masks.prostate, geom),
        lesion=resize_pad_mask(masks.lesion, geom),
    )
    return sample, model_masks


def zero_side_regions(img: np.ndarray, geometry: PadGeometry) -> np.ndarray:
    """Zero the padding rows/columns recorded in the geometry. Pure."""
    a = np.asarray(img)
    planes, single = _as_planes(a)
    R = geometry.resolution
    if planes.shape[1] != R or planes.shape[2] != R:
        raise GeometryMismatch(
            f"image {planes.shape[1:]} vs geometry resolution {R}"
        )
    out = planes.copy()
    out[:, :, :geometry.content_left] = 0
    out[:, :, geometry.content_right:] = 0
    out[:, :geometry.content_top, :] = 0
    out[:, geometry.content_bottom:, :] = 0
    return out[0] if single else out
