"""Slice/mask ingestion, the on-disk tensor format, and phantom generation.

Disk layout is a manifest JSON naming per-slice image tensors and mask PNGs.
Image tensors use a small self-describing binary format (see write_tensor);
masks are 8-bit PNGs with foreground 255 so they stay hand-editable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    ConfigError,
    CorruptTensor,
    DimensionMismatch,
    DuplicateEntry,
    InvariantViolation,
    IoError,
    MissingFile,
    SchemaError,
)
from .imgops import gaussian_blur

MAGIC = b"PCAG"
FORMAT_VERSION = 1


def write_tensor(array: np.ndarray, path) -> None:
    a = np.asarray(array)
    if a.dtype != np.float32:
        a = a.astype(np.float32)
    if a.size and not np.all(np.isfinite(a)):
        raise InvariantViolation(f"refusing to write non-finite values to {path}")
    if a.ndim > 255:
        raise InvariantViolation("ndim exceeds format limit of 255")
    header = MAGIC + struct.pack("<BB", FORMAT_VERSION, a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(np.ascontiguousarray(a).astype("<f4", copy=False).tobytes())
    except OSError as e:
        raise IoError(f"cannot write tensor {path}: {e}") from e


def read_tensor(path) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except FileNotFoundError as e:
        raise MissingFile(str(path)) from e
    except OSError as e:
        raise IoError(f"cannot read tensor {path}: {e}") from e
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise CorruptTensor(f"{path}: bad magic")
    version, ndim = struct.unpack_from("<BB", blob, 4)
    if version != FORMAT_VERSION:
        raise CorruptTensor(f"{path}: unsupported format version {version}")
    need = 6 + 4 * ndim
    if len(blob) < need:
        raise CorruptTensor(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", blob, 6)
    count = 1
    for d in dims:
        count *= d
    if len(blob) != need + 4 * count:
        raise CorruptTensor(
            f"{path}: expected {need + 4 * count} bytes, found {len(blob)}"
        )
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=need)
    return data.reshape(dims).astype(np.float32, copy=True)


def write_mask(mask: np.ndarray, path) -> None:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise InvariantViolation("mask must be 2-D")
    vals = np.unique(m)
    if not np.all(np.isin(vals, (0, 1))):
        raise InvariantViolation("mask must contain only {0,1}")
    img = Image.fromarray((m.astype(np.uint8) * 255), mode="L")
    try:
        img.save(path)
    except OSError as e:
        raise IoError(f"cannot write mask {path}: {e}") from e


def read_mask(path) -> np.ndarray:
    try:
        img = Image.open(path)
        arr = np.asarray(img.convert("L"))
    except FileNotFoundError as e:
        raise MissingFile(str(path)) from e
    except OSError as e:
        raise IoError(f"cannot read mask {path}: {e}") from e
    return (arr >= 128).astype(np.uint8)


@dataclass
class DwiSlice:
    pixels: np.ndarray          # (n_planes, H, W) float32, one plane per b-value
    b_values: list[int]
    patient_id: str
    slice_index: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[None]
        if self.pixels.ndim != 3:
            raise InvariantViolation(
                f"pixels must be (planes, H, W), got ndim={self.pixels.ndim}"
            )
        if self.pixels.shape[0] != len(self.b_values):
            raise InvariantViolation(
                f"{self.pixels.shape[0]} planes vs {len(self.b_values)} b-values"
            )
        if not np.all(np.isfinite(self.pixels)):
            raise InvariantViolation("non-finite pixel values")
        if np.any(self.pixels < 0):
            raise InvariantViolation("negative pixel values")
        if any(b2 <= b1 for b1, b2 in zip(self.b_values, self.b_values[1:])):
            raise InvariantViolation(f"b_values not strictly increasing: {self.b_values}")

    @classmethod
    def from_planes(cls, planes, b_values, patient_id, slice_index):
        """Build a slice from planes in storage order, sorting by b-value."""
        planes = np.asarray(planes, dtype=np.float32)
        if planes.ndim == 2:
            planes = planes[None]
        if planes.shape[0] != len(b_values):
            raise InvariantViolation(
                f"{planes.shape[0]} planes vs {len(b_values)} b-values"
            )
        order = np.argsort(b_values, kind="stable")
        return cls(
            pixels=planes[order],
            b_values=[int(b_values[i]) for i in order],
            patient_id=patient_id,
            slice_index=slice_index,
        )

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


@dataclass
class SegmentationPair:
    prostate: np.ndarray    # (H, W) uint8 in {0,1}
    lesion: np.ndarray

    def __post_init__(self):
        self.prostate = np.asarray(self.prostate, dtype=np.uint8)
        self.lesion = np.asarray(self.lesion, dtype=np.uint8)
        for name, m in (("prostate", self.prostate), ("lesion", self.lesion)):
            if m.ndim != 2:
                raise InvariantViolation(f"{name} mask must be 2-D")
            if m.size and m.max() > 1:
                raise InvariantViolation(f"{name} mask has values outside {{0,1}}")
        if self.prostate.shape != self.lesion.shape:
            raise DimensionMismatch(
                f"prostate {self.prostate.shape} vs lesion {self.lesion.shape}"
            )
        if np.any(self.lesion & ~self.prostate & 1):
            raise InvariantViolation("lesion pixels outside the prostate mask")

    @property
    def height(self) -> int:
        return self.prostate.shape[0]

    @property
    def width(self) -> int:
        return self.prostate.shape[1]


@dataclass
class ManifestEntry:
    patient_id: str
    slice_index: int
    image_path: Path
    prostate_mask_path: Path
    lesion_mask_path: Path
    b_values: list[int]


@dataclass
class DatasetManifest:
    root_dir: Path
    entries: list[ManifestEntry] = field(default_factory=list)


_ENTRY_FIELDS = (
    "patient_id", "slice_index", "image_path",
    "prostate_mask_path", "lesion_mask_path", "b_values",
)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError as e:
        raise MissingFile(str(path)) from e
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(doc, dict) or "entries" not in doc or "root_dir" not in doc:
        raise SchemaError(f"{path}: manifest must have root_dir and entries")
    root = Path(doc["root_dir"])
    if not root.is_absolute():
        root = path.parent / root
    entries = []
    seen = set()
    if not isinstance(doc["entries"], list):
        raise SchemaError(f"{path}: entries must be a list")
    for i, raw in enumerate(doc["entries"]):
        if not isinstance(raw, dict):
            raise SchemaError(f"{path}: entry {i} is not an object")
        for fld in _ENTRY_FIELDS:
            if fld not in raw:
                raise SchemaError(f"{path}: entry {i} missing field '{fld}'")
        if not isinstance(raw["b_values"], list) or not all(
            isinstance(b, int) for b in raw["b_values"]
        ):
            raise SchemaError(f"{path}: entry {i} b_values must be a list of ints")
        key = (raw["patient_id"], raw["slice_index"])
        if key in seen:
            raise DuplicateEntry(f"{path}: duplicate (patient_id, slice_index) {key}")
        seen.add(key)
        entry = ManifestEntry(
            patient_id=str(raw["patient_id"]),
            slice_index=int(raw["slice_index"]),
            image_path=root / raw["image_path"],
            prostate_mask_path=root / raw["prostate_mask_path"],
            lesion_mask_path=root / raw["lesion_mask_path"],
            b_values=list(raw["b_values"]),
        )
        for p in (entry.image_path, entry.prostate_mask_path, entry.lesion_mask_path):
            if not p.exists():
                raise MissingFile(f"{path}: entry {i} references missing file {p}")
        entries.append(entry)
    return DatasetManifest(root_dir=root, entries=entries)


def read_slice(entry: ManifestEntry) -> tuple[DwiSlice, SegmentationPair]:
    planes = read_tensor(entry.image_path)
    if planes.ndim == 2:
        planes = planes[None]
    if planes.ndim != 3:
        raise CorruptTensor(
            f"{entry.image_path}: expected 2-D or 3-D tensor, got ndim={planes.ndim}"
        )
    slc = DwiSlice.from_planes(
        planes, entry.b_values, entry.patient_id, entry.slice_index
    )
    prostate = read_mask(entry.prostate_mask_path)
    lesion = read_mask(entry.lesion_mask_path)
    if prostate.shape != (slc.height, slc.width):
        raise DimensionMismatch(
            f"{entry.prostate_mask_path}: mask {prostate.shape} vs image "
            f"{(slc.height, slc.width)}"
        )
    masks = SegmentationPair(prostate=prostate, lesion=lesion)
    return slc, masks


@dataclass
class PhantomConfig:
    height: int = 64
    width: int = 64
    b_values: tuple[int, ...] = (50,)
    lesion_present: bool = True
    # construction parameters, not clinical claims
    tissue_level: float = 0.75
    lesion_level: float = 1.35
    background_level: float = 0.05
    noise_amplitude: float = 0.01
    decay_scale: float = 700.0      # per-plane factor exp(-b / decay_scale)


def generate_phantom(seed: int, cfg: PhantomConfig) -> tuple[DwiSlice, SegmentationPair]:
    """Synthesize one slice: elliptical gland, bright lesion, decaying b-value planes."""
    if cfg.height < 16 or cfg.width < 16:
        raise ConfigError(f"phantom dims must be >= 16, got {cfg.height}x{cfg.width}")
    if any(b2 <= b1 for b1, b2 in zip(cfg.b_values, cfg.b_values[1:])):
        raise ConfigError(f"b_values must be strictly increasing: {cfg.b_values}")
    rng = np.random.Generator(np.random.PCG64(seed))
    H, W = cfg.height, cfg.width
    cy = H * rng.uniform(0.36, 0.64)
    cx = W * rng.uniform(0.36, 0.64)
    ay = H * rng.uniform(0.17, 0.33)
    ax = W * rng.uniform(0.17, 0.33)
    yy, xx = np.mgrid[0:H, 0:W]
    pd = ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2
    prostate = (pd <= 1.0).astype(np.uint8)

    lesion = np.zeros((H, W), dtype=np.uint8)
    if cfg.lesion_present:
        # offset + radius chosen so the lesion ellipse sits strictly inside the gland
        r_off = rng.uniform(0.0, 0.55)
        theta = rng.uniform(0.0, 2.0 * np.pi)
        lcy = cy + ay * r_off * np.sin(theta)
        lcx = cx + ax * r_off * np.cos(theta)
        lry = max(1.0, ay * rng.uniform(0.24, 0.40))
        lrx = max(1.0, ax * rng.uniform(0.24, 0.40))
        ld = ((yy - lcy) / lry) ** 2 + ((xx - lcx) / lrx) ** 2
        lesion = ((ld <= 1.0) & (pd <= 0.92)).astype(np.uint8)
        if not lesion.any():
            raise ConfigError("lesion requested but prostate too small to contain it")

    signal = (
        cfg.tissue_level * prostate.astype(np.float64)
        + (cfg.lesion_level - cfg.tissue_level) * lesion.astype(np.float64)
    )
    # soften the anatomy edge slightly so gradients are not single-pixel cliffs
    signal = gaussian_blur(signal, sigma=0.7)
    planes = []
    for b in cfg.b_values:
        decay = float(np.exp(-b / cfg.decay_scale))
        noise = gaussian_blur(rng.standard_normal((H, W)), sigma=1.0)
        plane = decay * signal + cfg.background_level + cfg.noise_amplitude * noise
        planes.append(np.clip(plane, 0.0, None))
    slc = DwiSlice(
        pixels=np.stack(planes).astype(np.float32),
        b_values=list(cfg.b_values),
        patient_id=f"phantom{seed:06d}",
        slice_index=0,
    )
    return slc, SegmentationPair(prostate=prostate, lesion=lesion)
