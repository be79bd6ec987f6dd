import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcagen import dataset as ds
from pcagen.errors import (
    ConfigError,
    CorruptTensor,
    DuplicateEntry,
    InvariantViolation,
    MissingFile,
    SchemaError,
)


# ---------------------------------------------------------------------------
# binary tensor format

def test_tensor_roundtrip_zeros(tmp_path):
    a = np.zeros((2, 3), dtype=np.float32)
    p = tmp_path / "z.pcag"
    ds.write_tensor(a, p)
    b = ds.read_tensor(p)
    assert b.dtype == np.float32
    assert np.array_equal(a, b)


def test_tensor_roundtrip_empty_preserves_ndim(tmp_path):
    a = np.zeros((0, 4), dtype=np.float32)
    p = tmp_path / "e.pcag"
    ds.write_tensor(a, p)
    b = ds.read_tensor(p)
    assert b.shape == (0, 4)


def test_tensor_roundtrip_random(tmp_path):
    rng = np.random.Generator(np.random.PCG64(3))
    a = rng.standard_normal((128, 84)).astype(np.float32)
    p = tmp_path / "r.pcag"
    ds.write_tensor(a, p)
    assert np.array_equal(ds.read_tensor(p), a)


def test_tensor_header_layout(tmp_path):
    # magic, version byte, ndim byte, little-endian u32 dims, then <f4 payload
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    p = tmp_path / "h.pcag"
    ds.write_tensor(a, p)
    raw = p.read_bytes()
    assert raw[:4] == b"PCAG"
    assert raw[4] == 1 and raw[5] == 2
    assert int.from_bytes(raw[6:10], "little") == 2
    assert int.from_bytes(raw[10:14], "little") == 3
    assert len(raw) == 14 + 6 * 4


def test_truncated_tensor_rejected(tmp_path):
    a = np.ones((4, 4), dtype=np.float32)
    p = tmp_path / "t.pcag"
    ds.write_tensor(a, p)
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(CorruptTensor):
        ds.read_tensor(p)


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "bad.pcag"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CorruptTensor):
        ds.read_tensor(p)


def test_trailing_bytes_rejected(tmp_path):
    a = np.ones((2, 2), dtype=np.float32)
    p = tmp_path / "x.pcag"
    ds.write_tensor(a, p)
    p.write_bytes(p.read_bytes() + b"\x00")
    with pytest.raises(CorruptTensor):
        ds.read_tensor(p)


@settings(max_examples=30, deadline=None)
@given(
    shape=st.lists(st.integers(0, 7), min_size=1, max_size=4),
    seed=st.integers(0, 2**31 - 1),
)
def test_tensor_roundtrip_fuzz(tmp_path_factory, shape, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    a = rng.standard_normal(tuple(shape)).astype(np.float32)
    p = tmp_path_factory.mktemp("fuzz") / "a.pcag"
    ds.write_tensor(a, p)
    assert np.array_equal(ds.read_tensor(p), a)


# ---------------------------------------------------------------------------
# masks

def test_mask_roundtrip(tmp_path):
    m = np.zeros((9, 7), dtype=np.uint8)
    m[2:5, 1:4] = 1
    p = tmp_path / "m.png"
    ds.write_mask(m, p)
    assert np.array_equal(ds.read_mask(p), m)


def test_mask_read_thresholds_gray(tmp_path):
    from PIL import Image

    arr = np.array([[0, 100, 127], [128, 200, 255]], dtype=np.uint8)
    p = tmp_path / "g.png"
    Image.fromarray(arr, mode="L").save(p)
    got = ds.read_mask(p)
    assert np.array_equal(got, np.array([[0, 0, 0], [1, 1, 1]], dtype=np.uint8))


# ---------------------------------------------------------------------------
# slice and segmentation containers

def test_slice_plane_count_must_match_b_values():
    pix = np.ones((2, 16, 16), dtype=np.float32)
    with pytest.raises(Exception):
        ds.DwiSlice(pixels=pix, b_values=[50, 400, 800], patient_id="p", slice_index=0)


def test_slice_rejects_negative_and_nonfinite():
    bad = np.ones((1, 16, 16), dtype=np.float32)
    bad[0, 0, 0] = -0.5
    with pytest.raises(Exception):
        ds.DwiSlice(pixels=bad, b_values=[50], patient_id="p", slice_index=0)
    nan = np.ones((1, 16, 16), dtype=np.float32)
    nan[0, 3, 3] = np.nan
    with pytest.raises(Exception):
        ds.DwiSlice(pixels=nan, b_values=[50], patient_id="p", slice_index=0)


def test_slice_b_values_must_increase():
    pix = np.ones((2, 16, 16), dtype=np.float32)
    with pytest.raises(Exception):
        ds.DwiSlice(pixels=pix, b_values=[400, 400], patient_id="p", slice_index=0)


def test_from_planes_sorts_by_b_value():
    lo = np.full((8, 8), 1.0, dtype=np.float32)
    hi = np.full((8, 8), 2.0, dtype=np.float32)
    slc = ds.DwiSlice.from_planes([lo, hi], [800, 50], patient_id="p", slice_index=1)
    assert slc.b_values == [50, 800]
    assert float(slc.pixels[0, 0, 0]) == 2.0


def test_lesion_outside_prostate_rejected():
    prostate = np.zeros((8, 8), dtype=np.uint8)
    prostate[2:6, 2:6] = 1
    lesion = np.zeros((8, 8), dtype=np.uint8)
    lesion[0, 0] = 1
    with pytest.raises(InvariantViolation):
        ds.SegmentationPair(prostate=prostate, lesion=lesion)


# ---------------------------------------------------------------------------
# phantom generator

def test_phantom_deterministic():
    cfg = ds.PhantomConfig(height=32, width=32, b_values=(50, 400, 800))
    a_slc, a_mm = ds.generate_phantom(7, cfg)
    b_slc, b_mm = ds.generate_phantom(7, cfg)
    assert np.array_equal(a_slc.pixels, b_slc.pixels)
    assert a_slc.b_values == b_slc.b_values
    assert np.array_equal(a_mm.prostate, b_mm.prostate)
    assert np.array_equal(a_mm.lesion, b_mm.lesion)


def test_phantom_lesion_inside_prostate():
    slc, mm = ds.generate_phantom(11, ds.PhantomConfig(height=32, width=32))
    assert mm.lesion.any()
    assert not (mm.lesion & ~mm.prostate).any()


def test_phantom_no_lesion_mode():
    _, mm = ds.generate_phantom(11, ds.PhantomConfig(height=32, width=32, lesion_present=False))
    assert not mm.lesion.any()


def test_phantom_b_value_decay_over_seeds():
    cfg = ds.PhantomConfig(height=32, width=32, b_values=(50, 400, 800))
    for seed in range(100):
        slc, mm = ds.generate_phantom(seed, cfg)
        inside = mm.prostate.astype(bool)
        means = [float(slc.pixels[i][inside].mean()) for i in range(3)]
        assert means[0] > means[1] > means[2], (seed, means)


def test_phantom_prostate_area_floor():
    for seed in range(50):
        for h, w in ((16, 16), (32, 32), (128, 84)):
            _, mm = ds.generate_phantom(seed, ds.PhantomConfig(height=h, width=w))
            assert mm.prostate.sum() >= 0.05 * h * w


def test_phantom_small_dims_rejected():
    with pytest.raises(ConfigError):
        ds.generate_phantom(0, ds.PhantomConfig(height=8, width=32))


def test_phantom_patient_id_embeds_seed():
    slc, _ = ds.generate_phantom(42, ds.PhantomConfig(height=16, width=16))
    assert "42" in slc.patient_id


# ---------------------------------------------------------------------------
# manifest

def write_minimal_dataset(root, pid="pa", idx=0):
    img = np.ones((1, 16, 16), dtype=np.float32)
    (root / "images").mkdir(exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    ds.write_tensor(img, root / "images" / f"{pid}_{idx}.pcag")
    prostate = np.zeros((16, 16), dtype=np.uint8)
    prostate[4:12, 4:12] = 1
    lesion = np.zeros_like(prostate)
    lesion[6:8, 6:8] = 1
    ds.write_mask(prostate, root / "masks" / f"{pid}_{idx}_prostate.png")
    ds.write_mask(lesion, root / "masks" / f"{pid}_{idx}_lesion.png")
    return {
        "patient_id": pid,
        "slice_index": idx,
        "b_values": [50],
        "image_path": f"images/{pid}_{idx}.pcag",
        "prostate_mask_path": f"masks/{pid}_{idx}_prostate.png",
        "lesion_mask_path": f"masks/{pid}_{idx}_lesion.png",
    }


def test_manifest_roundtrip(tmp_path):
    entry = write_minimal_dataset(tmp_path)
    mpath = tmp_path / "manifest.json"
    mpath.write_text(json.dumps({"root_dir": ".", "entries": [entry]}))
    man = ds.load_manifest(mpath)
    assert len(man.entries) == 1
    slc, mm = ds.read_slice(man.entries[0])
    assert slc.pixels.shape == (1, 16, 16)
    assert mm.prostate.sum() == 64


def test_manifest_duplicate_rejected(tmp_path):
    entry = write_minimal_dataset(tmp_path)
    mpath = tmp_path / "manifest.json"
    mpath.write_text(json.dumps({"root_dir": ".", "entries": [entry, dict(entry)]}))
    with pytest.raises(DuplicateEntry):
        ds.load_manifest(mpath)


def test_manifest_missing_file_rejected(tmp_path):
    entry = write_minimal_dataset(tmp_path)
    entry["image_path"] = "images/nope.pcag"
    mpath = tmp_path / "manifest.json"
    mpath.write_text(json.dumps({"root_dir": ".", "entries": [entry]}))
    with pytest.raises(MissingFile):
        ds.load_manifest(mpath)


def test_manifest_schema_errors(tmp_path):
    mpath = tmp_path / "manifest.json"
    mpath.write_text(json.dumps({"root_dir": ".", "entries": [{"patient_id": "x"}]}))
    with pytest.raises(SchemaError):
        ds.load_manifest(mpath)
    mpath.write_text("not json at all")
    with pytest.raises(SchemaError):
        ds.load_manifest(mpath)
