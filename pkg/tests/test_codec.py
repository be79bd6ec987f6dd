import numpy as np
import pytest

from pcagen import codec as cdc
from pcagen.errors import ConfigError, CorruptTensor, ShapeError


def test_identity_codec_bit_exact(tiny_stack):
    pixels, _ = tiny_stack
    params = cdc.identity_codec()
    z = cdc.encode(params, pixels)
    assert np.array_equal(z, pixels)
    back = cdc.decode(params, z)
    assert np.array_equal(back, pixels)
    assert params.latent_channels == 3 and params.factor == 1


def test_identity_codec_single_image(tiny_stack):
    pixels, _ = tiny_stack
    one = pixels[0]
    z = cdc.encode(cdc.identity_codec(), one)
    assert z.shape == one.shape
    assert np.array_equal(z, one)


def test_psnr_hand_values():
    assert cdc.psnr(1.0) == pytest.approx(0.0)
    assert cdc.psnr(0.01) == pytest.approx(20.0)
    assert cdc.psnr(1e-4) == pytest.approx(40.0)


def test_config_rejects_bad_factor():
    with pytest.raises(ConfigError):
        cdc.CodecConfig(downsample_factor=3)
    with pytest.raises(ConfigError):
        cdc.CodecConfig(downsample_factor=0)


def test_trained_codec_shapes_and_determinism(tiny_stack):
    pixels, _ = tiny_stack
    cfg = cdc.CodecConfig(
        downsample_factor=2, latent_channels=4, base_width=8,
        train_steps=12, batch_size=8, learning_rate=1e-3, seed=0,
    )
    params1, curve1 = cdc.train_codec(pixels, cfg)
    params2, curve2 = cdc.train_codec(pixels, cfg)
    assert len(curve1) == 12
    assert curve1 == curve2  # same seed, same losses
    z = cdc.encode(params1, pixels)
    assert z.shape == (16, 4, 8, 8)
    back = cdc.decode(params1, z)
    assert back.shape == pixels.shape
    assert np.isfinite(back).all()
    assert cdc.state_digest(params1) == cdc.state_digest(params2)


def test_training_reduces_reconstruction_error(tiny_stack):
    pixels, _ = tiny_stack
    cfg = cdc.CodecConfig(
        downsample_factor=2, latent_channels=4, base_width=8,
        train_steps=0, batch_size=8, seed=0,
    )
    fresh, _ = cdc.train_codec(pixels, cfg)
    cfg2 = cdc.CodecConfig(
        downsample_factor=2, latent_channels=4, base_width=8,
        train_steps=150, batch_size=8, learning_rate=2e-3, seed=0,
    )
    trained, _ = cdc.train_codec(pixels, cfg2)
    assert cdc.reconstruction_mse(trained, pixels) < cdc.reconstruction_mse(fresh, pixels)


def test_encode_wrong_shape_rejected(tiny_stack):
    pixels, _ = tiny_stack
    cfg = cdc.CodecConfig(downsample_factor=2, base_width=8, train_steps=0, seed=0)
    params, _ = cdc.train_codec(pixels, cfg)
    with pytest.raises(ShapeError):
        cdc.encode(params, np.ones((5, 16, 16), dtype=np.float32))
    with pytest.raises(ShapeError):
        cdc.decode(params, np.ones((2, 16, 16), dtype=np.float32))


def test_codec_save_load_roundtrip(tmp_path, tiny_stack):
    pixels, _ = tiny_stack
    cfg = cdc.CodecConfig(downsample_factor=2, base_width=8, train_steps=5, seed=3)
    params, _ = cdc.train_codec(pixels, cfg)
    cdc.save_codec(params, tmp_path / "ck")
    loaded = cdc.load_codec(tmp_path / "ck")
    assert loaded.fingerprint == params.fingerprint
    assert cdc.state_digest(loaded) == cdc.state_digest(params)
    assert np.array_equal(cdc.encode(loaded, pixels), cdc.encode(params, pixels))


def test_codec_identity_save_load(tmp_path):
    params = cdc.identity_codec()
    cdc.save_codec(params, tmp_path / "ident")
    loaded = cdc.load_codec(tmp_path / "ident")
    x = np.random.Generator(np.random.PCG64(0)).random((2, 3, 16, 16)).astype(np.float32)
    assert np.array_equal(cdc.decode(loaded, cdc.encode(loaded, x)), x)


def test_codec_load_detects_corruption(tmp_path, tiny_stack):
    pixels, _ = tiny_stack
    cfg = cdc.CodecConfig(downsample_factor=2, base_width=8, train_steps=2, seed=0)
    params, _ = cdc.train_codec(pixels, cfg)
    cdc.save_codec(params, tmp_path / "ck")
    victim = sorted((tmp_path / "ck").glob("*.pcag"))[0]
    raw = bytearray(victim.read_bytes())
    raw[-1] ^= 0xFF
    victim.write_bytes(bytes(raw))
    with pytest.raises(CorruptTensor):
        cdc.load_codec(tmp_path / "ck")
