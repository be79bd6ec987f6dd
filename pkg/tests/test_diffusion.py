import numpy as np
import pytest
import torch

from pcagen import diffusion as diff
from pcagen.errors import ConfigError, InsufficientData, ShapeError
from pcagen.nnutil import seeded_rng


# ---------------------------------------------------------------------------
# schedule

def test_schedule_T2_hand_values():
    # betas (0.1, 0.2): alphas (0.9, 0.8), cumulative products (0.9, 0.72)
    s = diff.make_schedule(2, 0.1, 0.2)
    assert np.array_equal(s.betas, np.array([0.1, 0.2]))
    assert s.alpha_bars[0] == pytest.approx(0.9, abs=1e-15)
    assert s.alpha_bars[1] == pytest.approx(0.72, abs=1e-15)


@pytest.mark.parametrize("T", [1, 2, 200, 1000])
def test_alpha_bar_strictly_decreasing(T):
    s = diff.make_schedule(T, 1e-4, 0.02)
    assert s.T == T
    assert np.all(np.diff(s.alpha_bars) < 0) or T == 1
    assert np.all(s.alpha_bars > 0) and np.all(s.alpha_bars < 1)


def test_schedule_T1_single_step():
    s = diff.make_schedule(1, 1e-4, 0.02)
    # linspace with one point sits at beta_start
    assert s.betas.shape == (1,)
    assert s.betas[0] == pytest.approx(1e-4)


def test_schedule_float64():
    s = diff.make_schedule(100, 1e-4, 0.02)
    assert s.betas.dtype == np.float64
    assert s.alpha_bars.dtype == np.float64


def test_schedule_validation():
    with pytest.raises(ConfigError):
        diff.make_schedule(0, 1e-4, 0.02)
    with pytest.raises(ConfigError):
        diff.make_schedule(10, 0.2, 0.1)
    with pytest.raises(ConfigError):
        diff.make_schedule(10, 1e-4, 1.5)
    with pytest.raises(ConfigError):
        diff.make_schedule(10, 1e-4, 0.02, kind="cosine")


# ---------------------------------------------------------------------------
# forward process

def test_q_sample_formula_exact():
    s = diff.make_schedule(10, 0.1, 0.2)
    x0 = np.full((1, 4, 4), 2.0, dtype=np.float32)
    noise = np.full((1, 4, 4), -1.0, dtype=np.float32)
    t = 3
    ab = float(s.alpha_bars[t - 1])
    expect = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
    got = diff.q_sample(x0, t, noise, s)
    assert np.allclose(got, expect, atol=1e-6)


def test_q_sample_variance_matches_schedule():
    s = diff.make_schedule(200, 1e-4, 0.06)
    rng = seeded_rng(0)
    n = 100_000
    for t in (1, 50, 200):
        x0 = rng.standard_normal(n).astype(np.float32)
        noise = rng.standard_normal(n).astype(np.float32)
        xt = diff.q_sample(x0.reshape(-1, 1, 1), t, noise.reshape(-1, 1, 1), s)
        ab = float(s.alpha_bars[t - 1])
        target = ab + (1.0 - ab)
        assert abs(float(np.var(xt)) - target) / target < 0.02


def test_q_sample_vector_t():
    s = diff.make_schedule(10, 0.1, 0.2)
    x0 = np.ones((3, 1, 2, 2), dtype=np.float32)
    noise = np.zeros_like(x0)
    t = np.array([1, 5, 10])
    out = diff.q_sample(x0, t, noise, s)
    for i, ti in enumerate(t):
        assert out[i, 0, 0, 0] == pytest.approx(np.sqrt(s.alpha_bars[ti - 1]))


def test_q_sample_t_out_of_range():
    s = diff.make_schedule(10, 0.1, 0.2)
    x = np.ones((1, 2, 2), dtype=np.float32)
    with pytest.raises(IndexError):
        diff.q_sample(x, 0, x, s)
    with pytest.raises(IndexError):
        diff.q_sample(x, 11, x, s)


# ---------------------------------------------------------------------------
# training loss, with the draw-replay oracle

def test_training_loss_zero_for_perfect_denoiser():
    """Replaying the documented draw order (t, then noise) from a cloned rng
    and answering with that exact noise must give a loss of exactly 0.0."""
    s = diff.make_schedule(50, 1e-4, 0.05)
    x0 = seeded_rng(7).standard_normal((3, 8, 8)).astype(np.float32)

    replay = seeded_rng(123)
    t_expected = int(replay.integers(1, s.T + 1))
    eps_expected = replay.standard_normal(x0.shape).astype(np.float32)

    seen = {}

    def perfect(x_t, t, prompt=None, control=None):
        seen["t"] = t
        return eps_expected

    loss = diff.training_loss(perfect, x0, None, None, s, seeded_rng(123))
    assert loss == 0.0
    assert seen["t"] == t_expected


def test_training_loss_batched_draw_order():
    s = diff.make_schedule(50, 1e-4, 0.05)
    x0 = seeded_rng(8).standard_normal((4, 3, 8, 8)).astype(np.float32)
    replay = seeded_rng(9)
    t_expected = replay.integers(1, s.T + 1, size=4)
    eps_expected = replay.standard_normal(x0.shape).astype(np.float32)

    def perfect(x_t, t, prompt=None, control=None):
        assert np.array_equal(np.asarray(t), t_expected)
        return eps_expected

    assert diff.training_loss(perfect, x0, None, None, s, seeded_rng(9)) == 0.0


def test_training_loss_positive_for_zero_denoiser():
    s = diff.make_schedule(50, 1e-4, 0.05)
    x0 = seeded_rng(3).standard_normal((3, 8, 8)).astype(np.float32)

    def zero(x_t, t, prompt=None, control=None):
        return np.zeros_like(x_t)

    # predicting zero leaves the full noise energy, E[eps^2] ~ 1
    loss = diff.training_loss(zero, x0, None, None, s, seeded_rng(1))
    assert 0.5 < loss < 2.0


def test_training_loss_shape_mismatch_rejected():
    s = diff.make_schedule(10, 1e-4, 0.05)
    x0 = np.ones((3, 8, 8), dtype=np.float32)

    def wrong(x_t, t, prompt=None, control=None):
        return np.zeros((3, 4, 4), dtype=np.float32)

    with pytest.raises(ShapeError):
        diff.training_loss(wrong, x0, None, None, s, seeded_rng(0))


# ---------------------------------------------------------------------------
# reverse process

def test_ddpm_step_final_step_is_deterministic():
    s = diff.make_schedule(10, 0.1, 0.2)
    x = seeded_rng(0).standard_normal((1, 4, 4)).astype(np.float32)

    def zero(x_t, t, prompt=None, control=None):
        return np.zeros_like(x_t)

    a = diff.ddpm_step(zero, x, 1, None, None, s, seeded_rng(1))
    b = diff.ddpm_step(zero, x, 1, None, None, s, seeded_rng(2))
    assert np.array_equal(a, b)  # no z injected at t=1
    expect = x / np.sqrt(1.0 - s.betas[0])
    assert np.allclose(a, expect, atol=1e-6)


def test_ddpm_step_mean_formula():
    s = diff.make_schedule(10, 0.1, 0.2)
    x = np.full((1, 2, 2), 0.5, dtype=np.float32)
    eps = np.full((1, 2, 2), 0.25, dtype=np.float32)

    def fixed(x_t, t, prompt=None, control=None):
        return eps

    t = 4
    a_t = float(s.alphas[t - 1])
    b_t = float(s.betas[t - 1])
    ab_t = float(s.alpha_bars[t - 1])
    rng_a = seeded_rng(5)
    got = diff.ddpm_step(fixed, x, t, None, None, s, rng_a)
    z = seeded_rng(5).standard_normal(x.shape).astype(np.float32)
    expect = (x - (b_t / np.sqrt(1 - ab_t)) * eps) / np.sqrt(a_t) + np.sqrt(b_t) * z
    assert np.allclose(got, expect, atol=1e-6)


def test_ddpm_step_range_check():
    s = diff.make_schedule(10, 0.1, 0.2)
    x = np.ones((1, 2, 2), dtype=np.float32)
    with pytest.raises(IndexError):
        diff.ddpm_step(lambda *a, **k: x, x, 0, None, None, s, seeded_rng(0))


# ---------------------------------------------------------------------------
# embeddings and helpers

def test_sinusoidal_embedding_structure():
    emb = diff.sinusoidal_embedding(torch.tensor([0.0]), 8).numpy()[0]
    # t=0: all sines 0, all cosines 1
    assert np.allclose(emb[:4], 0.0) and np.allclose(emb[4:], 1.0)
    e1 = diff.sinusoidal_embedding(torch.tensor([1.0]), 64).numpy()[0]
    e2 = diff.sinusoidal_embedding(torch.tensor([2.0]), 64).numpy()[0]
    assert not np.allclose(e1, e2)
    assert np.all(np.abs(e1) <= 1.0)


def test_smoothed_hand_values():
    out = diff.smoothed([1.0, 2.0, 3.0, 4.0], window=2)
    assert np.allclose(out, [1.5, 2.5, 3.5])
    assert diff.smoothed([], window=5).size == 0
    # window larger than the series falls back to one full-series mean
    assert np.allclose(diff.smoothed([2.0, 4.0], window=50), [3.0])


# ---------------------------------------------------------------------------
# end-to-end small runs

def small_train_cfg(steps=25):
    return diff.DiffusionTrainConfig(
        T=20, beta_start=1e-4, beta_end=0.05, steps=steps, batch_size=8,
        learning_rate=1e-3, seed=0, base_width=8, channel_mults=(1, 2), time_dim=16,
    )


def test_train_base_shapes_and_determinism(tiny_stack):
    pixels, _ = tiny_stack
    den1, prompt1, curve1 = diff.train_base(pixels, small_train_cfg())
    den2, prompt2, curve2 = diff.train_base(pixels, small_train_cfg())
    assert len(curve1) == 25
    assert curve1 == curve2
    assert np.array_equal(prompt1.vector, prompt2.vector)
    assert den1.fingerprint() == den2.fingerprint()
    out = den1(pixels[0], 5, prompt1)
    assert out.shape == pixels[0].shape


def test_train_base_insufficient_data():
    data = np.zeros((8, 3, 16, 16), dtype=np.float32)
    with pytest.raises(InsufficientData):
        diff.train_base(data, small_train_cfg())


def test_save_load_base_roundtrip(tmp_path, tiny_stack):
    pixels, _ = tiny_stack
    den, prompt, _ = diff.train_base(pixels, small_train_cfg(steps=4))
    diff.save_base(den, prompt, small_train_cfg(steps=4), tmp_path / "base",
                   extra_meta={"image_size": 16})
    den2, prompt2, meta = diff.load_base(tmp_path / "base")
    assert den2.fingerprint() == den.fingerprint()
    assert np.array_equal(prompt2.vector, prompt.vector)
    assert meta["image_size"] == 16
    x = pixels[0]
    assert np.array_equal(den(x, 3, prompt), den2(x, 3, prompt2))


def test_sample_deterministic_and_finite(tiny_stack):
    pixels, _ = tiny_stack
    den, prompt, _ = diff.train_base(pixels, small_train_cfg(steps=10))
    s = diff.make_schedule(20, 1e-4, 0.05)
    a = diff.sample(den, s, prompt, None, (2, 3, 16, 16), seed=11)
    b = diff.sample(den, s, prompt, None, (2, 3, 16, 16), seed=11)
    c = diff.sample(den, s, prompt, None, (2, 3, 16, 16), seed=12)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.isfinite(a).all()
