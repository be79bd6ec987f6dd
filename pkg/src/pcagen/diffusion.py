"""DDPM machinery and the denoiser U-Net.

epsilon-prediction with a linear beta schedule and the sigma_t^2 = beta_t
ancestral sampler. The prompt is a single learned vector added to the
sinusoidal timestep embedding (the text prompt is constant, so no text
encoder is needed). Every random draw comes from a numpy PCG64 generator;
torch does only deterministic arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

from .checkpoint import digest_state, load_state, save_state
from .errors import ConfigError, InsufficientData, ShapeError
from .nnutil import init_parameters, load_module_state, module_state, seeded_rng, to_tensor


# ---------------------------------------------------------------------------
# schedule and forward process

@dataclass
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)


def make_schedule(
    T: int, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear"
) -> NoiseSchedule:
    if kind != "linear":
        raise ConfigError(f"unknown schedule kind {kind!r}")
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def _gather_alpha_bar(schedule: NoiseSchedule, t):
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise IndexError(f"t must be in [1, {schedule.T}], got {t}")
    return schedule.alpha_bars[t_arr - 1]


def q_sample(x0, t, noise, schedule: NoiseSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise; works on numpy or torch."""
    if tuple(noise.shape) != tuple(x0.shape):
        raise ShapeError(f"noise shape {tuple(noise.shape)} vs x0 {tuple(x0.shape)}")
    ab = _gather_alpha_bar(schedule, t)
    c1 = np.sqrt(ab)
    c2 = np.sqrt(1.0 - ab)
    if isinstance(x0, torch.Tensor):
        if np.ndim(c1) > 0:
            shape = (-1,) + (1,) * (x0.ndim - 1)
            c1 = to_tensor(c1.astype(np.float32)).reshape(shape)
            c2 = to_tensor(c2.astype(np.float32)).reshape(shape)
        else:
            c1, c2 = float(c1), float(c2)
        return c1 * x0 + c2 * noise
    if np.ndim(c1) > 0:
        shape = (-1,) + (1,) * (x0.ndim - 1)
        c1 = c1.reshape(shape)
        c2 = c2.reshape(shape)
        return (c1 * x0 + c2 * noise).astype(np.float32)
    return (float(c1) * x0 + float(c2) * noise).astype(np.float32)


# ---------------------------------------------------------------------------
# denoiser network

@dataclass
class DenoiserConfig:
    in_channels: int = 3
    base_width: int = 32
    channel_mults: tuple[int, ...] = (1, 2)
    time_dim: int = 64
    prompt_dim: int = 64

    def __post_init__(self):
        self.channel_mults = tuple(self.channel_mults)
        if len(self.channel_mults) < 1:
            raise ConfigError("need at least one stage")
        if self.time_dim % 2 or self.time_dim < 2:
            raise ConfigError("time_dim must be even and >= 2")
        if self.prompt_dim != self.time_dim:
            raise ConfigError("prompt_dim must equal time_dim (added embeddings)")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * m for m in self.channel_mults]


def _groups_for(channels: int) -> int:
    return math.gcd(8, channels)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups_for(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(_groups_for(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.temb(torch.nn.functional.silu(temb))[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
    )
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class EncoderCore(nn.Module):
    """Timestep/prompt embedding plus the downsampling half of the U-Net.

    Kept as its own module so the control branch can hold an exact trainable
    copy of everything the base model's encoder computes.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim * 2),
            nn.SiLU(),
            nn.Linear(cfg.time_dim * 2, cfg.time_dim),
        )
        self.stem = nn.Conv2d(cfg.in_channels, w[0], 3, padding=1)
        self.blocks = nn.ModuleList(
            [ResBlock(w[i], w[i], cfg.time_dim) for i in range(len(w))]
        )
        self.downs = nn.ModuleList(
            [nn.Conv2d(w[i], w[i + 1], 3, stride=2, padding=1) for i in range(len(w) - 1)]
        )
        self.middle = ResBlock(w[-1], w[-1], cfg.time_dim)

    def embed_time(self, t: torch.Tensor, prompt: torch.Tensor | None) -> torch.Tensor:
        emb = sinusoidal_embedding(t, self.cfg.time_dim)
        if prompt is not None:
            emb = emb + prompt.reshape(1, -1)
        return self.time_mlp(emb)

    def features(self, x: torch.Tensor, temb: torch.Tensor):
        h = self.stem(x)
        skips = []
        for i, blk in enumerate(self.blocks):
            h = blk(h, temb)
            skips.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        return skips, self.middle(h, temb)


class UNet(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.core = EncoderCore(cfg)
        self.ups = nn.ModuleList(
            [nn.ConvTranspose2d(w[i + 1], w[i], 4, stride=2, padding=1)
             for i in range(len(w) - 2, -1, -1)]
        )
        self.dec = nn.ModuleList(
            [ResBlock(2 * w[i], w[i], cfg.time_dim)
             for i in range(len(w) - 2, -1, -1)]
        )
        self.head_norm = nn.GroupNorm(_groups_for(w[0]), w[0])
        self.head = nn.Conv2d(w[0], cfg.in_channels, 3, padding=1)

    def forward(self, x, t, prompt=None, residuals=None):
        temb = self.core.embed_time(t, prompt)
        skips, h = self.core.features(x, temb)
        if residuals is not None:
            h = h + residuals[0]
        levels = list(range(len(self.cfg.widths) - 2, -1, -1))
        for j, i in enumerate(levels):
            h = self.ups[j](h)
            h = torch.cat([h, skips[i]], dim=1)
            h = self.dec[j](h, temb)
            if residuals is not None:
                h = h + residuals[j + 1]
        return self.head(torch.nn.functional.silu(self.head_norm(h)))


@dataclass
class PromptEmbedding:
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32).reshape(-1)


def _prompt_tensor(prompt) -> torch.Tensor | None:
    if prompt is None:
        return None
    if isinstance(prompt, PromptEmbedding):
        return to_tensor(prompt.vector)
    if isinstance(prompt, torch.Tensor):
        return prompt
    return to_tensor(np.asarray(prompt, dtype=np.float32))


class Denoiser:
    """Callable wrapper satisfying the denoiser contract on numpy or torch.

    numpy in, numpy out (no_grad) for sampling and oracles; torch in,
    torch out (grad-enabled) for training loops.
    """

    def __init__(self, module: UNet, config: DenoiserConfig):
        self.module = module
        self.config = config
        self._fingerprint: str | None = None

    def fingerprint(self, recompute: bool = False) -> str:
        if self._fingerprint is None or recompute:
            self._fingerprint = digest_state(module_state(self.module))
        return self._fingerprint

    def _forward(self, x, t, prompt, residuals):
        if not isinstance(t, torch.Tensor):
            t_arr = np.atleast_1d(np.asarray(t, dtype=np.float32))
            t = to_tensor(t_arr)
        if t.ndim == 0:
            t = t.reshape(1)
        if t.shape[0] == 1 and x.shape[0] > 1:
            t = t.expand(x.shape[0])
        return self.module(x, t, _prompt_tensor(prompt), residuals)

    def __call__(self, x_t, t, prompt=None, control=None):
        if isinstance(x_t, torch.Tensor):
            return self._forward(x_t, t, prompt, control)
        a = np.asarray(x_t, dtype=np.float32)
        single = a.ndim == 3
        batched = a[None] if single else a
        if batched.ndim != 4:
            raise ShapeError(f"expected (c,h,w) or (N,c,h,w), got {a.shape}")
        residuals = None
        if control is not None:
            residuals = []
            for r in control:
                rt = to_tensor(np.asarray(r, dtype=np.float32))
                if rt.ndim == 3:
                    rt = rt[None]
                residuals.append(rt)
        with torch.no_grad():
            out = self._forward(to_tensor(batched), t, prompt, residuals).numpy()
        return out[0] if single else out


# ---------------------------------------------------------------------------
# losses and sampling

def training_loss(denoiser, x0, prompt, control, schedule: NoiseSchedule, rng):
    """epsilon-prediction MSE on one draw (or one batch of draws).

    Draw order is part of the contract: first t (uniform integers in [1, T],
    one per sample for batched input), then noise with x0's shape.
    """
    is_torch = isinstance(x0, torch.Tensor)
    shape = tuple(x0.shape)
    batched = len(shape) == 4
    if batched:
        t = rng.integers(1, schedule.T + 1, size=shape[0])
    else:
        t = int(rng.integers(1, schedule.T + 1))
    noise_np = rng.standard_normal(shape).astype(np.float32)
    noise = to_tensor(noise_np) if is_torch else noise_np
    x_t = q_sample(x0, t, noise, schedule)
    pred = denoiser(x_t, t, prompt, control)
    if tuple(pred.shape) != shape:
        raise ShapeError(f"denoiser output {tuple(pred.shape)} vs input {shape}")
    if is_torch:
        return ((pred - noise) ** 2).mean()
    return float(np.mean((np.asarray(pred, dtype=np.float64) - noise_np) ** 2))


def ddpm_step(denoiser, x_t, t: int, prompt, control, schedule: NoiseSchedule, rng):
    if not (1 <= t <= schedule.T):
        raise IndexError(f"t must be in [1, {schedule.T}], got {t}")
    eps = denoiser(x_t, t, prompt, control)
    a_t = float(schedule.alphas[t - 1])
    b_t = float(schedule.betas[t - 1])
    ab_t = float(schedule.alpha_bars[t - 1])
    mean = (x_t - (b_t / math.sqrt(1.0 - ab_t)) * eps) / math.sqrt(a_t)
    if t > 1:
        z = rng.standard_normal(np.shape(x_t)).astype(np.float32)
        mean = mean + math.sqrt(b_t) * z
    return np.asarray(mean, dtype=np.float32)


def sample(denoiser, schedule: NoiseSchedule, prompt, control, latent_shape, seed: int):
    """Ancestral sampling from pure noise; fully determined by the seed."""
    rng = seeded_rng(seed)
    x = rng.standard_normal(tuple(latent_shape)).astype(np.float32)
    for t in range(schedule.T, 0, -1):
        x = ddpm_step(denoiser, x, t, prompt, control, schedule, rng)
    if not np.all(np.isfinite(x)):
        raise ShapeError("sampler produced non-finite values")
    return x


# ---------------------------------------------------------------------------
# base training

@dataclass
class DiffusionTrainConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 2e-3
    seed: int = 0
    base_width: int = 32
    channel_mults: tuple[int, ...] = (1, 2)
    time_dim: int = 64

    def __post_init__(self):
        self.channel_mults = tuple(self.channel_mults)
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)


def smoothed(values, window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return v
    w = max(1, min(window, len(v)))
    kernel = np.ones(w) / w
    return np.convolve(v, kernel, mode="valid")


def train_base(
    latents: np.ndarray, cfg: DiffusionTrainConfig
) -> tuple[Denoiser, PromptEmbedding, list[tuple[int, float]]]:
    data = np.asarray(latents, dtype=np.float32)
    if data.ndim != 4:
        raise ShapeError(f"expected (N,c,h,w) latents, got {data.shape}")
    n = data.shape[0]
    if n < 16:
        raise InsufficientData(f"base training needs >= 16 samples, got {n}")
    rng = seeded_rng(cfg.seed)
    arch = DenoiserConfig(
        in_channels=data.shape[1],
        base_width=cfg.base_width,
        channel_mults=cfg.channel_mults,
        time_dim=cfg.time_dim,
        prompt_dim=cfg.time_dim,
    )
    module = UNet(arch)
    init_parameters(module, rng)
    prompt_param = nn.Parameter(
        to_tensor(rng.normal(0.0, 0.02, size=cfg.time_dim).astype(np.float32))
    )
    den = Denoiser(module, arch)
    schedule = cfg.schedule()
    opt = torch.optim.Adam(
        list(module.parameters()) + [prompt_param], lr=cfg.learning_rate
    )
    curve = []
    for step in range(cfg.steps):
        idx = rng.integers(0, n, size=cfg.batch_size)
        x0 = to_tensor(data[idx])
        loss = training_loss(den, x0, prompt_param, None, schedule, rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append((step, float(loss.detach())))
    module.eval()
    den.fingerprint(recompute=True)
    return den, PromptEmbedding(prompt_param.detach().numpy().copy()), curve


def save_base(
    den: Denoiser,
    prompt: PromptEmbedding,
    cfg: DiffusionTrainConfig,
    directory,
    extra_meta: dict | None = None,
) -> None:
    arrays = module_state(den.module)
    arrays["prompt"] = prompt.vector
    meta = {
        "kind": "base",
        "config": asdict(cfg),
        "arch": asdict(den.config),
        "seed": cfg.seed,
        "step": cfg.steps,
        "module_fingerprint": den.fingerprint(),
    }
    if extra_meta:
        meta.update(extra_meta)
    save_state(directory, arrays, meta)


def load_base(directory) -> tuple[Denoiser, PromptEmbedding, dict]:
    arrays, meta = load_state(directory)
    prompt = PromptEmbedding(arrays.pop("prompt"))
    arch = DenoiserConfig(**meta["arch"])
    module = UNet(arch)
    load_module_state(module, arrays)
    module.eval()
    den = Denoiser(module, arch)
    den.fingerprint(recompute=True)
    return den, prompt, meta
