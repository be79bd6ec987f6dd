"""Conditioning branch: trainable copy of the denoiser encoder plus
zero-initialized residual projections into the frozen base decoder.

Zero projections make the controlled model start as an exact clone of the
base; training moves only the branch, never the base weights.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

from .checkpoint import load_state, save_state
from .conditioning import ConditioningImage
from .diffusion import (
    Denoiser,
    DenoiserConfig,
    EncoderCore,
    NoiseSchedule,
    PromptEmbedding,
    make_schedule,
    training_loss,
)
from .errors import ConfigError, FingerprintError, InsufficientData, ShapeError
from .nnutil import init_parameters, load_module_state, module_state, seeded_rng, to_tensor

# embedder/projection init is a pure function of this constant so that
# init_control stays deterministic with no seed argument
_CONTROL_INIT_SEED = 71993


class ControlNet(nn.Module):
    def __init__(self, arch: DenoiserConfig, factor: int, embed_width: int = 16):
        super().__init__()
        if factor < 1 or (factor & (factor - 1)) != 0:
            raise ConfigError(f"downsample factor must be a power of 2, got {factor}")
        self.factor = factor
        self.embed_width = embed_width
        self.core = EncoderCore(arch)
        n_down = int(np.log2(factor))
        emb = [nn.Conv2d(3, embed_width, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            emb += [nn.Conv2d(embed_width, embed_width, 3, stride=2, padding=1), nn.SiLU()]
        emb.append(nn.Conv2d(embed_width, arch.in_channels, 3, padding=1))
        self.embedder = nn.Sequential(*emb)
        w = arch.widths
        proj_channels = [w[-1]] + [w[i] for i in range(len(w) - 2, -1, -1)]
        self.projs = nn.ModuleList([nn.Conv2d(c, c, 1) for c in proj_channels])

    def forward(self, x_t, t, prompt, x_m):
        temb = self.core.embed_time(t, prompt)
        hint = self.embedder(x_m)
        if hint.shape[-2:] != x_t.shape[-2:]:
            raise ShapeError(
                f"conditioning embeds to {tuple(hint.shape[-2:])} but latent is "
                f"{tuple(x_t.shape[-2:])}"
            )
        skips, mid = self.core.features(x_t + hint, temb)
        feats = [mid] + [skips[i] for i in range(len(skips) - 2, -1, -1)]
        return [proj(f) for proj, f in zip(self.projs, feats)]


@dataclass
class ControlParams:
    module: ControlNet
    base_fingerprint: str
    conditioning_mode: str = "simple"


def init_control(
    base: Denoiser,
    factor: int = 1,
    embed_width: int = 16,
    conditioning_mode: str = "simple",
) -> ControlParams:
    """Copy the base encoder, zero every residual projection, record the base."""
    module = ControlNet(base.config, factor, embed_width)
    init_parameters(module, seeded_rng(_CONTROL_INIT_SEED))
    module.core.load_state_dict(copy.deepcopy(base.module.core.state_dict()))
    with torch.no_grad():
        for proj in module.projs:
            proj.weight.zero_()
            proj.bias.zero_()
    return ControlParams(
        module=module,
        base_fingerprint=base.fingerprint(),
        conditioning_mode=conditioning_mode,
    )


def _condition_tensor(x_m, batch: int) -> torch.Tensor:
    if isinstance(x_m, ConditioningImage):
        x_m = x_m.pixels
    t = to_tensor(np.asarray(x_m, dtype=np.float32)) if not isinstance(x_m, torch.Tensor) else x_m
    if t.ndim == 3:
        t = t[None]
    if t.ndim != 4 or t.shape[1] != 3:
        raise ShapeError(f"conditioning must be (3,R,R) or (N,3,R,R), got {tuple(t.shape)}")
    if t.shape[0] == 1 and batch > 1:
        t = t.expand(batch, -1, -1, -1)
    if t.shape[0] != batch:
        raise ShapeError(f"conditioning batch {t.shape[0]} vs latent batch {batch}")
    return t


def _controlled_forward(base: Denoiser, control: ControlParams, x_t, t, prompt, x_m):
    cond = _condition_tensor(x_m, x_t.shape[0])
    residuals = control.module(x_t, _as_time(t, x_t.shape[0]), _as_prompt(prompt), cond)
    return base._forward(x_t, t, prompt, residuals)


def _as_time(t, batch: int) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        tt = t
    else:
        tt = to_tensor(np.atleast_1d(np.asarray(t, dtype=np.float32)))
    if tt.ndim == 0:
        tt = tt.reshape(1)
    if tt.shape[0] == 1 and batch > 1:
        tt = tt.expand(batch)
    return tt


def _as_prompt(prompt):
    from .diffusion import _prompt_tensor
    return _prompt_tensor(prompt)


def apply_controlled(base: Denoiser, control: ControlParams, x_t, t, prompt, x_m):
    """Base denoiser evaluated with the branch's residual injections."""
    if control.base_fingerprint != base.fingerprint():
        raise FingerprintError(
            "control branch was initialized against a different base checkpoint"
        )
    if isinstance(x_t, torch.Tensor):
        return _controlled_forward(base, control, x_t, t, prompt, x_m)
    a = np.asarray(x_t, dtype=np.float32)
    single = a.ndim == 3
    batched = a[None] if single else a
    if batched.ndim != 4:
        raise ShapeError(f"expected (c,h,w) or (N,c,h,w), got {a.shape}")
    with torch.no_grad():
        out = _controlled_forward(
            base, control, to_tensor(batched), t, prompt, x_m
        ).numpy()
    return out[0] if single else out


def controlled_denoiser(base: Denoiser, control: ControlParams):
    """Denoiser-contract closure whose control argument is the conditioning image."""
    def den(x_t, t, prompt=None, x_m=None):
        return apply_controlled(base, control, x_t, t, prompt, x_m)
    return den


@dataclass
class ControlTrainConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 2e-3
    seed: int = 0
    embed_width: int = 16
    conditioning_mode: str = "simple"

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.conditioning_mode not in ("simple", "full", "soft_edge"):
            raise ConfigError(f"unknown conditioning mode {self.conditioning_mode!r}")

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)


def train_control(
    base: Denoiser,
    prompt: PromptEmbedding,
    pairs,
    cfg: ControlTrainConfig,
) -> tuple[ControlParams, list[tuple[int, float]]]:
    """Train only the branch on (latent, conditioning) pairs; base stays frozen."""
    latents = np.stack([np.asarray(p[0], dtype=np.float32) for p in pairs])
    conds = np.stack(
        [
            np.asarray(
                p[1].pixels if isinstance(p[1], ConditioningImage) else p[1],
                dtype=np.float32,
            )
            for p in pairs
        ]
    )
    n = latents.shape[0]
    if n < 16:
        raise InsufficientData(f"control training needs >= 16 pairs, got {n}")
    if conds.shape[0] != n:
        raise ShapeError("latent/conditioning counts differ")
    if conds.shape[2] % latents.shape[2] != 0:
        raise ShapeError(
            f"conditioning resolution {conds.shape[2]} is not a multiple of the "
            f"latent resolution {latents.shape[2]}"
        )
    factor = conds.shape[2] // latents.shape[2]
    control = init_control(
        base, factor=factor, embed_width=cfg.embed_width,
        conditioning_mode=cfg.conditioning_mode,
    )
    was_training = base.module.training
    grad_flags = [p.requires_grad for p in base.module.parameters()]
    base.module.requires_grad_(False)
    rng = seeded_rng(cfg.seed)
    schedule = cfg.schedule()
    opt = torch.optim.Adam(control.module.parameters(), lr=cfg.learning_rate)
    den = controlled_denoiser(base, control)
    curve = []
    for step in range(cfg.steps):
        idx = rng.integers(0, n, size=cfg.batch_size)
        x0 = to_tensor(latents[idx])
        cond = to_tensor(conds[idx])
        loss = training_loss(den, x0, prompt, cond, schedule, rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append((step, float(loss.detach())))
    for p, flag in zip(base.module.parameters(), grad_flags):
        p.requires_grad_(flag)
    base.module.train(was_training)
    control.module.eval()
    return control, curve


def save_control(control: ControlParams, cfg: ControlTrainConfig, directory) -> None:
    save_state(
        directory,
        module_state(control.module),
        {
            "kind": "control",
            "base_fingerprint": control.base_fingerprint,
            "conditioning_mode": control.conditioning_mode,
            "config": asdict(cfg),
            "arch": asdict(control.module.core.cfg),
            "factor": control.module.factor,
            "embed_width": control.module.embed_width,
            "seed": cfg.seed,
            "step": cfg.steps,
        },
    )


def load_control(directory, base: Denoiser | None = None) -> ControlParams:
    arrays, meta = load_state(directory)
    arch = DenoiserConfig(**meta["arch"])
    module = ControlNet(arch, meta["factor"], meta["embed_width"])
    load_module_state(module, arrays)
    module.eval()
    control = ControlParams(
        module=module,
        base_fingerprint=meta["base_fingerprint"],
        conditioning_mode=meta.get("conditioning_mode", "simple"),
    )
    if base is not None and control.base_fingerprint != base.fingerprint():
        raise FingerprintError(
            "control checkpoint does not match the provided base checkpoint"
        )
    return control
