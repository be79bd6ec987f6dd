"""Convolutional autoencoder providing the diffusion latent space.

Small enough to train from scratch on CPU in seconds-to-minutes. The
identity_codec flag swaps in exact pass-through encode/decode so diffusion
can run directly in pixel space for the fastest test loops.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
from torch import nn

from .checkpoint import digest_state, load_state, save_state
from .errors import ConfigError, InsufficientData, ShapeError
from .nnutil import init_parameters, load_module_state, module_state, seeded_rng, to_tensor


@dataclass
class CodecConfig:
    downsample_factor: int = 4
    latent_channels: int = 4
    base_width: int = 32
    train_steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    identity_codec: bool = False

    def __post_init__(self):
        f = self.downsample_factor
        if f < 1 or (f & (f - 1)) != 0:
            raise ConfigError(f"downsample_factor must be a power of 2, got {f}")
        if self.latent_channels < 1 or self.base_width < 1:
            raise ConfigError("latent_channels and base_width must be >= 1")
        if self.batch_size < 1 or self.train_steps < 0:
            raise ConfigError("batch_size must be >= 1 and train_steps >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def fingerprint(self) -> str:
        return hashlib.sha256(
            json.dumps(asdict(self), sort_keys=True).encode()
        ).hexdigest()[:16]


class AutoEncoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        levels = int(np.log2(cfg.downsample_factor))
        widths = [min(cfg.base_width * (2 ** i), cfg.base_width * 4) for i in range(levels + 1)]
        enc = [nn.Conv2d(3, widths[0], 3, padding=1), nn.SiLU()]
        for i in range(levels):
            enc += [
                nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1),
                nn.SiLU(),
                nn.Conv2d(widths[i + 1], widths[i + 1], 3, padding=1),
                nn.SiLU(),
            ]
        enc.append(nn.Conv2d(widths[-1], cfg.latent_channels, 3, padding=1))
        self.encoder = nn.Sequential(*enc)
        dec = [nn.Conv2d(cfg.latent_channels, widths[-1], 3, padding=1), nn.SiLU()]
        for i in range(levels, 0, -1):
            dec += [
                nn.ConvTranspose2d(widths[i], widths[i - 1], 4, stride=2, padding=1),
                nn.SiLU(),
                nn.Conv2d(widths[i - 1], widths[i - 1], 3, padding=1),
                nn.SiLU(),
            ]
        dec.append(nn.Conv2d(widths[0], 3, 3, padding=1))
        self.decoder = nn.Sequential(*dec)

    def forward(self, x):
        return torch.sigmoid(self.decoder(self.encoder(x)))


@dataclass
class CodecParams:
    config: CodecConfig
    module: AutoEncoder | None          # None for the identity codec
    fingerprint: str = field(default="")

    def __post_init__(self):
        if not self.fingerprint:
            self.fingerprint = self.config.fingerprint()

    @property
    def latent_channels(self) -> int:
        return 3 if self.config.identity_codec else self.config.latent_channels

    @property
    def factor(self) -> int:
        return 1 if self.config.identity_codec else self.config.downsample_factor


def _check_image_batch(a: np.ndarray, f: int) -> np.ndarray:
    if a.ndim == 3:
        batched = a[None]
    elif a.ndim == 4:
        batched = a
    else:
        raise ShapeError(f"expected (3,R,R) or (N,3,R,R), got {a.shape}")
    if batched.shape[1] != 3:
        raise ShapeError(f"expected 3 planes, got {batched.shape[1]}")
    if batched.shape[2] != batched.shape[3]:
        raise ShapeError(f"image must be square, got {batched.shape[2:]}")
    if batched.shape[2] % f != 0:
        raise ShapeError(
            f"resolution {batched.shape[2]} not divisible by downsample factor {f}"
        )
    return batched


def encode(params: CodecParams, image: np.ndarray) -> np.ndarray:
    a = np.asarray(image, dtype=np.float32)
    batched = _check_image_batch(a, params.factor)
    if params.config.identity_codec:
        out = batched.copy()
    else:
        with torch.no_grad():
            out = params.module.encoder(to_tensor(batched)).numpy()
    return out[0] if a.ndim == 3 else out


def decode(params: CodecParams, latent: np.ndarray) -> np.ndarray:
    a = np.asarray(latent, dtype=np.float32)
    if a.ndim == 3:
        batched = a[None]
    elif a.ndim == 4:
        batched = a
    else:
        raise ShapeError(f"expected (c,h,w) or (N,c,h,w), got {a.shape}")
    if batched.shape[1] != params.latent_channels:
        raise ShapeError(
            f"expected {params.latent_channels} latent channels, got {batched.shape[1]}"
        )
    if params.config.identity_codec:
        out = batched.copy()
    else:
        with torch.no_grad():
            out = torch.sigmoid(params.module.decoder(to_tensor(batched))).numpy()
    return out[0] if a.ndim == 3 else out


def reconstruction_mse(params: CodecParams, images: np.ndarray) -> float:
    images = np.asarray(images, dtype=np.float32)
    rec = decode(params, encode(params, images))
    return float(np.mean((rec - images) ** 2, dtype=np.float64))


def psnr(mse: float) -> float:
    if mse <= 0:
        return float("inf")
    return 10.0 * float(np.log10(1.0 / mse))


def train_codec(
    images: np.ndarray, cfg: CodecConfig
) -> tuple[CodecParams, list[tuple[int, float]]]:
    """MSE autoencoder training. Returns params and the (step, loss) curve."""
    if cfg.identity_codec:
        raise ConfigError("identity codec has no trainable parameters")
    data = np.asarray(images, dtype=np.float32)
    if data.ndim != 4 or data.shape[1] != 3:
        raise ShapeError(f"expected (N,3,R,R) training images, got {data.shape}")
    n = data.shape[0]
    if n < 16:
        raise InsufficientData(f"codec training needs >= 16 samples, got {n}")
    _check_image_batch(data, cfg.downsample_factor)
    rng = seeded_rng(cfg.seed)
    module = AutoEncoder(cfg)
    init_parameters(module, rng)
    opt = torch.optim.Adam(module.parameters(), lr=cfg.learning_rate)
    curve = []
    for step in range(cfg.train_steps):
        idx = rng.integers(0, n, size=cfg.batch_size)
        batch = to_tensor(data[idx])
        rec = module(batch)
        loss = ((rec - batch) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append((step, float(loss.detach())))
    module.eval()
    return CodecParams(config=cfg, module=module), curve


def save_codec(params: CodecParams, directory) -> None:
    arrays = {} if params.module is None else module_state(params.module)
    save_state(
        directory,
        arrays,
        {
            "kind": "codec",
            "config": asdict(params.config),
            "seed": params.config.seed,
            "step": params.config.train_steps,
            "fingerprint": params.fingerprint,
        },
    )


def load_codec(directory) -> CodecParams:
    arrays, meta = load_state(directory)
    cfg = CodecConfig(**meta["config"])
    if cfg.identity_codec:
        return CodecParams(config=cfg, module=None, fingerprint=meta.get("fingerprint", ""))
    module = AutoEncoder(cfg)
    load_module_state(module, arrays)
    module.eval()
    return CodecParams(config=cfg, module=module, fingerprint=meta.get("fingerprint", ""))


def identity_codec() -> CodecParams:
    return CodecParams(config=CodecConfig(identity_codec=True, downsample_factor=1), module=None)


def state_digest(params: CodecParams) -> str:
    if params.module is None:
        return digest_state({})
    return digest_state(module_state(params.module))
