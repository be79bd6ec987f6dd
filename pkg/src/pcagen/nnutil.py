"""Glue between the numpy RNG contract and torch modules.

All stochastic choices (parameter init, noise, batch order) are drawn from
numpy PCG64 generators; torch only executes deterministic arithmetic. Module
parameters are filled in sorted-name order so init is reproducible across
runs and refactors that do not rename parameters.
"""

from __future__ import annotations

import os

import numpy as np
import torch


def seeded_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def configure_threads() -> None:
    """Honor PCAGEN_NUM_THREADS if set; otherwise leave torch defaults alone."""
    raw = os.environ.get("PCAGEN_NUM_THREADS")
    if not raw:
        return
    try:
        n = max(1, int(raw))
    except ValueError:
        return
    torch.set_num_threads(n)


def to_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))


def init_parameters(module: torch.nn.Module, rng: np.random.Generator) -> None:
    """Fill parameters from the generator, deterministically by name.

    Weights with rank >= 2 get uniform(-1/sqrt(fan_in), +), norm weights get 1,
    biases get 0. Callers overwrite special parameters afterwards if needed.
    """
    with torch.no_grad():
        for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            if p.ndim >= 2:
                fan_in = int(np.prod(p.shape[1:]))
                bound = 1.0 / np.sqrt(fan_in)
                vals = rng.uniform(-bound, bound, size=tuple(p.shape))
                p.copy_(torch.from_numpy(vals.astype(np.float32)))
            elif name.endswith("bias"):
                p.zero_()
            elif name.endswith("weight"):
                p.fill_(1.0)
            else:
                vals = rng.normal(0.0, 0.02, size=tuple(p.shape))
                p.copy_(torch.from_numpy(vals.astype(np.float32)))


def module_state(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {
        name: tensor.detach().cpu().numpy().astype(np.float32, copy=True)
        for name, tensor in module.state_dict().items()
    }


def load_module_state(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    module.load_state_dict(
        {name: torch.from_numpy(np.asarray(a, dtype=np.float32)) for name, a in arrays.items()}
    )
