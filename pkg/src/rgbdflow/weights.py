"""Parameter registry helpers: seeded initialization and path hygiene.

Every parameter tensor draws from its own PCG64 stream seeded by a mix of
the global seed and a SHA-256 digest of its path. Two consequences the
rest of the package relies on:

- initialization is independent of creation order, and
- structurally shared submodules (say, the rgb branch) receive
  bit-identical weights across different ablation configurations run with
  the same seed, which keeps comparisons honest.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .tape import Tensor


def rng_for_path(seed: int, path: str) -> np.random.Generator:
    digest = hashlib.sha256(path.encode("utf-8")).digest()
    mix = int.from_bytes(digest[:8], "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((int(seed), mix))))


def he_normal(params: dict, path: str, shape: tuple[int, ...], fan_in: int, seed: int) -> None:
    if path in params:
        raise ValueError(f"duplicate parameter path {path!r}")
    std = float(np.sqrt(2.0 / fan_in))
    data = rng_for_path(seed, path).standard_normal(shape) * std
    params[path] = Tensor(data, requires_grad=True, name=path)


def zeros_param(params: dict, path: str, shape: tuple[int, ...]) -> None:
    if path in params:
        raise ValueError(f"duplicate parameter path {path!r}")
    params[path] = Tensor(np.zeros(shape), requires_grad=True, name=path)


def conv_param(
    params: dict, path: str, c_out: int, c_in: int, k: int, seed: int,
    bias: bool = True,
) -> None:
    """Conv filter at ``path`` (`.w`), plus a zero bias (`.b`) unless the
    conv feeds a normalization that would cancel it."""
    he_normal(params, f"{path}.w", (c_out, c_in, k, k), c_in * k * k, seed)
    if bias:
        zeros_param(params, f"{path}.b", (c_out,))


def linear_param(
    params: dict, path: str, d_in: int, d_out: int, seed: int, bias: bool = True
) -> None:
    """Row-acting weight matrix (d_in, d_out) + zero bias (d_out,) unless
    a downstream normalization would cancel the bias."""
    he_normal(params, f"{path}.w", (d_in, d_out), d_in, seed)
    if bias:
        zeros_param(params, f"{path}.b", (d_out,))


def parameter_count(params: dict) -> int:
    return sum(t.data.size for t in params.values())
