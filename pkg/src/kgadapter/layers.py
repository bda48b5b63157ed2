"""Parameter initialisation and transformer pieces shared by the adapter and the LM."""
from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .numerics import Tensor


def init_linear(params: dict, prefix: str, rng: np.random.Generator, fan_in: int, fan_out: int) -> None:
    params[f"{prefix}.weight"] = Tensor(nx.uniform_init(rng, fan_in, (fan_in, fan_out)), name=f"{prefix}.weight")
    params[f"{prefix}.bias"] = Tensor(np.zeros(fan_out), name=f"{prefix}.bias")


def init_norm(params: dict, prefix: str, width: int) -> None:
    params[f"{prefix}.gain"] = Tensor(np.ones(width), name=f"{prefix}.gain")
    params[f"{prefix}.bias"] = Tensor(np.zeros(width), name=f"{prefix}.bias")


def init_block(params: dict, prefix: str, rng: np.random.Generator, width: int, hidden: int) -> None:
    init_norm(params, f"{prefix}.ln1", width)
    for name in ("q", "k", "v", "o"):
        init_linear(params, f"{prefix}.attn.{name}", rng, width, width)
    init_norm(params, f"{prefix}.ln2", width)
    init_linear(params, f"{prefix}.ff1", rng, width, hidden)
    init_linear(params, f"{prefix}.ff2", rng, hidden, width)


def linear(x, params: dict, prefix: str) -> Tensor:
    return nx.matmul(x, params[f"{prefix}.weight"]) + params[f"{prefix}.bias"]


def norm(x, params: dict, prefix: str) -> Tensor:
    return nx.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def attention(x: Tensor, params: dict, prefix: str, n_heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention over the second-to-last axis of ``x``."""
    *lead, T, d = x.shape
    if d % n_heads:
        raise nx.NumericsError(f"attention: width {d} not divisible by {n_heads} heads")
    dh = d // n_heads

    def heads(t: Tensor) -> Tensor:
        t = t.reshape(*lead, T, n_heads, dh)
        return nx.swapaxes(t, -3, -2)

    q = heads(linear(x, params, f"{prefix}.q"))
    k = heads(linear(x, params, f"{prefix}.k"))
    v = heads(linear(x, params, f"{prefix}.v"))
    scores = nx.matmul(q, nx.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    if mask is not None:
        scores = scores + mask
    out = nx.matmul(nx.softmax(scores, axis=-1), v)
    out = nx.swapaxes(out, -3, -2).reshape(*lead, T, d)
    return linear(out, params, f"{prefix}.o")


def block(x: Tensor, params: dict, prefix: str, n_heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Pre-norm transformer block: attention then a ReLU feed-forward, each residual."""
    x = x + attention(norm(x, params, f"{prefix}.ln1"), params, f"{prefix}.attn", n_heads, mask)
    h = nx.relu(linear(norm(x, params, f"{prefix}.ln2"), params, f"{prefix}.ff1"))
    return x + linear(h, params, f"{prefix}.ff2")


def causal_mask(T: int) -> np.ndarray:
    return np.triu(np.full((T, T), -1e9, dtype=np.float32), k=1)
