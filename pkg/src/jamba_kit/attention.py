"""Causal grouped-query attention with an incremental KV cache.

No positional encoding is applied; order information comes from the Mamba
layers around each attention layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import CacheError, ConfigError, DimensionError
from .tensor import Index, Tensor, as_tensor, concat, linear, matmul, softmax


@dataclass
class AttentionParams:
    q_proj: Tensor  # [n_q_heads*head_dim, d_model]
    k_proj: Tensor  # [n_kv_heads*head_dim, d_model]
    v_proj: Tensor
    o_proj: Tensor  # [d_model, n_q_heads*head_dim]
    n_q_heads: int
    n_kv_heads: int

    @property
    def d_model(self) -> int:
        return self.q_proj.shape[1]

    @property
    def head_dim(self) -> int:
        return self.q_proj.shape[0] // self.n_q_heads

    @property
    def group(self) -> int:
        return self.n_q_heads // self.n_kv_heads

    def named(self) -> dict:
        return {"q_proj": self.q_proj, "k_proj": self.k_proj, "v_proj": self.v_proj, "o_proj": self.o_proj}

    def validate(self) -> None:
        if self.n_q_heads % self.n_kv_heads:
            raise ConfigError(f"n_q_heads={self.n_q_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if self.d_model % self.n_q_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_q_heads={self.n_q_heads}")
        hd = self.head_dim
        for key, shape in {
            "q_proj": (self.n_q_heads * hd, self.d_model),
            "k_proj": (self.n_kv_heads * hd, self.d_model),
            "v_proj": (self.n_kv_heads * hd, self.d_model),
            "o_proj": (self.d_model, self.n_q_heads * hd),
        }.items():
            if tuple(getattr(self, key).shape) != shape:
                raise DimensionError(f"attention {key} has shape {getattr(self, key).shape}, expected {shape}")


def init_attention(rng: np.random.Generator, d_model: int, n_q_heads: int, n_kv_heads: int) -> dict:
    hd = d_model // n_q_heads
    std = d_model**-0.5
    return {
        "q_proj": rng.normal(0.0, std, size=(n_q_heads * hd, d_model)),
        "k_proj": rng.normal(0.0, std, size=(n_kv_heads * hd, d_model)),
        "v_proj": rng.normal(0.0, std, size=(n_kv_heads * hd, d_model)),
        "o_proj": rng.normal(0.0, (n_q_heads * hd) ** -0.5, size=(d_model, n_q_heads * hd)),
    }


class KVCache:
    """Keys/values for one attention layer, grown by doubling."""

    def __init__(self, n_kv_heads: int, head_dim: int, dtype=np.float32, capacity: int = 16):
        self.n_kv_heads = n_kv_heads
        self.head_dim = head_dim
        self.dtype = np.dtype(dtype)
        self._k = np.zeros((n_kv_heads, capacity, head_dim), dtype=self.dtype)
        self._v = np.zeros_like(self._k)
        self.T = 0

    @property
    def capacity(self) -> int:
        return self._k.shape[1]

    @property
    def keys(self) -> np.ndarray:
        return self._k[:, : self.T]

    @property
    def values(self) -> np.ndarray:
        return self._v[:, : self.T]

    @property
    def nbytes(self) -> int:
        """Bytes holding cached tokens (not the spare capacity)."""
        return 2 * self.n_kv_heads * self.T * self.head_dim * self.dtype.itemsize

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        if k.shape[0] != self.n_kv_heads or k.shape[2] != self.head_dim or v.shape != k.shape:
            raise CacheError(
                f"cache holds [{self.n_kv_heads}, T, {self.head_dim}], got keys {k.shape} / values {v.shape}"
            )
        need = self.T + k.shape[1]
        if need > self.capacity:
            cap = self.capacity
            while cap < need:
                cap *= 2
            grown_k = np.zeros((self.n_kv_heads, cap, self.head_dim), dtype=self.dtype)
            grown_v = np.zeros_like(grown_k)
            grown_k[:, : self.T] = self.keys
            grown_v[:, : self.T] = self.values
            self._k, self._v = grown_k, grown_v
        self._k[:, self.T : need] = k
        self._v[:, self.T : need] = v
        self.T = need


def repeat_kv(kv, group: int):
    """Duplicate each KV head ``group`` times: heads [0, 1] -> [0, 0, 1, 1]."""
    if group != int(group) or group < 1:
        raise ConfigError(f"KV group size must be a positive integer, got {group}")
    group = int(group)
    if group == 1:
        return kv
    order = np.repeat(np.arange(kv.shape[0]), group)
    if isinstance(kv, Tensor):
        return Index.apply(kv, key=order)
    return kv[order]


def attention_forward(x: Tensor, params: AttentionParams, cache: Optional[KVCache] = None):
    """``x`` [L, d_model] -> ``(y [L, d_model], cache)``.

    With a cache, ``x`` continues the cached sequence: query i sees every
    cached token plus new positions <= i. The cache is updated in place.
    """
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != params.d_model:
        raise DimensionError(f"attention input {x.shape} does not match d_model={params.d_model}")
    L = x.shape[0]
    hq, hkv, hd = params.n_q_heads, params.n_kv_heads, params.head_dim
    if cache is not None and (cache.n_kv_heads != hkv or cache.head_dim != hd):
        raise CacheError(
            f"cache is [{cache.n_kv_heads} heads, dim {cache.head_dim}], layer needs [{hkv} heads, dim {hd}]"
        )

    q = linear(x, params.q_proj).reshape(L, hq, hd).transpose(1, 0, 2)
    k = linear(x, params.k_proj).reshape(L, hkv, hd).transpose(1, 0, 2)
    v = linear(x, params.v_proj).reshape(L, hkv, hd).transpose(1, 0, 2)

    past = 0
    if cache is not None:
        past = cache.T
        if past:
            k = concat([Tensor(cache.keys), k], axis=1)
            v = concat([Tensor(cache.values), v], axis=1)
        cache.append(k.data[:, past:], v.data[:, past:])

    k = repeat_kv(k, params.group)
    v = repeat_kv(v, params.group)
    scores = matmul(q, k.transpose(0, 2, 1)) * (1.0 / math.sqrt(hd))
    scores = scores + _causal_mask(L, past, x.dtype)
    probs = softmax(scores, axis=-1)
    ctx = matmul(probs, v).transpose(1, 0, 2).reshape(L, hq * hd)
    return linear(ctx, params.o_proj), cache


def _causal_mask(L: int, past: int, dtype) -> np.ndarray:
    q_pos = past + np.arange(L)[:, None]
    k_pos = np.arange(past + L)[None, :]
    return np.where(k_pos <= q_pos, 0.0, -np.inf).astype(dtype)
