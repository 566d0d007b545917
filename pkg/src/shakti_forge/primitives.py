"""Normalization, activation and positional-encoding primitives."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, _result

__all__ = [
    "RopeContext",
    "PosBiasTable",
    "layer_norm",
    "rms_norm",
    "silu",
    "swiglu_ffn",
    "qk_normalize",
    "rope_angles",
    "rope_1d",
    "rope_2d",
    "rope_dynamic_scale",
    "bilinear_matrix",
    "abs_pos_bias",
]

LN_EPS = 1e-5
RMS_EPS = 1e-6


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply ``gain`` and ``bias``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd, bd = gain.data, bias.data
    out = xhat * gd + bd
    n = xd.shape[-1]
    lead = tuple(range(xd.ndim - 1))

    def rule(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        return gx, gg, gb

    return _result(out, (x, gain, bias), rule)


def rms_norm(x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    """Divide each row by ``sqrt(mean(x^2) + eps)`` and scale by ``gain``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    ms = (xd * xd).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + xd.dtype.type(eps))
    xhat = xd * inv
    gd = gain.data
    n = xd.shape[-1]
    lead = tuple(range(xd.ndim - 1))

    def rule(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        return gx, gg

    return _result(xhat * gd, (x, gain), rule)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = T._sigmoid(xd)
    return _result(xd * s, (x,), lambda g: (g * s * (1 + xd * (1 - s)),))


def swiglu_ffn(x: Tensor, w1: Tensor, w3: Tensor, w2: Tensor) -> Tensor:
    """Gated feed-forward: ``(silu(x @ w1) * (x @ w3)) @ w2``."""
    return T.matmul(T.mul(silu(T.matmul(x, w1)), T.matmul(x, w3)), w2)


def qk_normalize(q: Tensor, k: Tensor, gain_q: Tensor, gain_k: Tensor,
                 eps: float = RMS_EPS) -> tuple[Tensor, Tensor]:
    """RMS-normalize query and key rows over the head dimension."""
    return rms_norm(q, gain_q, eps), rms_norm(k, gain_k, eps)


# ---------------------------------------------------------------- RoPE


def rope_dynamic_scale(base_theta: float, trained_max_len: int, target_len: int, dh: int) -> float:
    """Dynamic-NTK base enlargement for contexts beyond the trained length.

    Returns ``base_theta`` unchanged when ``target_len <= trained_max_len``,
    otherwise ``base_theta * s ** (dh / (dh - 2))`` with
    ``s = target_len / trained_max_len``.
    """
    if dh <= 2:
        raise ValueError(f"head dim must exceed 2 for dynamic scaling, got {dh}")
    if target_len < 1:
        raise ValueError("target_len must be >= 1")
    if target_len <= trained_max_len:
        return float(base_theta)
    s = target_len / trained_max_len
    return float(base_theta * s ** (dh / (dh - 2)))


@dataclass
class RopeContext:
    """Rotary-embedding settings for one attention stack.

    ``scaling`` is ``"ntk"`` (enlarge theta) or ``"linear"`` (compress
    positions by ``trained_max_len / target_len``).
    """

    base_theta: float
    head_dim: int
    trained_max_len: int
    target_len: int | None = None
    scaling: str = "ntk"
    effective_theta: float = field(init=False)
    position_scale: float = field(init=False)

    def __post_init__(self):
        if self.head_dim % 2:
            raise ValueError(f"RoPE head_dim must be even, got {self.head_dim}")
        if self.scaling not in ("ntk", "linear"):
            raise ValueError(f"unknown RoPE scaling {self.scaling!r}")
        self.extend_to(self.target_len or self.trained_max_len)

    def extend_to(self, target_len: int) -> "RopeContext":
        self.target_len = int(target_len)
        self.effective_theta = float(self.base_theta)
        self.position_scale = 1.0
        if target_len > self.trained_max_len:
            if self.scaling == "ntk":
                self.effective_theta = rope_dynamic_scale(
                    self.base_theta, self.trained_max_len, target_len, self.head_dim)
            else:
                self.position_scale = self.trained_max_len / target_len
        return self

    @property
    def max_len(self) -> int:
        return max(self.trained_max_len, self.target_len or 0)


def rope_angles(positions, dim: int, theta: float, position_scale: float = 1.0) -> np.ndarray:
    """Angles ``[T, dim/2]``: ``pos * theta ** (-2i/dim)`` (float64)."""
    pos = np.asarray(positions, dtype=np.float64) * position_scale
    inv_freq = theta ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    return pos[:, None] * inv_freq[None, :]


def _rotate(x: Tensor, angles: np.ndarray) -> Tensor:
    """Rotate interleaved pairs ``(2i, 2i+1)`` of the last axis of ``x`` by ``angles``."""
    xd = x.data
    cos = np.cos(angles).astype(xd.dtype)
    sin = np.sin(angles).astype(xd.dtype)

    def apply(a, c, s):
        ev, od = a[..., 0::2], a[..., 1::2]
        out = np.empty_like(a)
        out[..., 0::2] = ev * c - od * s
        out[..., 1::2] = ev * s + od * c
        return out

    return _result(apply(xd, cos, sin), (x,), lambda g: (apply(g, cos, -sin),))


def rope_1d(x: Tensor, positions, ctx: RopeContext) -> Tensor:
    """Apply rotary embedding along the last axis; ``x`` is ``[..., T, dh]``."""
    dh = x.shape[-1]
    if dh % 2:
        raise ValueError(f"rope_1d needs an even head dim, got {dh}")
    ang = rope_angles(positions, dh, ctx.effective_theta, ctx.position_scale)
    if ang.shape[0] != x.shape[-2]:
        raise ValueError(f"{ang.shape[0]} positions for sequence of length {x.shape[-2]}")
    return _rotate(x, ang)


def rope_2d(x: Tensor, rows, cols, ctx: RopeContext) -> Tensor:
    """Axial rotary embedding: first half of the head dim follows ``rows``, second half ``cols``."""
    dh = x.shape[-1]
    if dh % 4:
        raise ValueError(f"rope_2d needs head dim divisible by 4, got {dh}")
    half = dh // 2
    ar = rope_angles(rows, half, ctx.effective_theta, ctx.position_scale)
    ac = rope_angles(cols, half, ctx.effective_theta, ctx.position_scale)
    if ar.shape[0] != x.shape[-2] or ac.shape[0] != x.shape[-2]:
        raise ValueError("rows/cols length differs from sequence length")
    return _rotate(x, np.concatenate([ar, ac], axis=-1))


# ---------------------------------------------------------------- absolute bias


@dataclass
class PosBiasTable:
    """Learned additive bias per cell of the trained patch grid, ``[grid_h, grid_w, dim]``."""

    table: Tensor

    @property
    def grid_h(self) -> int:
        return self.table.shape[0]

    @property
    def grid_w(self) -> int:
        return self.table.shape[1]

    @property
    def dim(self) -> int:
        return self.table.shape[2]


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear-interpolation weights ``[n_out, n_in]`` with aligned end points."""
    if n_in < 1 or n_out < 1:
        raise ValueError(f"zero-extent grid ({n_in} -> {n_out})")
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
        return m
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out) if n_in == 1 else np.full(n_out, (n_in - 1) / 2.0)
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.clip(np.floor(src).astype(int), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    w = src - lo
    for i in range(n_out):
        m[i, lo[i]] += 1.0 - w[i]
        m[i, hi[i]] += w[i]
    return m


def abs_pos_bias(grid_h: int, grid_w: int, table: PosBiasTable) -> Tensor:
    """Per-patch bias ``[grid_h * grid_w, dim]``, bilinearly resampled from the trained grid."""
    if grid_h < 1 or grid_w < 1:
        raise ValueError(f"zero-extent grid {grid_h}x{grid_w}")
    th, tw, d = table.grid_h, table.grid_w, table.dim
    flat = T.reshape(table.table, (th * tw, d))
    if (grid_h, grid_w) == (th, tw):
        return flat
    m = np.kron(bilinear_matrix(th, grid_h), bilinear_matrix(tw, grid_w))
    return T.matmul(Tensor(m, dtype=table.table.dtype), flat)
