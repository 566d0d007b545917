"""Attention, hybrid-normalization blocks, and the encoder/decoder stacks."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .primitives import (
    LN_EPS,
    RMS_EPS,
    PosBiasTable,
    RopeContext,
    layer_norm,
    qk_normalize,
    rms_norm,
    rope_1d,
    rope_2d,
    swiglu_ffn,
)
from .tensor import Tensor

ALLOWED_PATCH_SIZES = (14, 16, 20, 24, 28, 32)


class NormKind(str, enum.Enum):
    PRE_LAYER_NORM = "PreLayerNorm"
    POST_RMS_NORM = "PostRMSNorm"


class ContextOverflowError(ValueError):
    """Sequence longer than the decoder's usable context."""


class PatchBudgetError(ValueError):
    """More patch tokens than the encoder's budget."""


def norm_schedule(total_layers: int, pre_ln_count: int) -> list[NormKind]:
    """Pre-LayerNorm for the first ``pre_ln_count`` layers, Post-RMSNorm afterwards."""
    if not 0 <= pre_ln_count <= total_layers:
        raise ValueError(f"pre_ln_count {pre_ln_count} outside [0, {total_layers}]")
    return [NormKind.PRE_LAYER_NORM] * pre_ln_count + [NormKind.POST_RMS_NORM] * (total_layers - pre_ln_count)


@dataclass
class ModelConfig:
    enc_layers: int
    enc_dim: int
    enc_heads: int
    enc_pre_ln_count: int
    dec_layers: int
    dec_dim: int
    dec_heads: int
    dec_pre_ln_count: int
    vocab_size: int
    max_seq_len: int
    rope_theta: float
    ffn_multiplier: float = 8 / 3
    ffn_multiple_of: int = 8
    patch_budget: int = 1024
    pos_grid: int = 32
    patch_sizes: tuple[int, ...] = ALLOWED_PATCH_SIZES
    enc_qk_norm: bool = True
    dec_qk_norm: bool = True
    rope_scaling: str = "ntk"
    dynamic_rope: bool = True
    nominal_decoder: bool = False

    def __post_init__(self):
        self.patch_sizes = tuple(int(p) for p in self.patch_sizes)
        self.validate()

    def validate(self) -> None:
        for pre in ("enc", "dec"):
            layers = getattr(self, f"{pre}_layers")
            dim = getattr(self, f"{pre}_dim")
            heads = getattr(self, f"{pre}_heads")
            pre_ln = getattr(self, f"{pre}_pre_ln_count")
            if min(layers, dim, heads, pre_ln) < 0:
                raise ValueError(f"{pre}: extents must be non-negative")
            if pre_ln > layers:
                raise ValueError(f"{pre}_pre_ln_count ({pre_ln}) exceeds {pre}_layers ({layers})")
            if heads and dim % heads:
                raise ValueError(f"{pre}_dim {dim} not divisible by {pre}_heads {heads}")
            if heads and (dim // heads) % 4:
                raise ValueError(f"{pre} head dim {dim // heads} not divisible by 4")
        if self.rope_scaling not in ("ntk", "linear"):
            raise ValueError(f"rope_scaling must be 'ntk' or 'linear', got {self.rope_scaling!r}")
        bad = set(self.patch_sizes) - set(ALLOWED_PATCH_SIZES)
        if bad:
            raise ValueError(f"patch sizes {sorted(bad)} not in {ALLOWED_PATCH_SIZES}")

    @property
    def enc_head_dim(self) -> int:
        return self.enc_dim // self.enc_heads if self.enc_heads else 0

    @property
    def dec_head_dim(self) -> int:
        return self.dec_dim // self.dec_heads if self.dec_heads else 0

    def ffn_hidden(self, dim: int) -> int:
        m = self.ffn_multiple_of
        return m * math.ceil(self.ffn_multiplier * dim / m) if dim else 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["patch_sizes"] = list(self.patch_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()


# Encoder extents and hybrid splits follow the published presets; decoder
# internals of the 500M / 2.5B language models are unpublished (nominal).
PRESETS: dict[str, dict] = {
    "1b": dict(enc_layers=36, enc_dim=1536, enc_heads=16, enc_pre_ln_count=12,
               dec_layers=24, dec_dim=1024, dec_heads=16, dec_pre_ln_count=8,
               vocab_size=32000, max_seq_len=16384, rope_theta=125000.0, nominal_decoder=True),
    "4b": dict(enc_layers=48, enc_dim=1920, enc_heads=24, enc_pre_ln_count=18,
               dec_layers=32, dec_dim=2560, dec_heads=32, dec_pre_ln_count=10,
               vocab_size=32000, max_seq_len=32768, rope_theta=500000.0, nominal_decoder=True),
    "toy": dict(enc_layers=4, enc_dim=128, enc_heads=4, enc_pre_ln_count=2,
                dec_layers=4, dec_dim=128, dec_heads=4, dec_pre_ln_count=2,
                vocab_size=19, max_seq_len=64, rope_theta=10000.0, pos_grid=4),
    "micro": dict(enc_layers=1, enc_dim=8, enc_heads=2, enc_pre_ln_count=1,
                  dec_layers=1, dec_dim=8, dec_heads=2, dec_pre_ln_count=0,
                  vocab_size=19, max_seq_len=32, rope_theta=10000.0, pos_grid=2,
                  patch_sizes=(14,)),
}
PRESETS["shakti-1b-encoder"] = PRESETS["1b"]
PRESETS["shakti-4b-encoder"] = PRESETS["4b"]


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


# ---------------------------------------------------------------- modules


class Module:
    """Container whose Tensor attributes are parameters.

    Parameter names are dotted attribute paths, e.g. ``decoder.layers.0.attn.wq``.
    """

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = prefix + key
            if isinstance(val, Tensor):
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    out.update(m.named_parameters(f"{name}.{i}."))
            elif isinstance(val, dict) and val and isinstance(next(iter(val.values())), Tensor):
                for k, t in val.items():
                    out[f"{name}.{k}"] = t
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    """Normal(0, std) truncated at two standard deviations."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2
    return Tensor(x * std, requires_grad=True)


def _const(shape, value: float) -> Tensor:
    return Tensor(np.full(shape, value, dtype=T.get_dtype()), requires_grad=True)


class Attention(Module):
    def __init__(self, dim: int, heads: int, qk_norm: bool, rng, out_std: float):
        self._heads = heads
        self._qk_norm = qk_norm
        self.wq = trunc_normal(rng, (dim, dim))
        self.wk = trunc_normal(rng, (dim, dim))
        self.wv = trunc_normal(rng, (dim, dim))
        self.wo = trunc_normal(rng, (dim, dim), out_std)
        if qk_norm:
            dh = dim // heads
            self.q_gain = _const(dh, 1.0)
            self.k_gain = _const(dh, 1.0)
        self._record_logits = False
        self._max_logit = 0.0

    @property
    def heads(self) -> int:
        return self._heads

    @property
    def use_qk_norm(self) -> bool:
        return self._qk_norm


def mha_forward(x: Tensor, attn: Attention, mask: np.ndarray | None, rotate,
                use_qk_norm: bool | None = None) -> Tensor:
    """Multi-head attention over ``x`` of shape ``[B, T, d]``.

    ``rotate`` applies the positional rotation to ``[B, H, T, dh]`` queries
    and keys. ``mask`` is a boolean ``[T, T]`` array (True = may attend) or
    None for bidirectional attention. With QK-Norm the rotated q and k are
    RMS-normalized before the scaled dot product.
    """
    B, Tn, d = x.shape
    H = attn.heads
    dh = d // H
    if mask is not None and mask.shape != (Tn, Tn):
        raise ValueError(f"mask shape {mask.shape} does not match sequence length {Tn}")
    use_qk_norm = attn.use_qk_norm if use_qk_norm is None else use_qk_norm

    def heads(t):
        return T.transpose(T.reshape(t, (B, Tn, H, dh)), (0, 2, 1, 3))

    q = rotate(heads(T.matmul(x, attn.wq)))
    k = rotate(heads(T.matmul(x, attn.wk)))
    v = heads(T.matmul(x, attn.wv))
    if use_qk_norm:
        q, k = qk_normalize(q, k, attn.q_gain, attn.k_gain)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if attn._record_logits:
        attn._max_logit = max(attn._max_logit, float(np.abs(scores.data).max()))
    if mask is not None:
        scores = T.where_const(mask, scores, -np.inf)
    ctx = T.matmul(T.softmax(scores, axis=-1), v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, Tn, d))
    return T.matmul(ctx, attn.wo)


class Block(Module):
    """One transformer layer; wiring depends on ``norm_kind``.

    PreLayerNorm: ``x + attn(LN(x))`` then ``x + ffn(LN(x))``.
    PostRMSNorm:  ``RMS(x + attn(x))`` then ``RMS(x + ffn(x))``.
    """

    def __init__(self, dim: int, heads: int, hidden: int, norm_kind: NormKind, qk_norm: bool,
                 rng, n_layers: int):
        out_std = 0.02 / math.sqrt(2 * max(n_layers, 1))
        self._kind = NormKind(norm_kind)
        self.attn = Attention(dim, heads, qk_norm, rng, out_std)
        self.norm1_gain = _const(dim, 1.0)
        if self._kind is NormKind.PRE_LAYER_NORM:
            self.norm1_bias = _const(dim, 0.0)
        self.norm2_gain = _const(dim, 1.0)
        if self._kind is NormKind.PRE_LAYER_NORM:
            self.norm2_bias = _const(dim, 0.0)
        self.w1 = trunc_normal(rng, (dim, hidden))
        self.w3 = trunc_normal(rng, (dim, hidden))
        self.w2 = trunc_normal(rng, (hidden, dim), out_std)

    @property
    def norm_kind(self) -> NormKind:
        return self._kind

    def ffn(self, x: Tensor) -> Tensor:
        return swiglu_ffn(x, self.w1, self.w3, self.w2)


def block_forward(x: Tensor, block: Block, mask, rotate) -> Tensor:
    if block.norm_kind is NormKind.PRE_LAYER_NORM:
        h = T.add(x, mha_forward(layer_norm(x, block.norm1_gain, block.norm1_bias, LN_EPS), block.attn, mask, rotate))
        return T.add(h, block.ffn(layer_norm(h, block.norm2_gain, block.norm2_bias, LN_EPS)))
    h = rms_norm(T.add(x, mha_forward(x, block.attn, mask, rotate)), block.norm1_gain, RMS_EPS)
    return rms_norm(T.add(h, block.ffn(h)), block.norm2_gain, RMS_EPS)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


class Encoder(Module):
    """Bidirectional vision stack with per-patch-size embeddings and a 2D bias table."""

    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.enc_dim
        self._cfg = cfg
        self.patch_embed = {str(p): trunc_normal(rng, (p * p * 3, d)) for p in cfg.patch_sizes} if d else {}
        self.pos_bias = trunc_normal(rng, (cfg.pos_grid, cfg.pos_grid, d))
        hidden = cfg.ffn_hidden(d)
        self.layers = [
            Block(d, cfg.enc_heads, hidden, kind, cfg.enc_qk_norm, rng, cfg.enc_layers)
            for kind in norm_schedule(cfg.enc_layers, cfg.enc_pre_ln_count)
        ]
        self._rope = RopeContext(cfg.rope_theta, cfg.enc_head_dim or 4, trained_max_len=cfg.pos_grid)

    @property
    def rope(self) -> RopeContext:
        return self._rope

    @property
    def bias_table(self) -> PosBiasTable:
        return PosBiasTable(self.pos_bias)


def encoder_forward(tokens: Tensor, rows, cols, encoder: Encoder) -> Tensor:
    """Run patch tokens ``[N, d]`` or ``[B, N, d]`` with grid indices through the stack."""
    cfg = encoder._cfg
    x, squeeze = _batched(tokens)
    N = x.shape[1]
    if N > cfg.patch_budget:
        raise PatchBudgetError(f"{N} patch tokens exceed budget {cfg.patch_budget}")
    rows = np.asarray(rows)
    cols = np.asarray(cols)

    def rotate(t):
        return rope_2d(t, rows, cols, encoder.rope)

    for blk in encoder.layers:
        x = block_forward(x, blk, None, rotate)
    return T.reshape(x, x.shape[1:]) if squeeze else x


class Decoder(Module):
    """Causal language model over input embeddings, with final RMSNorm and vocabulary head."""

    def __init__(self, cfg: ModelConfig, rng):
        d, V = cfg.dec_dim, cfg.vocab_size
        self._cfg = cfg
        self.embed = trunc_normal(rng, (V, d))
        hidden = cfg.ffn_hidden(d)
        self.layers = [
            Block(d, cfg.dec_heads, hidden, kind, cfg.dec_qk_norm, rng, cfg.dec_layers)
            for kind in norm_schedule(cfg.dec_layers, cfg.dec_pre_ln_count)
        ]
        self.final_norm = _const(d, 1.0)
        self.lm_head = trunc_normal(rng, (d, V))
        self._rope = RopeContext(cfg.rope_theta, cfg.dec_head_dim or 4, cfg.max_seq_len,
                                 scaling=cfg.rope_scaling)

    @property
    def rope(self) -> RopeContext:
        return self._rope

    def extend_context(self, target_len: int) -> None:
        """Enable dynamic RoPE scaling for sequences up to ``target_len``."""
        if target_len > self._cfg.max_seq_len and not self._cfg.dynamic_rope:
            raise ContextOverflowError(
                f"context {target_len} exceeds trained {self._cfg.max_seq_len} and dynamic RoPE is disabled")
        self._rope.extend_to(max(target_len, 1))


_mask_cache: dict[int, np.ndarray] = {}


def causal_mask(n: int) -> np.ndarray:
    m = _mask_cache.get(n)
    if m is None:
        m = np.tril(np.ones((n, n), dtype=bool))
        _mask_cache[n] = m
    return m


def decoder_forward(embeddings: Tensor, decoder: Decoder, positions=None) -> Tensor:
    """Causal stack + final norm + vocabulary projection; returns logits ``[.., T, V]``."""
    x, squeeze = _batched(embeddings)
    Tn = x.shape[1]
    if Tn > decoder.rope.max_len:
        raise ContextOverflowError(f"sequence length {Tn} exceeds usable context {decoder.rope.max_len}")
    pos = np.arange(Tn) if positions is None else np.asarray(positions)
    mask = causal_mask(Tn)

    def rotate(t):
        return rope_1d(t, pos, decoder.rope)

    for blk in decoder.layers:
        x = block_forward(x, blk, mask, rotate)
    logits = T.matmul(rms_norm(x, decoder.final_norm, RMS_EPS), decoder.lm_head)
    return T.reshape(logits, logits.shape[1:]) if squeeze else logits


# ---------------------------------------------------------------- counting


def _block_params(d: int, heads: int, hidden: int, kind: NormKind, qk_norm: bool) -> int:
    attn = 4 * d * d + (2 * (d // heads) if qk_norm and heads else 0)
    norms = 4 * d if kind is NormKind.PRE_LAYER_NORM else 2 * d
    return attn + norms + 3 * d * hidden


def param_count(cfg: ModelConfig, component: str | None = None) -> int:
    """Closed-form trainable-parameter count for ``encoder``, ``projector``, ``decoder`` or all."""
    de, dd, V = cfg.enc_dim, cfg.dec_dim, cfg.vocab_size
    counts = {
        "encoder": sum(p * p * 3 * de for p in cfg.patch_sizes) + cfg.pos_grid ** 2 * de + sum(
            _block_params(de, cfg.enc_heads, cfg.ffn_hidden(de), k, cfg.enc_qk_norm)
            for k in norm_schedule(cfg.enc_layers, cfg.enc_pre_ln_count)),
        "projector": de * dd + dd * dd,
        "decoder": 2 * V * dd + dd + sum(
            _block_params(dd, cfg.dec_heads, cfg.ffn_hidden(dd), k, cfg.dec_qk_norm)
            for k in norm_schedule(cfg.dec_layers, cfg.dec_pre_ln_count)),
    }
    if component is None:
        return int(sum(counts.values()))
    return int(counts[component])
