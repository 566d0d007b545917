"""The gradient-check suite shared by the ``gradcheck`` command and the acceptance tests.

Each case builds 64-bit inputs from a seeded generator. Weight matrices are
drawn at unit scale (``N(0, 1/fan_in)``): at the 0.02 init scale the
scale-invariant QK-Norm path is so curved that a step of 1e-3 is a sizeable
fraction of every weight, which tests the stencil rather than the gradient.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .blocks import Block, NormKind, block_forward, causal_mask, preset
from .fusion import VLM, project_visual, vlm_forward
from .primitives import (
    PosBiasTable,
    RopeContext,
    abs_pos_bias,
    layer_norm,
    qk_normalize,
    rms_norm,
    rope_1d,
    rope_2d,
    silu,
    swiglu_ffn,
)
from .training import dpo_loss
from .vision import Image, embed_patches, plan_patches

OP_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclass
class Case:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable, list]]
    tol: float = OP_TOL
    max_elements: int | None = None


def _r(rng, *shape):
    return rng.standard_normal(shape)


def _op(fn, *shapes):
    return lambda rng: (fn, [_r(rng, *s) for s in shapes])


def _positive(fn, *shape):
    return lambda rng: (fn, [0.5 + np.abs(_r(rng, *shape))])


def _rope_ctx(dh):
    return RopeContext(10000.0, dh, trained_max_len=64)


def _set_path(module, dotted: str, value) -> None:
    *path, last = dotted.split(".")
    for part in path:
        if isinstance(module, dict):
            module = module[part]
        elif isinstance(module, list):
            module = module[int(part)]
        else:
            module = getattr(module, part)
    if isinstance(module, dict):
        module[last] = value
    else:
        setattr(module, last, value)


def unit_scale_init(module, rng) -> None:
    """Matrices ~ N(0, 1/fan_in), gains near 1, biases small."""
    for name, p in module.named_parameters().items():
        if p.ndim >= 2:
            p.data = rng.standard_normal(p.shape) / np.sqrt(p.shape[-2])
        elif name.endswith("bias"):
            p.data = 0.1 * rng.standard_normal(p.shape)
        else:
            p.data = 1.0 + 0.1 * rng.standard_normal(p.shape)


def module_op(module, forward: Callable) -> tuple[Callable, list[np.ndarray]]:
    """Wrap ``forward(*extra)`` so every parameter of ``module`` becomes a gradcheck input."""
    named = module.named_parameters()
    names = list(named)

    def op(*args):
        params, extra = args[:len(names)], args[len(names):]
        for n, p in zip(names, params):
            _set_path(module, n, p)
        return forward(*extra)

    return op, [named[n].data for n in names]


def _block_case(kind: NormKind):
    def build(rng):
        blk = Block(8, 2, 16, kind, True, rng, 1)
        unit_scale_init(blk, rng)
        op, params = module_op(blk, lambda x: block_forward(x, blk, causal_mask(3), lambda t: t))
        return op, params + [_r(rng, 1, 3, 8)]
    return build


def _micro_case(rng):
    model = VLM(preset("micro"), seed=int(rng.integers(1 << 30)))
    img = Image(rng.integers(0, 256, (14, 14, 3), dtype=np.uint8))
    op, params = module_op(model, lambda: vlm_forward(img, [1], [2, 3], model)[1])
    return op, params


def _embed_case(rng):
    plan = plan_patches(42, 28)

    def op(x, w, t):
        return embed_patches(x, {"14": w}, plan, PosBiasTable(t))

    return op, [rng.random((plan.token_count, 588)), 0.1 * _r(rng, 588, 4), _r(rng, 2, 2, 4)]


def _swiglu(rng):
    return swiglu_ffn, [_r(rng, 2, 4)] + [0.5 * _r(rng, *s) for s in ((4, 8), (4, 8), (8, 4))]


def _projector(rng):
    return project_visual, [_r(rng, 3, 6), 0.5 * _r(rng, 6, 4), 0.5 * _r(rng, 4, 4)]


def _qk(q, k, gq, gk):
    return T.concat(list(qk_normalize(q, k, gq, gk)), axis=0)


CASES: list[Case] = [
    Case("matmul", _op(T.matmul, (4, 4), (4, 4))),
    Case("batched_matmul", _op(T.matmul, (2, 3, 4), (2, 4, 3))),
    Case("add", _op(T.add, (3, 4), (4,))),
    Case("sub", _op(T.sub, (3, 4), (3, 1))),
    Case("mul", _op(T.mul, (3, 4), (3, 4))),
    Case("div", lambda rng: (T.div, [_r(rng, 3, 4), 2.0 + np.abs(_r(rng, 3, 4))])),
    Case("scale", _op(lambda a: T.scale(a, -1.7), (5,))),
    Case("exp", _op(T.exp, (5,))),
    Case("log", _positive(T.log, 5)),
    Case("sqrt", _positive(T.sqrt, 5)),
    Case("sigmoid", _op(T.sigmoid, (5,))),
    Case("log_sigmoid", _op(T.log_sigmoid, (5,))),
    Case("tanh", _op(T.tanh, (5,))),
    Case("sum", _op(lambda a: T.sum(a, axis=0), (3, 4))),
    Case("mean", _op(lambda a: T.mean(a, axis=1), (3, 4))),
    Case("variance", _op(lambda a: T.variance(a, axis=-1), (3, 4))),
    Case("concat", _op(lambda a, b: T.concat([a, b], axis=1), (2, 3), (2, 2))),
    Case("slice", _op(lambda a: T.getitem(a, (slice(1, 3), slice(None, None, 2))), (4, 5))),
    Case("reshape", _op(lambda a: T.reshape(a, (6, 2)), (3, 4))),
    Case("transpose", _op(lambda a: T.transpose(a, (2, 0, 1)), (2, 3, 4))),
    Case("embedding", _op(lambda t: T.embedding(t, np.array([[0, 2], [2, 1]])), (3, 4))),
    Case("softmax", _op(lambda a: T.softmax(a, axis=-1), (3, 5))),
    Case("log_softmax", _op(lambda a: T.log_softmax(a, axis=-1), (3, 5))),
    Case("cross_entropy", _op(lambda a: T.cross_entropy(a, [1, 0, 4]), (3, 5))),
    Case("where_const", _op(lambda a: T.where_const(np.tri(3, dtype=bool), a, 0.0), (3, 3))),
    Case("layer_norm", _op(layer_norm, (3, 6), (6,), (6,))),
    Case("rms_norm", _op(rms_norm, (3, 6), (6,))),
    Case("silu", _op(silu, (4, 3))),
    Case("swiglu", _swiglu),
    Case("qk_normalize", _op(_qk, (2, 3, 4), (2, 3, 4), (4,), (4,))),
    Case("rope_1d", _op(lambda x: rope_1d(x, [0, 3, 9], _rope_ctx(8)), (2, 3, 8))),
    Case("rope_2d", _op(lambda x: rope_2d(x, [0, 1, 2], [2, 0, 1], _rope_ctx(8)), (3, 8))),
    Case("abs_pos_bias", _op(lambda t: abs_pos_bias(5, 3, PosBiasTable(t)), (3, 2, 4))),
    Case("embed_patches", _embed_case, max_elements=64),
    Case("project_visual", _projector),
    Case("dpo_loss", _op(lambda a, b, c, d: dpo_loss(a, b, c, d, 0.5), (3,), (3,), (3,), (3,))),
    Case("block_pre_layer_norm", _block_case(NormKind.PRE_LAYER_NORM)),
    Case("block_post_rms_norm", _block_case(NormKind.POST_RMS_NORM)),
    Case("micro_vlm_end_to_end", _micro_case, tol=END_TO_END_TOL, max_elements=24),
]


@dataclass
class CaseResult:
    name: str
    worst: float
    tol: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.worst < self.tol


def run_case(case: Case, seeds: int = 10) -> CaseResult:
    t0 = time.perf_counter()
    worst = 0.0
    with T.precision(np.float64):
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            op, inputs = case.build(rng)
            err = T.gradcheck(op, inputs, eps=1e-3, seed=seed, max_elements=case.max_elements)
            worst = max(worst, err)
    return CaseResult(case.name, worst, case.tol, time.perf_counter() - t0)


def run_suite(seeds: int = 10, names: list[str] | None = None) -> list[CaseResult]:
    return [run_case(c, seeds) for c in CASES if names is None or c.name in names]
