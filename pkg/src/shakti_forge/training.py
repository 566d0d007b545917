"""Three-stage training: schedules, optimizer, freezing, the stage loop and DPO."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Protocol

import numpy as np

from . import tensor as T
from .blocks import decoder_forward
from .fusion import VLM, Batch, sequence_logprob
from .tensor import Tensor

log = logging.getLogger(__name__)

COMPONENTS = ("encoder", "projector", "decoder")
STAGE_FREEZE = {1: ("encoder", "projector"), 2: ("decoder",), 3: ()}

# Learning rates per (variant, stage). The 4B stage-1 rate is published as both
# 2e-4 (the default) and 2e-5 (selected by ``table2_lr``).
PUBLISHED_LR = {
    ("1b", 1): 3e-4, ("1b", 2): 2e-5, ("1b", 3): 4e-5,
    ("4b", 1): 2e-4, ("4b", 2): 4e-5, ("4b", 3): 4e-5,
}
ALT_LR_4B_STAGE1 = 2e-5
PUBLISHED_SEQ_LEN = {"1b": 16384, "4b": 32768}

# Desk-scale settings. The patch embedding gets a damped rate: a light canvas feeds every
# input a large shared offset, and Adam would otherwise drift the whole embedding along it.
TOY_STAGES = {
    1: dict(peak_lr=3e-3, total_steps=500, batch_size=4, grad_accum=2),
    2: dict(peak_lr=3e-4, total_steps=500, batch_size=16, grad_accum=1, patch_embed_lr_scale=0.1),
    3: dict(peak_lr=3e-4, total_steps=3500, batch_size=32, grad_accum=1, patch_embed_lr_scale=0.1),
}


class NumericAbort(RuntimeError):
    """Loss or gradients became non-finite."""

    def __init__(self, step: int, lr: float, grad_norm: float, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step} (lr={lr:.3g}, max grad norm={grad_norm:.3g})")
        self.step, self.lr, self.grad_norm, self.loss = step, lr, grad_norm, loss


class EmptyStreamError(ValueError):
    pass


@dataclass
class StageConfig:
    stage: int
    peak_lr: float
    min_lr: float
    warmup_steps: int
    total_steps: int
    freeze: tuple[str, ...]
    grad_accum: int = 1
    max_seq_len: int = 128
    weight_decay: float = 0.0
    objective: str = "lm"
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    grad_clip: float | None = None
    dpo_beta: float = 0.1
    dpo_weight: float = 1.0
    checkpoint_every: int = 0
    patch_embed_lr_scale: float = 1.0

    def __post_init__(self):
        self.freeze = tuple(sorted(self.freeze))
        self.validate()

    def validate(self) -> None:
        """Raise ``ValueError("<field>: ...")`` on the first violated invariant."""
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage: must be 1, 2 or 3, got {self.stage}")
        unknown = set(self.freeze) - set(COMPONENTS)
        if unknown:
            raise ValueError(f"freeze: unknown components {sorted(unknown)}")
        fz = set(self.freeze)
        if self.stage == 1 and not fz >= {"encoder", "projector"}:
            raise ValueError("freeze: stage 1 must freeze encoder and projector")
        if self.stage == 2 and fz != {"decoder"}:
            raise ValueError("freeze: stage 2 must freeze exactly the decoder")
        if self.stage == 3 and fz:
            raise ValueError("freeze: stage 3 trains every component")
        if self.grad_accum < 1:
            raise ValueError(f"grad_accum: must be >= 1, got {self.grad_accum}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps: must be >= 1, got {self.total_steps}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(f"warmup_steps: must lie in [0, total_steps], got {self.warmup_steps}")
        if self.peak_lr < 0 or self.min_lr < 0 or self.min_lr > self.peak_lr:
            raise ValueError("min_lr: need 0 <= min_lr <= peak_lr")
        if self.objective not in ("lm", "lm+dpo"):
            raise ValueError(f"objective: must be 'lm' or 'lm+dpo', got {self.objective!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size: must be >= 1")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len: must be >= 2")
        if self.weight_decay < 0:
            raise ValueError("weight_decay: must be >= 0")
        if not 0 < self.patch_embed_lr_scale <= 1:
            raise ValueError("patch_embed_lr_scale: must lie in (0, 1]")
        if self.dpo_beta <= 0:
            raise ValueError("dpo_beta: must be > 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["freeze"] = list(self.freeze)
        return d


def stage_defaults(variant: str, stage: int, table2_lr: bool = False, **overrides) -> StageConfig:
    """Stage hyperparameters for ``1b``/``4b`` (published values) or ``toy`` (desk scale).

    Warmup is 2% of the steps and ``min_lr`` a tenth of the peak. Stage 1
    accumulates gradients over 2 micro-batches; stage 3 uses weight decay 0.01.
    """
    variant = variant.lower()
    if stage not in (1, 2, 3):
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    if variant in ("1b", "4b"):
        lr = PUBLISHED_LR[(variant, stage)]
        if table2_lr and (variant, stage) == ("4b", 1):
            lr = ALT_LR_4B_STAGE1
        base = dict(peak_lr=lr, total_steps=10_000, batch_size=8, max_seq_len=PUBLISHED_SEQ_LEN[variant],
                    grad_accum=2 if stage == 1 else 1)
    elif variant in ("toy", "micro"):
        base = dict(TOY_STAGES[stage], max_seq_len=128, grad_clip=1.0)
    else:
        raise ValueError(f"unknown model variant {variant!r}")
    base.update(weight_decay=0.01 if stage == 3 else 0.0)
    base.update(overrides)
    total = base["total_steps"]
    base.setdefault("warmup_steps", max(1, round(0.02 * total)) if total > 1 else 0)
    base.setdefault("min_lr", base["peak_lr"] / 10)
    base.setdefault("freeze", STAGE_FREEZE[stage])
    return StageConfig(stage=stage, **base)


def cosine_lr(step: int, warmup_steps: int, total_steps: int, peak: float, min_lr: float) -> float:
    """Linear warmup to ``peak`` then cosine decay to ``min_lr`` at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return peak * step / warmup_steps
    if total_steps == warmup_steps:
        return peak
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return min_lr + 0.5 * (peak - min_lr) * (1 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def create(cls, params: dict[str, Tensor], beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.0):
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()},
                   0, beta1, beta2, eps, weight_decay)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: OptimizerState,
               lr: float, lr_scales: dict[str, float] | None = None) -> None:
    """Decoupled-weight-decay Adam update, in place. Decay touches only matrices (ndim >= 2).

    ``lr_scales`` maps a parameter-name prefix to a learning-rate multiplier.
    """
    base_lr = lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1, bc2 = 1 - b1 ** t, 1 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise T.DimensionError(f"{name}: grad {g.shape} / moment {state.m[name].shape} vs param {p.shape}")
        lr = base_lr * _lr_scale(name, lr_scales)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if state.weight_decay and p.ndim >= 2:
            p.data *= p.data.dtype.type(1 - lr * state.weight_decay)
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.data.dtype, copy=False)


def _lr_scale(name: str, lr_scales: dict[str, float] | None) -> float:
    for prefix, k in (lr_scales or {}).items():
        if name.startswith(prefix):
            return k
    return 1.0


def apply_freeze(model: VLM, freeze: Iterable[str]) -> dict[str, Tensor]:
    """Mark frozen components non-trainable; return the trainable parameters by name."""
    freeze = set(freeze)
    unknown = freeze - set(COMPONENTS)
    if unknown:
        raise ValueError(f"unknown component(s) {sorted(unknown)}; valid: {COMPONENTS}")
    trainable = {}
    for name, p in model.named_parameters().items():
        frozen = name.split(".", 1)[0] in freeze
        p.requires_grad = not frozen
        p.grad = None
        if not frozen:
            trainable[name] = p
    return trainable


# ---------------------------------------------------------------- DPO


def dpo_loss(policy_chosen, policy_rejected, ref_chosen, ref_rejected, beta: float) -> Tensor:
    """``-log sigmoid(beta * ((pc - pr) - (rc - rr)))``, averaged over a batch."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    pc, pr, rc, rr = (x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
                      for x in (policy_chosen, policy_rejected, ref_chosen, ref_rejected))
    margin = T.sub(T.sub(pc, pr), T.sub(rc, rr))
    return T.neg(T.mean(T.log_sigmoid(T.scale(margin, beta))))


# ---------------------------------------------------------------- stage loop


@dataclass
class MetricRow:
    step: int
    stage: int
    lr: float
    loss: float
    tokens_seen: int

    def csv(self) -> str:
        return f"{self.step},{self.stage},{self.lr!r},{self.loss!r},{self.tokens_seen}"


METRICS_HEADER = "step,stage,lr,loss,tokens_seen"


class Sink(Protocol):
    def on_step(self, row: MetricRow) -> None: ...

    def on_checkpoint(self, step: int, opt_state: OptimizerState) -> None: ...


@dataclass
class StageResult:
    metrics: list[MetricRow]
    opt_state: OptimizerState
    dropped_micro_batches: int = 0

    @property
    def steps(self) -> int:
        return len(self.metrics)


def _n_supervised(batch: Batch) -> int:
    return int(sum(len(r) for r in batch.responses))


def run_stage(model: VLM, cfg: StageConfig, data_stream: Iterable[Batch], sink: Sink | None = None,
              opt_state: OptimizerState | None = None) -> StageResult:
    """Train one stage; one optimizer step per ``cfg.grad_accum`` micro-batches.

    Micro-batch losses are weighted by their supervised-token counts so an
    accumulated step equals a single step over the concatenated batch. Stops
    after ``cfg.total_steps`` steps or when the stream runs dry; trailing
    micro-batches that do not fill a step are dropped.
    """
    model.decoder.extend_context(cfg.max_seq_len)
    trainable = apply_freeze(model, cfg.freeze)
    if opt_state is None:
        opt_state = OptimizerState.create(trainable, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    reference = None
    if cfg.objective == "lm+dpo":
        with T.no_grad():
            reference = copy.deepcopy(model)
    metrics: list[MetricRow] = []
    pending: list[Batch] = []
    tokens = 0
    seen_any = False
    it = iter(data_stream)
    while len(metrics) < cfg.total_steps:
        batch = next(it, None)
        if batch is None:
            break
        seen_any = True
        pending.append(batch)
        if len(pending) < cfg.grad_accum:
            continue
        step = len(metrics) + 1
        lr = cosine_lr(step, cfg.warmup_steps, cfg.total_steps, cfg.peak_lr, cfg.min_lr)
        for p in trainable.values():
            p.grad = None
        counts = [_n_supervised(b) for b in pending]
        total = sum(counts)
        step_loss = 0.0
        for b, n in zip(pending, counts):
            w = n / total
            _, loss, _ = model.forward(b)
            if cfg.objective == "lm+dpo":
                loss = T.add(loss, T.scale(_dpo_term(model, reference, b, cfg.dpo_beta), cfg.dpo_weight))
            value = loss.item()
            if not math.isfinite(value):
                raise NumericAbort(step, lr, _max_grad_norm(trainable), value)
            T.backward(loss, grad_scale=w)
            step_loss += w * value
        pending = []
        gnorm = T.global_grad_norm(trainable.values())
        if not math.isfinite(gnorm):
            raise NumericAbort(step, lr, gnorm, step_loss)
        if cfg.grad_clip and gnorm > cfg.grad_clip:
            c = cfg.grad_clip / gnorm
            for p in trainable.values():
                if p.grad is not None:
                    p.grad *= p.grad.dtype.type(c)
        adamw_step(trainable, {k: p.grad for k, p in trainable.items()}, opt_state, lr,
                   {"encoder.patch_embed.": cfg.patch_embed_lr_scale})
        tokens += total
        row = MetricRow(step, cfg.stage, lr, step_loss, tokens)
        metrics.append(row)
        if sink is not None:
            sink.on_step(row)
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                sink.on_checkpoint(step, opt_state)
    if not seen_any:
        raise EmptyStreamError("data stream yielded no micro-batches")
    if pending:
        log.warning("dropping %d trailing micro-batch(es) that do not fill an accumulation window", len(pending))
    for p in model.parameters():
        p.grad = None
    return StageResult(metrics, opt_state, len(pending))


def _max_grad_norm(params: dict[str, Tensor]) -> float:
    norms = [float(np.linalg.norm(p.grad)) for p in params.values() if p.grad is not None]
    return max(norms) if norms else 0.0


def _dpo_term(model: VLM, reference: VLM, batch: Batch, beta: float) -> Tensor:
    if batch.rejected is None:
        raise ValueError("lm+dpo objective needs batches with rejected responses")

    def logps(m: VLM, responses):
        seq = m.fuse(batch, responses)
        return sequence_logprob(decoder_forward(seq.embeddings, m.decoder), seq)

    pc, pr = logps(model, batch.responses), logps(model, batch.rejected)
    with T.no_grad():
        rc, rr = logps(reference, batch.responses), logps(reference, batch.rejected)
    return dpo_loss(pc, pr, rc, rr, beta)


def moving_average_blocks(values, window: int = 100) -> list[float]:
    """Means of consecutive non-overlapping ``window``-sized blocks (a trailing partial block is dropped)."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v) // window
    return [float(v[i * window:(i + 1) * window].mean()) for i in range(n)]
