"""Visual projector, visual/text sequence fusion, and the assembled VLM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import (
    ContextOverflowError,
    Decoder,
    Encoder,
    ModelConfig,
    Module,
    decoder_forward,
    encoder_forward,
    trunc_normal,
)
from .primitives import silu
from .rng import stream
from .tensor import Tensor
from .vision import Image, PatchPlan, embed_patches, plan_patches, patchify, resize_image


@dataclass(frozen=True)
class Template:
    """Special-token ids used when laying out a fused sequence."""

    bos_id: int
    eos_id: int
    pad_id: int


@dataclass
class FusedSequence:
    """Decoder input ``[BOS][visual][prompt][response]``, possibly batched.

    ``target_ids[..., i]`` is the token occupying position ``i`` (PAD on BOS
    and visual slots); ``loss_mask[..., i]`` is true iff that token is a
    response token the model must predict from position ``i - 1``.
    """

    embeddings: Tensor
    visual_span: tuple[int, int]
    target_ids: np.ndarray
    loss_mask: np.ndarray

    @property
    def length(self) -> int:
        return self.embeddings.shape[-2]

    @property
    def positions(self) -> np.ndarray:
        return np.arange(self.length)


@dataclass
class Batch:
    """One micro-batch. ``images`` is None for text-only batches."""

    prompts: list[list[int]]
    responses: list[list[int]]
    images: list[Image] | None = None
    rejected: list[list[int]] | None = None

    def __len__(self):
        return len(self.responses)


class Projector(Module):
    def __init__(self, d_enc: int, d_dec: int, rng):
        self.p1 = trunc_normal(rng, (d_enc, d_dec))
        self.p2 = trunc_normal(rng, (d_dec, d_dec))


def project_visual(features: Tensor, p1: Tensor, p2: Tensor) -> Tensor:
    """Two-layer MLP mapping encoder features to decoder-space visual tokens."""
    if features.shape[-1] != p1.shape[0] or p1.shape[1] != p2.shape[0]:
        raise T.DimensionError(f"projector shapes {features.shape}, {p1.shape}, {p2.shape} disagree")
    return T.matmul(silu(T.matmul(features, p1)), p2)


def fuse_sequence(visual_tokens: Tensor | None, prompt_ids, response_ids, embed_table: Tensor,
                  template: Template, max_len: int | None = None, pad_to: int | None = None) -> FusedSequence:
    """Lay out ``[BOS][visual][prompt][response]`` for one sample or a batch.

    For a batch, ``prompt_ids``/``response_ids`` are lists of id lists and
    ``visual_tokens`` is ``[B, N, d]``; rows are right-padded with PAD.
    """
    batched = bool(len(response_ids)) and isinstance(response_ids[0], (list, tuple, np.ndarray))
    if not batched:
        prompt_ids, response_ids = [list(prompt_ids)], [list(response_ids)]
        if visual_tokens is not None:
            visual_tokens = T.reshape(visual_tokens, (1,) + visual_tokens.shape)
    B = len(response_ids)
    N = 0 if visual_tokens is None else visual_tokens.shape[1]
    text_len = max(len(p) + len(r) for p, r in zip(prompt_ids, response_ids))
    if pad_to is not None:
        text_len = max(text_len, pad_to - 1 - N)
    total = 1 + N + text_len
    if max_len is not None and total > max_len:
        raise ContextOverflowError(f"fused length {total} exceeds context {max_len}")
    ids = np.full((B, 1 + text_len), template.pad_id, dtype=np.int64)
    ids[:, 0] = template.bos_id
    resp = np.zeros((B, 1 + text_len), dtype=bool)
    for b, (p, r) in enumerate(zip(prompt_ids, response_ids)):
        seq = list(p) + list(r)
        ids[b, 1:1 + len(seq)] = seq
        resp[b, 1 + len(p):1 + len(seq)] = True
    head = T.embedding(embed_table, ids[:, :1])
    parts = [head]
    if N:
        parts.append(visual_tokens)
    if text_len:
        parts.append(T.embedding(embed_table, ids[:, 1:]))
    emb = T.concat(parts, axis=1) if len(parts) > 1 else head
    target = np.concatenate([ids[:, :1], np.full((B, N), template.pad_id, dtype=np.int64), ids[:, 1:]], axis=1)
    mask = np.concatenate([resp[:, :1], np.zeros((B, N), dtype=bool), resp[:, 1:]], axis=1)
    if not batched:
        emb = T.reshape(emb, emb.shape[1:])
        target, mask = target[0], mask[0]
    return FusedSequence(emb, (1, 1 + N), target, mask)


def shifted_loss(logits: Tensor, seq: FusedSequence) -> tuple[Tensor, int]:
    """Next-token cross entropy over response positions; returns ``(loss, n_tokens)``."""
    tgt = np.roll(seq.target_ids, -1, axis=-1)
    keep = np.roll(seq.loss_mask, -1, axis=-1)
    keep[..., -1] = False
    return T.cross_entropy(logits, tgt, ignore_mask=~keep), int(keep.sum())


def sequence_logprob(logits: Tensor, seq: FusedSequence) -> Tensor:
    """Per-sample summed log-probability of the response tokens, shape ``[B]``."""
    tgt = np.roll(seq.target_ids, -1, axis=-1)
    keep = np.roll(seq.loss_mask, -1, axis=-1)
    keep[..., -1] = False
    pick = np.zeros(logits.shape, dtype=logits.dtype)
    b, t = np.nonzero(keep)
    pick[b, t, tgt[b, t]] = 1.0
    return T.sum(T.mul(T.log_softmax(logits, axis=-1), Tensor(pick, dtype=logits.dtype)), axis=(1, 2))


class VLM(Module):
    """Vision encoder + projector + decoder."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, template: Template | None = None):
        self._cfg = cfg
        rng = stream(seed, "model.init")
        self.encoder = Encoder(cfg, rng)
        self.projector = Projector(cfg.enc_dim, cfg.dec_dim, rng)
        self.decoder = Decoder(cfg, rng)
        V = cfg.vocab_size
        self._template = template or Template(bos_id=V - 3, eos_id=V - 2, pad_id=V - 1)

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    @property
    def template(self) -> Template:
        return self._template

    def plan(self, img: Image) -> PatchPlan:
        return plan_patches(img.height, img.width, self._cfg.patch_budget, self._cfg.patch_sizes)

    def encode_images(self, images: list[Image]) -> Tensor:
        """Visual tokens ``[B, N, d_dec]``; every image in the batch must share one plan."""
        plans = [self.plan(im) for im in images]
        plan = plans[0]
        if any(p != plan for p in plans):
            raise ValueError("images in one batch must resolve to the same patch plan")
        patches = np.stack([patchify(resize_image(im, plan.resized_h, plan.resized_w), plan) for im in images])
        x = embed_patches(patches, self.encoder.patch_embed, plan, self.encoder.bias_table)
        rows, cols = plan.positions()
        feats = encoder_forward(x, rows, cols, self.encoder)
        return project_visual(feats, self.projector.p1, self.projector.p2)

    def fuse(self, batch: Batch, responses=None) -> FusedSequence:
        visual = self.encode_images(batch.images) if batch.images is not None else None
        return fuse_sequence(visual, batch.prompts, responses or batch.responses, self.decoder.embed,
                             self._template, max_len=self.decoder.rope.max_len)

    def forward(self, batch: Batch) -> tuple[Tensor, Tensor, int]:
        """Logits ``[B, T, V]``, mean response-token loss, supervised token count."""
        seq = self.fuse(batch)
        logits = decoder_forward(seq.embeddings, self.decoder)
        loss, n = shifted_loss(logits, seq)
        return logits, loss, n

    def text_logits(self, ids: np.ndarray) -> np.ndarray:
        """Logits for raw token windows ``[B, T]`` (no BOS insertion), no tape."""
        with T.no_grad():
            emb = T.embedding(self.decoder.embed, np.asarray(ids))
            return decoder_forward(emb, self.decoder).data

    def generate(self, images: list[Image], prompts: list[list[int]] | None = None,
                 max_new_tokens: int = 16) -> list[list[int]]:
        """Greedy decoding until EOS; returns generated ids without EOS."""
        B = len(images)
        prompts = prompts or [[] for _ in range(B)]
        eos = self._template.eos_id
        out: list[list[int]] = [[] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        with T.no_grad():
            visual = self.encode_images(images)
            for _ in range(max_new_tokens):
                # rows differ in length; right-padded, logits read at each row's last real slot
                seq = fuse_sequence(visual, prompts, [list(o) for o in out], self.decoder.embed, self._template)
                logits = decoder_forward(seq.embeddings, self.decoder).data
                N = visual.shape[1]
                for b in range(B):
                    if done[b]:
                        continue
                    last = N + len(prompts[b]) + len(out[b])
                    tok = int(np.argmax(logits[b, last]))
                    if tok == eos:
                        done[b] = True
                    else:
                        out[b].append(tok)
                if done.all():
                    break
        return out


def vlm_forward(image: Image | None, prompt_ids, response_ids, model: VLM) -> tuple[Tensor, Tensor]:
    """Single-sample plan -> patchify -> encode -> project -> fuse -> decode -> loss."""
    batch = Batch([list(prompt_ids)], [list(response_ids)], None if image is None else [image])
    logits, loss, _ = model.forward(batch)
    return T.reshape(logits, logits.shape[1:]), loss
