"""Deterministic synthetic corpora: an order-2 Markov text source and glyph-OCR images."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .fusion import Batch
from .rng import stream
from .vision import Image, save_ppm

GLYPH_CHARS = "0123456789ABCDEF"
BACKGROUND = 235

# 8x8 bitmaps, one string per row ('#' = ink).
FONT = {
    "0": ["..####..", ".##..##.", ".##.###.", ".###.##.", ".##..##.", ".##..##.", "..####..", "........"],
    "1": ["...##...", "..###...", "...##...", "...##...", "...##...", "...##...", ".######.", "........"],
    "2": ["..####..", ".##..##.", ".....##.", "....##..", "...##...", "..##....", ".######.", "........"],
    "3": [".#####..", ".....##.", ".....##.", "..####..", ".....##.", ".....##.", ".#####..", "........"],
    "4": ["....##..", "...###..", "..#.##..", ".#..##..", ".######.", "....##..", "....##..", "........"],
    "5": [".######.", ".##.....", ".#####..", ".....##.", ".....##.", ".##..##.", "..####..", "........"],
    "6": ["...###..", "..##....", ".##.....", ".#####..", ".##..##.", ".##..##.", "..####..", "........"],
    "7": [".######.", ".....##.", "....##..", "...##...", "..##....", "..##....", "..##....", "........"],
    "8": ["..####..", ".##..##.", ".##..##.", "..####..", ".##..##.", ".##..##.", "..####..", "........"],
    "9": ["..####..", ".##..##.", ".##..##.", "..#####.", ".....##.", "....##..", "..###...", "........"],
    "A": ["...##...", "..####..", ".##..##.", ".##..##.", ".######.", ".##..##.", ".##..##.", "........"],
    "B": [".#####..", ".##..##.", ".##..##.", ".#####..", ".##..##.", ".##..##.", ".#####..", "........"],
    "C": ["..####..", ".##..##.", ".##.....", ".##.....", ".##.....", ".##..##.", "..####..", "........"],
    "D": [".####...", ".##.##..", ".##..##.", ".##..##.", ".##..##.", ".##.##..", ".####...", "........"],
    "E": [".######.", ".##.....", ".##.....", ".#####..", ".##.....", ".##.....", ".######.", "........"],
    "F": [".######.", ".##.....", ".##.....", ".#####..", ".##.....", ".##.....", ".##.....", "........"],
}
GLYPHS = np.stack([np.array([[c == "#" for c in row] for row in FONT[ch]]) for ch in GLYPH_CHARS])

HELDOUT_BASE = 1 << 40


class LayoutError(ValueError):
    """The requested glyphs cannot be placed on the canvas."""


@dataclass(frozen=True)
class Vocab:
    """Glyph symbols first, then BOS, EOS, PAD."""

    glyph_set_size: int = 16

    @property
    def bos(self) -> int:
        return self.glyph_set_size

    @property
    def eos(self) -> int:
        return self.glyph_set_size + 1

    @property
    def pad(self) -> int:
        return self.glyph_set_size + 2

    @property
    def size(self) -> int:
        return self.glyph_set_size + 3

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(GLYPH_CHARS[i] for i in ids if 0 <= i < self.glyph_set_size)

    def encode(self, text: str) -> list[int]:
        return [GLYPH_CHARS.index(c) for c in text]


# ---------------------------------------------------------------- text corpus


def markov_table(table_seed: int, vocab_size: int, alpha: float = 0.05) -> np.ndarray:
    """Order-2 transition probabilities ``[V, V, V]`` drawn from Dirichlet(alpha)."""
    rng = stream(table_seed, "corpus.table")
    return rng.dirichlet(np.full(vocab_size, alpha), size=(vocab_size, vocab_size))


def gen_text_corpus(seed: int, n_tokens: int, vocab_size: int, alpha: float = 0.05,
                    table_seed: int | None = None) -> np.ndarray:
    """Token stream from an order-2 Markov source.

    The transition table is derived from ``table_seed`` (defaults to ``seed``)
    so train and held-out streams can share one source.
    """
    if vocab_size < 4:
        raise ValueError("vocab_size must be >= 4")
    out = np.zeros(n_tokens, dtype=np.int64)
    if n_tokens == 0:
        return out
    cdf = np.cumsum(markov_table(seed if table_seed is None else table_seed, vocab_size, alpha), axis=-1)
    cdf[..., -1] = 1.0
    rng = stream(seed, "corpus.walk")
    u = rng.random(n_tokens)
    a, b = (int(t) for t in rng.integers(0, vocab_size, 2))
    flat = cdf.reshape(vocab_size * vocab_size, vocab_size)
    for i in range(n_tokens):
        c = int(np.searchsorted(flat[a * vocab_size + b], u[i], side="right"))
        out[i] = c
        a, b = b, c
    return out


def markov_entropy_rate(table: np.ndarray, n_iter: int = 200) -> float:
    """Conditional entropy (nats/token) of the order-2 source under its stationary pair distribution."""
    V = table.shape[0]
    pair = np.full((V, V), 1.0 / (V * V))
    for _ in range(n_iter):
        pair = np.einsum("ab,abc->bc", pair, table)
    h = -np.sum(table * np.log(np.where(table > 0, table, 1.0)), axis=-1)
    return float(np.sum(pair * h))


def split_documents(tokens: np.ndarray, eos_id: int, mean_len: float, rng: np.random.Generator) -> np.ndarray:
    """Insert ``eos_id`` after documents of geometric length (mean ``mean_len``); keeps the total length."""
    if mean_len < 1:
        raise ValueError("mean_len must be >= 1")
    out = np.empty_like(tokens)
    src = dst = 0
    n = tokens.size
    while dst < n:
        k = min(int(rng.geometric(1.0 / mean_len)), n - dst)
        out[dst:dst + k] = tokens[src:src + k]
        src += k
        dst += k
        if dst < n:
            out[dst] = eos_id
            dst += 1
    return out


def text_batches(seed: int, batch_size: int, seq_len: int, vocab_size: int, alpha: float = 0.05,
                 table_seed: int | None = None, eos_id: int | None = None,
                 mean_doc_len: float = 24.0) -> Iterator[Batch]:
    """Endless text-only micro-batches of ``seq_len - 1`` tokens (BOS is prepended by fusion).

    With ``eos_id`` the stream is cut into EOS-terminated documents, so a
    decoder trained on it learns when to stop.
    """
    w = seq_len - 1
    chunk = 64 * batch_size * w
    part = 0
    doc_rng = stream(seed, "corpus.docs")
    while True:
        toks = gen_text_corpus(seed * 7919 + part, chunk, vocab_size, alpha,
                               table_seed=seed if table_seed is None else table_seed)
        if eos_id is not None:
            toks = split_documents(toks, eos_id, mean_doc_len, doc_rng)
        part += 1
        for i in range(0, chunk, batch_size * w):
            rows = toks[i:i + batch_size * w].reshape(batch_size, w)
            yield Batch(prompts=[[] for _ in range(batch_size)], responses=[r.tolist() for r in rows])


# ---------------------------------------------------------------- glyph OCR


@dataclass
class GlyphSample:
    image: Image
    caption_ids: list[int]
    seed: int


def gen_glyph_sample(seed: int, n_glyphs: int, glyph_set_size: int = 16, size: int = 448,
                     max_scale: int | None = None, background: int = BACKGROUND,
                     jitter: int | None = None) -> GlyphSample:
    """Render ``n_glyphs`` random glyphs in reading order on a light canvas.

    Scale (integer pixel multiple of the 8x8 font), block offset and ink
    shade are random in ``seed``. Glyphs flow left to right and wrap to new
    lines, so the caption order is left-to-right, top-to-bottom. With
    ``jitter=None`` the block lands anywhere on the canvas; otherwise it is
    centred and shifted by up to ``jitter`` pixels along each axis.
    """
    if n_glyphs < 1:
        raise ValueError("n_glyphs must be >= 1")
    if not 1 <= glyph_set_size <= len(GLYPH_CHARS):
        raise ValueError(f"glyph_set_size must be in [1, {len(GLYPH_CHARS)}]")
    rng = np.random.default_rng(seed)

    def fits(s):
        pitch = 9 * s
        per_line = size // pitch
        return per_line >= 1 and math.ceil(n_glyphs / per_line) * pitch <= size

    top = max_scale or max(1, size // 36)
    scales = [s for s in range(1, top + 1) if fits(s)]
    if not scales:
        raise LayoutError(f"{n_glyphs} glyphs do not fit a {size}x{size} canvas")
    s = int(rng.choice(scales))
    pitch = 9 * s
    per_line = min(n_glyphs, size // pitch)
    lines = math.ceil(n_glyphs / per_line)
    block_w, block_h = per_line * pitch - s, lines * pitch - s
    ox, oy = (_offset(rng, size - extent, jitter) for extent in (block_w, block_h))
    ids = rng.integers(0, glyph_set_size, n_glyphs)
    ink = int(rng.integers(0, 90))
    px = np.full((size, size, 3), background, dtype=np.uint8)
    for k, g in enumerate(ids):
        r, c = divmod(k, per_line)
        y, x = oy + r * pitch, ox + c * pitch
        bmp = np.kron(GLYPHS[g], np.ones((s, s), dtype=bool))
        px[y:y + 8 * s, x:x + 8 * s][bmp] = ink
    return GlyphSample(Image(px), [int(i) for i in ids], seed)


def _offset(rng: np.random.Generator, free: int, jitter: int | None) -> int:
    if jitter is None:
        return int(rng.integers(0, free + 1))
    span = min(jitter, free)
    return (free - span) // 2 + int(rng.integers(0, span + 1))


def sample_seed(root_seed: int, index: int, split: str = "train") -> int:
    """Per-sample seed; train and held-out seeds occupy disjoint ranges."""
    base = HELDOUT_BASE if split == "heldout" else 0
    return base + (root_seed % (1 << 16)) * (1 << 24) + index


@dataclass
class GlyphTask:
    size: int = 56
    min_glyphs: int = 1
    max_glyphs: int = 3
    glyph_set_size: int = 16
    max_scale: int | None = 2
    jitter: int | None = 2

    def sample(self, seed: int) -> GlyphSample:
        n = self.min_glyphs + seed % (self.max_glyphs - self.min_glyphs + 1)
        return gen_glyph_sample(seed, n, self.glyph_set_size, self.size, self.max_scale, jitter=self.jitter)


def corrupt_caption(ids: list[int], rng: np.random.Generator, glyph_set_size: int) -> list[int]:
    """A rejected response for preference pairs: one glyph swapped for a different one."""
    out = list(ids)
    k = int(rng.integers(0, len(out)))
    out[k] = (out[k] + 1 + int(rng.integers(0, glyph_set_size - 1))) % glyph_set_size
    return out


def glyph_batches(seed: int, batch_size: int, task: GlyphTask, vocab: Vocab, split: str = "train",
                  with_rejected: bool = False, start: int = 0) -> Iterator[Batch]:
    """Endless image-caption micro-batches; sample ``i`` uses :func:`sample_seed`."""
    i = start
    rng = stream(seed, f"pref.{split}")
    while True:
        samples = [task.sample(sample_seed(seed, i + j, split)) for j in range(batch_size)]
        i += batch_size
        responses = [s.caption_ids + [vocab.eos] for s in samples]
        rejected = None
        if with_rejected:
            rejected = [corrupt_caption(s.caption_ids, rng, vocab.glyph_set_size) + [vocab.eos] for s in samples]
        yield Batch(prompts=[[] for _ in samples], responses=responses,
                    images=[s.image for s in samples], rejected=rejected)


# ---------------------------------------------------------------- metrics


def exact_match(predicted_ids: Sequence[int], target_ids: Sequence[int]) -> int:
    return int(list(predicted_ids) == list(target_ids))


def corpus_accuracy(pairs) -> float:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no pairs to score")
    return sum(exact_match(p, t) for p, t in pairs) / len(pairs)


def perplexity(model, tokens: np.ndarray, window: int = 64, batch_size: int = 16) -> float:
    """``exp`` of the mean next-token NLL over non-overlapping windows of ``tokens``.

    ``model`` is either a callable mapping ``int[B, T]`` to logits
    ``[B, T, V]`` or an object with a ``text_logits`` method.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size < 2:
        raise ValueError("stream too short for perplexity")
    fn: Callable = getattr(model, "text_logits", model)
    window = min(window, tokens.size)
    n_win = tokens.size // window
    wins = tokens[:n_win * window].reshape(n_win, window)
    nll, count = 0.0, 0
    for i in range(0, n_win, batch_size):
        ids = wins[i:i + batch_size]
        logits = np.asarray(fn(ids), dtype=np.float64)[:, :-1]
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        tgt = ids[:, 1:]
        nll -= float(np.take_along_axis(logp, tgt[..., None], axis=-1).sum())
        count += tgt.size
    return math.exp(nll / count)


def dump_dataset(outdir: str | os.PathLike, root_seed: int, n: int, task: GlyphTask,
                 split: str = "train") -> str:
    """Write ``n`` PPM images plus ``manifest.tsv`` (``<filename>\\t<caption>``)."""
    os.makedirs(outdir, exist_ok=True)
    vocab = Vocab(task.glyph_set_size)
    lines = []
    for i in range(n):
        s = task.sample(sample_seed(root_seed, i, split))
        name = f"{split}_{i:06d}.ppm"
        save_ppm(s.image, os.path.join(outdir, name))
        lines.append(f"{name}\t{vocab.decode(s.caption_ids)}\n")
    manifest = os.path.join(outdir, "manifest.tsv")
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.writelines(lines)
    return manifest
