"""Dynamic patch planning, resizing, patchification, patch embedding and PPM I/O."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import ALLOWED_PATCH_SIZES
from .primitives import PosBiasTable, abs_pos_bias, bilinear_matrix
from .tensor import Tensor


class OversizeImageError(ValueError):
    pass


class PPMError(ValueError):
    pass


@dataclass
class Image:
    """8-bit RGB image, ``pixels`` is ``uint8[height, width, 3]``."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected [H, W, 3] pixels, got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image extents must be >= 1")
        self.pixels = np.ascontiguousarray(px, dtype=np.uint8)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 3

    def __eq__(self, other):
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True)
class PatchPlan:
    patch_size: int
    resized_h: int
    resized_w: int
    grid_h: int
    grid_w: int

    @property
    def token_count(self) -> int:
        return self.grid_h * self.grid_w

    def positions(self) -> tuple[np.ndarray, np.ndarray]:
        """Row and column index of every patch in raster order."""
        rows, cols = np.divmod(np.arange(self.token_count), self.grid_w)
        return rows, cols


def plan_patches(height: int, width: int, patch_budget: int = 1024,
                 allowed: tuple[int, ...] = ALLOWED_PATCH_SIZES) -> PatchPlan:
    """Pick the smallest allowed patch whose square grid over the longer side fits the budget."""
    if height < 1 or width < 1:
        raise ValueError(f"image extents must be positive, got {height}x{width}")
    side = max(height, width)
    for p in sorted(allowed):
        if math.ceil(side / p) ** 2 <= patch_budget:
            gh, gw = math.ceil(height / p), math.ceil(width / p)
            return PatchPlan(p, gh * p, gw * p, gh, gw)
    raise OversizeImageError(f"{height}x{width} image needs more than {patch_budget} patches at every size")


def resize_image(img: Image, resized_h: int, resized_w: int) -> Image:
    """Bilinear resample (aligned corners); same-size input is returned as is."""
    if resized_h < 1 or resized_w < 1:
        raise ValueError("target extents must be >= 1")
    if (resized_h, resized_w) == (img.height, img.width):
        return img
    mh = bilinear_matrix(img.height, resized_h)
    mw = bilinear_matrix(img.width, resized_w)
    px = img.pixels.astype(np.float64)
    out = np.einsum("ih,hwc,jw->ijc", mh, px, mw)
    return Image(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def patchify(img: Image, plan: PatchPlan) -> np.ndarray:
    """Raster-ordered, channel-last flattened patches ``uint8[token_count, p*p*3]``."""
    if (img.height, img.width) != (plan.resized_h, plan.resized_w):
        raise ValueError(f"image is {img.height}x{img.width}, plan expects {plan.resized_h}x{plan.resized_w}")
    p = plan.patch_size
    x = img.pixels.reshape(plan.grid_h, p, plan.grid_w, p, 3).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(plan.token_count, p * p * 3))


def reassemble(patches: np.ndarray, plan: PatchPlan) -> Image:
    """Inverse of :func:`patchify`."""
    p = plan.patch_size
    x = np.asarray(patches).reshape(plan.grid_h, plan.grid_w, p, p, 3).transpose(0, 2, 1, 3, 4)
    return Image(x.reshape(plan.resized_h, plan.resized_w, 3))


def prepare(img: Image, patch_budget: int = 1024,
            allowed: tuple[int, ...] = ALLOWED_PATCH_SIZES) -> tuple[np.ndarray, PatchPlan]:
    """Plan, resize and patchify in one go."""
    plan = plan_patches(img.height, img.width, patch_budget, allowed)
    return patchify(resize_image(img, plan.resized_h, plan.resized_w), plan), plan


def embed_patches(patches, w_embed: dict[str, Tensor], plan: PatchPlan,
                  bias_table: PosBiasTable) -> Tensor:
    """Linear patch projection plus the (interpolated) absolute positional bias.

    ``patches`` is ``[N, p*p*3]`` or ``[B, N, p*p*3]`` with 8-bit values,
    scaled to [0, 1] here. Grid indices for the attention rotation come from
    ``plan.positions()``.
    """
    key = str(plan.patch_size)
    if key not in w_embed:
        raise KeyError(f"no embedding matrix for patch size {plan.patch_size}")
    w = w_embed[key]
    x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches) / 255.0, dtype=w.dtype)
    return T.add(T.matmul(x, w), abs_pos_bias(plan.grid_h, plan.grid_w, bias_table))


# ---------------------------------------------------------------- PPM


def save_ppm(img: Image, path) -> None:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + img.pixels.tobytes())


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PPMError(f"unexpected end of header at byte {pos}")
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> Image:
    magic = buf[:2]
    if magic == b"P3":
        raise PPMError("unsupported format: ASCII PPM (P3); only binary P6 is accepted")
    if magic != b"P6":
        raise PPMError(f"bad magic {magic!r} at byte 0; expected b'P6'")
    pos = 2
    fields = []
    for what in ("width", "height", "maxval"):
        tok, pos = _read_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise PPMError(f"malformed {what} {tok!r} ending at byte {pos}") from None
    w, h, maxval = fields
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval} ending at byte {pos}; only 255")
    if w < 1 or h < 1:
        raise PPMError(f"non-positive extents {w}x{h}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PPMError(f"missing whitespace after header at byte {pos}")
    pos += 1
    need = w * h * 3
    if len(buf) - pos < need:
        raise PPMError(f"truncated payload: {len(buf) - pos} of {need} bytes present after byte {pos}")
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)
    return Image(px.copy())


def load_ppm(path: str | os.PathLike) -> Image:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())
