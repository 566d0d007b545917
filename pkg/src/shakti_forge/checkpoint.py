"""Binary checkpoint format.

Layout, all integers little-endian::

    0   b"SKVL"                 magic
    4   u32                     format version
    8   u64                     payload length
    16  32 bytes                SHA-256 of the payload
    48  payload:
          32 bytes              SHA-256 of the canonical model-config JSON
          u32 stage, u64 step, u64 seed
          u32 + bytes           metadata JSON (model config, rope context, optimizer scalars)
          u32                   blob count
          per blob: u32 + name bytes, u32 ndim, u32 * ndim dims, float32 data
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .blocks import ModelConfig
from .fusion import VLM
from .training import OptimizerState

MAGIC = b"SKVL"
VERSION = 1
_HEADER = struct.Struct("<4sIQ32s")


class CheckpointError(Exception):
    """Base class for unreadable or mismatched checkpoints."""


class DigestError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class VersionSkewError(CheckpointError):
    pass


@dataclass
class CheckpointState:
    config: ModelConfig
    stage: int
    step: int
    seed: int
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = VERSION
    digest: str = ""

    def optimizer_state(self) -> OptimizerState | None:
        o = self.meta.get("optimizer")
        if not o:
            return None
        return OptimizerState(dict(self.opt_m), dict(self.opt_v), o["step"], o["beta1"], o["beta2"],
                              o["eps"], o["weight_decay"])

    def build_model(self) -> VLM:
        model = VLM(self.config, seed=0)
        restore(model, self)
        return model


def _config_json(cfg: ModelConfig) -> dict:
    return cfg.to_dict()


def _blob(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    a = np.ascontiguousarray(arr, dtype="<f4")
    return b"".join([struct.pack("<I", len(nb)), nb, struct.pack("<I", a.ndim),
                     struct.pack(f"<{a.ndim}I", *a.shape), a.tobytes()])


def save_checkpoint(path, model: VLM, stage: int, step: int, seed: int,
                    opt_state: OptimizerState | None = None, extra: dict | None = None) -> None:
    cfg = model.config
    meta = {"config": _config_json(cfg), "rope_target_len": model.decoder.rope.target_len, **(extra or {})}
    blobs = [_blob(n, p.data) for n, p in model.named_parameters().items()]
    if opt_state is not None:
        meta["optimizer"] = dict(step=opt_state.step, beta1=opt_state.beta1, beta2=opt_state.beta2,
                                 eps=opt_state.eps, weight_decay=opt_state.weight_decay)
        blobs += [_blob("opt.m." + n, a) for n, a in opt_state.m.items()]
        blobs += [_blob("opt.v." + n, a) for n, a in opt_state.v.items()]
    mj = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = b"".join([cfg.digest(), struct.pack("<IQQ", stage, step, seed),
                        struct.pack("<I", len(mj)), mj, struct.pack("<I", len(blobs)), *blobs])
    header = _HEADER.pack(MAGIC, VERSION, len(payload), hashlib.sha256(payload).digest())
    with open(path, "wb") as fh:
        fh.write(header + payload)


class _Reader:
    def __init__(self, buf: bytes, base: int):
        self.buf, self.pos, self.base = buf, 0, base

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"malformed payload at byte {self.base + self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def read_checkpoint(path, expected: ModelConfig | None = None) -> CheckpointState:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        raise TruncatedCheckpointError(f"file has {len(buf)} bytes, header needs {_HEADER.size}")
    magic, version, plen, digest = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionSkewError(f"checkpoint format version {version}, this build reads {VERSION}")
    payload = buf[_HEADER.size:]
    if len(payload) < plen:
        raise TruncatedCheckpointError(f"payload has {len(payload)} of {plen} bytes")
    payload = payload[:plen]
    if hashlib.sha256(payload).digest() != digest:
        raise DigestError("payload digest mismatch; file is corrupt")
    r = _Reader(payload, _HEADER.size)
    cfg_digest = r.take(32)
    stage, step, seed = r.unpack("<IQQ")
    (mlen,) = r.unpack("<I")
    meta = json.loads(r.take(mlen).decode("utf-8"))
    cfg = ModelConfig.from_dict(meta["config"])
    if cfg.digest() != cfg_digest:
        raise DigestError("config digest does not match stored config")
    if expected is not None and expected.digest() != cfg_digest:
        raise DigestError("checkpoint was written for a different model config")
    (n,) = r.unpack("<I")
    params, m, v = {}, {}, {}
    for _ in range(n):
        (nl,) = r.unpack("<I")
        name = r.take(nl).decode("utf-8")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        if name.startswith("opt.m."):
            m[name[6:]] = arr
        elif name.startswith("opt.v."):
            v[name[6:]] = arr
        else:
            params[name] = arr
    return CheckpointState(cfg, stage, step, seed, params, m, v, meta, version, digest.hex())


load_checkpoint = read_checkpoint


def restore(model: VLM, state: CheckpointState) -> None:
    """Copy checkpoint parameters into ``model`` and restore the decoder's RoPE context."""
    if model.config.digest() != state.config.digest():
        raise DigestError("model config differs from checkpoint config")
    named = model.named_parameters()
    missing = set(named) - set(state.params)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, p in named.items():
        src = state.params[name]
        if src.shape != p.shape:
            raise CheckpointError(f"{name}: shape {src.shape} vs model {p.shape}")
        p.data = np.array(src, dtype=p.data.dtype)
        p.grad = None
    target = state.meta.get("rope_target_len")
    if target:
        model.decoder.extend_context(int(target))
