import struct

import numpy as np
import pytest

from shakti_forge.blocks import preset
from shakti_forge.checkpoint import (
    MAGIC,
    CheckpointError,
    DigestError,
    TruncatedCheckpointError,
    VersionSkewError,
    read_checkpoint,
    restore,
    save_checkpoint,
)
from shakti_forge.data import GlyphTask, Vocab, glyph_batches, text_batches
from shakti_forge.fusion import VLM
from shakti_forge.training import run_stage, stage_defaults
from shakti_forge.vision import Image


def img():
    return Image(np.random.default_rng(0).integers(0, 256, (14, 14, 3), dtype=np.uint8))


def logits(model):
    from shakti_forge.fusion import vlm_forward
    return vlm_forward(img(), [1], [2, 3], model)[0].data


@pytest.fixture
def trained(tmp_path):
    m = VLM(preset("micro"), seed=0)
    cfg = stage_defaults("toy", 1, total_steps=3, grad_accum=1, batch_size=2, max_seq_len=48)
    res = run_stage(m, cfg, text_batches(0, 2, 16, 16))
    path = tmp_path / "ck.skvl"
    save_checkpoint(path, m, stage=1, step=3, seed=0, opt_state=res.opt_state)
    return m, res, path


def test_roundtrip_bit_identical_logits(trained):
    m, res, path = trained
    state = read_checkpoint(path, expected=m.config)
    assert (state.stage, state.step, state.seed) == (1, 3, 0)
    fresh = state.build_model()
    np.testing.assert_array_equal(logits(fresh), logits(m))
    assert fresh.decoder.rope.max_len == 48


def test_roundtrip_optimizer_state(trained):
    m, res, path = trained
    opt = read_checkpoint(path).optimizer_state()
    assert opt.step == res.opt_state.step == 3
    assert (opt.beta1, opt.beta2, opt.eps) == (0.9, 0.95, 1e-8)
    for k, v in res.opt_state.m.items():
        np.testing.assert_array_equal(opt.m[k], v)
        np.testing.assert_array_equal(opt.v[k], res.opt_state.v[k])


def test_header_layout(trained):
    _, _, path = trained
    raw = path.read_bytes()
    magic, version, plen = struct.unpack_from("<4sIQ", raw)
    assert magic == MAGIC == b"SKVL" and version == 1
    assert plen == len(raw) - 48


def test_corrupt_payload_byte(trained):
    _, _, path = trained
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(DigestError):
        read_checkpoint(path)


def test_truncation(trained):
    _, _, path = trained
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(TruncatedCheckpointError):
        read_checkpoint(path)
    path.write_bytes(raw[:20])
    with pytest.raises(TruncatedCheckpointError):
        read_checkpoint(path)


def test_version_skew(trained):
    _, _, path = trained
    raw = bytearray(path.read_bytes())
    struct.pack_into("<I", raw, 4, 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionSkewError):
        read_checkpoint(path)


def test_error_kinds_are_distinct():
    kinds = {DigestError, TruncatedCheckpointError, VersionSkewError}
    assert len(kinds) == 3 and all(issubclass(k, CheckpointError) for k in kinds)


def test_bad_magic(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"NOPE" + bytes(60))
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(p)


def test_config_mismatch(trained):
    _, _, path = trained
    with pytest.raises(DigestError):
        read_checkpoint(path, expected=preset("micro", rope_theta=1.0))
    other = VLM(preset("toy"), seed=0)
    with pytest.raises(DigestError):
        restore(other, read_checkpoint(path))


def test_stage_handoff_preserves_decoder(trained, tmp_path):
    m, _, path = trained
    model = read_checkpoint(path).build_model()
    dec_before = {n: p.data.copy() for n, p in model.named_parameters().items() if n.startswith("decoder.")}
    task = GlyphTask(size=28, max_glyphs=2, max_scale=1)
    cfg = stage_defaults("toy", 2, total_steps=3, batch_size=2, max_seq_len=48)
    run_stage(model, cfg, glyph_batches(0, 2, task, Vocab()))
    for n, p in model.named_parameters().items():
        if n.startswith("decoder."):
            np.testing.assert_array_equal(p.data, dec_before[n])
            np.testing.assert_array_equal(p.data, m.named_parameters()[n].data)
