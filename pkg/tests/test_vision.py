import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shakti_forge import tensor as T
from shakti_forge.primitives import PosBiasTable
from shakti_forge.tensor import Tensor
from shakti_forge.vision import (
    Image,
    OversizeImageError,
    PatchPlan,
    PPMError,
    decode_ppm,
    embed_patches,
    load_ppm,
    patchify,
    plan_patches,
    prepare,
    reassemble,
    resize_image,
    save_ppm,
)

import oracles


def random_image(rng, h, w):
    return Image(rng.integers(0, 256, (h, w, 3), dtype=np.uint8))


# ---------------------------------------------------------------- planning


@pytest.mark.parametrize("side,patch,grid", [(224, 14, 16), (1024, 32, 32), (512, 16, 32)])
def test_plan_endpoints(side, patch, grid):
    plan = plan_patches(side, side)
    assert (plan.patch_size, plan.grid_h, plan.grid_w) == (patch, grid, grid)
    assert plan.token_count == grid * grid


def test_plan_every_side_fits_budget_and_is_monotone():
    last = 0
    for side in range(1, 1025):
        plan = plan_patches(side, side)
        assert plan.token_count <= 1024
        assert plan.resized_h == plan.patch_size * plan.grid_h >= side
        assert plan.patch_size >= last
        last = plan.patch_size


def test_plan_non_square_rounds_each_side():
    plan = plan_patches(100, 300)
    assert plan.patch_size == 14
    assert (plan.grid_h, plan.grid_w) == (8, 22)
    assert (plan.resized_h, plan.resized_w) == (112, 308)


def test_plan_errors():
    with pytest.raises(ValueError):
        plan_patches(0, 10)
    with pytest.raises(OversizeImageError):
        plan_patches(1025, 1025)
    with pytest.raises(OversizeImageError):
        plan_patches(100, 100, patch_budget=4)


def test_plan_positions_raster():
    rows, cols = PatchPlan(14, 28, 42, 2, 3).positions()
    assert rows.tolist() == [0, 0, 0, 1, 1, 1]
    assert cols.tolist() == [0, 1, 2, 0, 1, 2]


# ---------------------------------------------------------------- resize


def test_resize_identity_is_verbatim():
    img = random_image(np.random.default_rng(0), 7, 5)
    assert resize_image(img, 7, 5) is img


def test_resize_constant_color():
    img = Image(np.full((3, 5, 3), (10, 200, 77), dtype=np.uint8))
    out = resize_image(img, 11, 2)
    assert (out.pixels == np.array([10, 200, 77], dtype=np.uint8)).all()


def test_resize_checkerboard_matches_oracle():
    board = np.array([[0, 255], [255, 0]], dtype=np.uint8)
    img = Image(np.repeat(board[:, :, None], 3, axis=2))
    out = resize_image(img, 4, 4).pixels[:, :, 0].astype(int)
    expected = np.rint(np.array(oracles.bilinear_resample(board.tolist(), 4, 4)))
    assert np.abs(out - expected).max() <= 1


def test_resize_bad_target():
    with pytest.raises(ValueError):
        resize_image(random_image(np.random.default_rng(0), 2, 2), 0, 3)


# ---------------------------------------------------------------- patchify


def test_patchify_single_patch_is_flattened_image():
    img = random_image(np.random.default_rng(1), 14, 14)
    plan = plan_patches(14, 14)
    out = patchify(img, plan)
    assert out.shape == (1, 14 * 14 * 3)
    np.testing.assert_array_equal(out[0], img.pixels.reshape(-1))


def test_patchify_raster_order():
    rng = np.random.default_rng(2)
    img = random_image(rng, 28, 42)
    plan = PatchPlan(14, 28, 42, 2, 3)
    out = patchify(img, plan)
    assert out.shape == (6, 588)
    np.testing.assert_array_equal(out[4], img.pixels[14:28, 14:28].reshape(-1))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 120), st.integers(1, 120), st.integers(0, 2 ** 31))
def test_patchify_reassemble_roundtrip(h, w, seed):
    rng = np.random.default_rng(seed)
    patches, plan = prepare(random_image(rng, h, w))
    assert patches.shape == (plan.token_count, plan.patch_size ** 2 * 3)
    img = reassemble(patches, plan)
    np.testing.assert_array_equal(patchify(img, plan), patches)


def test_patchify_size_mismatch():
    with pytest.raises(ValueError):
        patchify(random_image(np.random.default_rng(3), 10, 14), plan_patches(14, 14))


# ---------------------------------------------------------------- embedding


def _embed_setup(rng, d=6):
    w = {"14": Tensor(rng.standard_normal((14 * 14 * 3, d)) * 0.01)}
    table = PosBiasTable(Tensor(rng.standard_normal((2, 2, d))))
    return w, table


def test_embed_zero_image_zero_bias():
    rng = np.random.default_rng(4)
    w, _ = _embed_setup(rng)
    plan = plan_patches(42, 28)
    out = embed_patches(np.zeros((plan.token_count, 588)), w, plan, PosBiasTable(Tensor(np.zeros((2, 2, 6)))))
    assert out.shape == (6, 6)
    np.testing.assert_array_equal(out.data, 0)


def test_embed_scales_pixels_and_adds_bias():
    rng = np.random.default_rng(5)
    w, table = _embed_setup(rng)
    plan = plan_patches(28, 28)
    patches = rng.integers(0, 256, (4, 588))
    out = embed_patches(patches, w, plan, table).data
    expected = patches / 255.0 @ w["14"].data + table.table.data.reshape(4, 6)
    np.testing.assert_allclose(out, expected, atol=1e-5)


def test_embed_missing_patch_size():
    rng = np.random.default_rng(6)
    w, table = _embed_setup(rng)
    plan = plan_patches(1024, 1024)
    with pytest.raises(KeyError):
        embed_patches(np.zeros((plan.token_count, 32 * 32 * 3)), w, plan, table)


def test_embed_gradcheck():
    plan = plan_patches(42, 28)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = rng.random((plan.token_count, 588))
        w = rng.standard_normal((588, 4)) * 0.1
        table = rng.standard_normal((2, 2, 4))

        def op(x, w, t):
            return embed_patches(x, {"14": w}, plan, PosBiasTable(t))

        assert T.gradcheck(op, [x, w, table], seed=seed, max_elements=64) < 1e-4


# ---------------------------------------------------------------- PPM


def test_ppm_roundtrip(tmp_path):
    img = random_image(np.random.default_rng(7), 9, 13)
    save_ppm(img, tmp_path / "a.ppm")
    assert load_ppm(tmp_path / "a.ppm") == img


def test_ppm_minimal_red_pixel(tmp_path):
    raw = b"P6\n1 1\n255\n" + bytes([255, 0, 0])
    assert len(raw) == 11 + 3
    img = decode_ppm(raw)
    assert (img.height, img.width) == (1, 1)
    assert img.pixels[0, 0].tolist() == [255, 0, 0]
    save_ppm(img, tmp_path / "r.ppm")
    assert (tmp_path / "r.ppm").read_bytes() == raw


def test_ppm_comments_in_header():
    img = decode_ppm(b"P6 # made by hand\n2 1\n# maxval next\n255\n" + bytes(range(6)))
    assert img.pixels.reshape(-1).tolist() == list(range(6))


@pytest.mark.parametrize("raw,needle", [
    (b"P3\n1 1\n255\n255 0 0\n", "P3"),
    (b"P5\n1 1\n255\n\x00", "magic"),
    (b"P6\n1 x\n255\n\x00\x00\x00", "height"),
    (b"P6\n1 1\n65535\n\x00\x00\x00", "maxval"),
    (b"P6\n2 2\n255\n\x00\x00\x00", "truncated"),
    (b"P6\n2", "end of header"),
])
def test_ppm_errors_carry_offsets(raw, needle):
    with pytest.raises(PPMError, match=needle) as exc:
        decode_ppm(raw)
    if needle not in ("P3",):
        assert "byte" in str(exc.value)
