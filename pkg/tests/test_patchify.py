import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynrsl.errors import ConfigError, ContractError, EmptyRegionError, FormatError
from dynrsl.geometry import BBox, RegionPlan, enumerate_combinations
from dynrsl.patchify import (
    ImageBuffer,
    PatchConfig,
    build_dynrsl_input,
    crop,
    decode_ppm,
    downsample,
    patchify,
    read_ppm,
    resize_bilinear,
    round_half_away,
    unpatchify,
    write_ppm,
)


def random_image(w, h, seed=0):
    return ImageBuffer(np.random.default_rng(seed).uniform(0, 1, size=(h, w, 3)))


# ---- downsample


@pytest.mark.parametrize("size", [(1, 1), (7, 5), (16, 16), (30, 19)])
def test_downsample_constant_stays_constant(size):
    out = downsample(ImageBuffer.constant(32, 24, 0.5), *size)
    assert np.all(out.data == 0.5)


def test_downsample_two_rows_average():
    img = ImageBuffer(np.array([[0.0, 0.0], [1.0, 1.0]])[:, :, None].repeat(3, axis=2))
    out = downsample(img, 1, 1)
    assert out.data.shape == (1, 1, 3)
    assert np.all(out.data == 0.5)


def test_downsample_preserves_mean():
    img = random_image(64, 64, seed=4)
    for side in (32, 16, 8, 1):
        assert abs(downsample(img, side, side).data.mean() - img.data.mean()) <= 1e-12


def test_downsample_non_divisible_preserves_mean_approximately():
    img = random_image(50, 30, seed=2)
    assert abs(downsample(img, 7, 11).data.mean() - img.data.mean()) < 1e-12


def test_downsample_rejects_upscale():
    with pytest.raises(ContractError):
        downsample(random_image(8, 8), 16, 8)


# ---- bilinear


def test_resize_identity_bit_equal():
    img = random_image(13, 9, seed=1)
    assert np.array_equal(resize_bilinear(img, 13, 9).data, img.data)


def test_resize_constant():
    out = resize_bilinear(ImageBuffer.constant(5, 3, (0.25, 0.5, 0.75)), 17, 8)
    assert np.allclose(out.data, [0.25, 0.5, 0.75], atol=1e-15)


def test_resize_corner_aligned_row():
    img = ImageBuffer(np.array([[[0.0] * 3, [1.0] * 3]]))
    out = resize_bilinear(img, 4, 1)
    assert np.allclose(out.data[0, :, 0], [0, 1 / 3, 2 / 3, 1], atol=1e-15)


# ---- crop


def test_round_half_away_from_zero():
    assert [round_half_away(v) for v in (0.5, 1.5, 2.49, -0.5, -1.5)] == [1, 2, 2, -1, -2]


def test_crop_full_image():
    img = random_image(10, 6)
    assert np.array_equal(crop(img, img.full_box()).data, img.data)


def test_crop_single_pixel():
    img = random_image(10, 6)
    out = crop(img, BBox(3, 4, 4, 5))
    assert np.array_equal(out.data[0, 0], img.data[4, 3])


def test_crop_idempotent():
    img = random_image(20, 20)
    first = crop(img, BBox(2.4, 3.5, 11.6, 17.2))
    assert first.data.shape == (13, 10, 3)
    assert np.array_equal(crop(first, first.full_box()).data, first.data)


def test_crop_zero_area():
    with pytest.raises(EmptyRegionError):
        crop(random_image(10, 10), BBox(2.2, 2, 2.4, 5))


# ---- patchify


def test_patchify_224_gives_196():
    s = patchify(ImageBuffer.constant(224, 224, 0.1), 16)
    assert (s.grid_w, s.grid_h, s.n_tokens) == (14, 14, 196)
    assert s.tokens.shape == (196, 768)


def test_patchify_single_patch_is_flattened_image():
    img = random_image(16, 16)
    s = patchify(img, 16)
    assert np.array_equal(s.tokens.data[0], img.data.reshape(-1))


def test_patchify_token_order_row_major():
    img = random_image(8, 4, seed=5)
    s = patchify(img, 4)
    assert np.array_equal(s.tokens.data[1], img.data[0:4, 4:8].reshape(-1))


@settings(max_examples=30)
@given(st.integers(1, 5), st.integers(1, 5), st.sampled_from([1, 2, 4]), st.integers(0, 999))
def test_patchify_roundtrip(gw, gh, p, seed):
    img = random_image(gw * p, gh * p, seed)
    assert np.array_equal(unpatchify(patchify(img, p)).data, img.data)


def test_patchify_rejects_non_divisible():
    with pytest.raises(ContractError):
        patchify(random_image(20, 16), 16)


# ---- dynrsl input


def plan_with(n_rois, w=400, h=300):
    rois = [BBox(20 + 60 * i, 20 + 30 * i, 60 + 60 * i, 90 + 30 * i) for i in range(n_rois)]
    return RegionPlan(rois, [], {})


def test_no_regions_gives_196_tokens():
    inp = build_dynrsl_input(random_image(400, 300), plan_with(0))
    assert inp.total_tokens == 196
    assert inp.region_streams == []


def test_two_regions_add_36_each():
    inp = build_dynrsl_input(random_image(400, 300), plan_with(2))
    assert inp.total_tokens == 196 + 2 * 36 == 268
    assert [s.stream_kind for s in inp.region_streams] == ["roi", "roi"]
    assert all(s.n_tokens == 36 for s in inp.region_streams)


def test_budget_binds():
    inp = build_dynrsl_input(random_image(400, 300), plan_with(2), PatchConfig(token_budget=200))
    assert inp.total_tokens == 196
    assert inp.dropped_regions == 2


def test_budget_below_global_rejected():
    with pytest.raises(ConfigError):
        PatchConfig(token_budget=100)


def test_rois_before_combined_in_plan_order():
    rois = [BBox(0, 0, 50, 50), BBox(100, 100, 150, 160), BBox(200, 10, 260, 90)]
    plan = enumerate_combinations(rois)
    inp = build_dynrsl_input(random_image(300, 300), plan, PatchConfig(token_budget=196 + 36 * 5))
    assert [s.stream_kind for s in inp.region_streams] == ["roi"] * 3 + ["combined"] * 2
    assert [s.source_box for s in inp.region_streams] == rois + plan.combined_boxes[:2]


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 10**6))
def test_budget_never_exceeded(seed):
    rng = np.random.default_rng(seed)
    side = 32
    cfg = PatchConfig(global_side=32, region_side=16, patch_px=8, token_budget=int(rng.integers(16, 80)))
    rois = []
    for _ in range(rng.integers(0, 6)):
        x, y = rng.uniform(0, side - 3, size=2)
        rois.append(BBox(x, y, min(side, x + rng.uniform(2, 20)), min(side, y + rng.uniform(2, 20))))
    plan = enumerate_combinations(rois, 3, int(rng.integers(0, 10)))
    inp = build_dynrsl_input(ImageBuffer.constant(side, side, 0.3), plan, cfg)
    assert inp.total_tokens <= cfg.token_budget
    assert inp.total_tokens == sum(s.n_tokens for s in inp.streams)


def test_regions_come_from_original_resolution():
    # a one-pixel checker is averaged away by downsampling but survives a crop
    img = np.full((64, 64, 3), 0.5)
    yy, xx = np.mgrid[0:8, 0:8]
    img[8:16, 8:16] = ((yy + xx) % 2)[:, :, None].astype(float)
    image = ImageBuffer(img)
    cfg = PatchConfig(global_side=32, region_side=8, patch_px=8, token_budget=64)
    inp = build_dynrsl_input(image, RegionPlan([BBox(8, 8, 16, 16)], [], {}), cfg)
    assert np.all(inp.global_stream.tokens.data == 0.5)
    region = inp.region_streams[0].tokens.data
    assert set(np.unique(region)) == {0.0, 1.0}


# ---- PPM


def test_ppm_roundtrip(tmp_path):
    data = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3)) / 255.0
    img = ImageBuffer(data)
    path = tmp_path / "a.ppm"
    write_ppm(img, path)
    back = read_ppm(path)
    assert np.array_equal(back.data, img.data)
    raw = path.read_bytes()
    assert raw.startswith(b"P6\n7 5\n255\n")


def test_ppm_header_comments():
    body = bytes(range(12))
    img = decode_ppm(b"P6 # comment\n2 2\n255\n" + body)
    assert img.data[0, 0].tolist() == [0, 1 / 255, 2 / 255]


@pytest.mark.parametrize("raw", [b"P5\n1 1\n255\n\x00", b"P6\n2 2\n255\n\x00\x01", b"P6\n2 2\n65535\n" + bytes(24)])
def test_ppm_rejects_bad_input(raw):
    with pytest.raises(FormatError):
        decode_ppm(raw)
