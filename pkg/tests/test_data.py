import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from latent_sr.data import (
    ImageFolder,
    TrainSample,
    apply_transform,
    augment,
    bicubic_resize,
    collate,
    load_image,
    make_training_pair,
    resize_tensor,
    sample_batch,
    save_image,
)
from latent_sr.errors import EmptyDatasetError, InsufficientSourceError


def keys_weight(x, a=-0.5):
    x = abs(x)
    if x < 1:
        return (a + 2) * x**3 - (a + 3) * x**2 + 1
    if x < 2:
        return a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a
    return 0.0


def reference_bicubic(img, out_h, out_w):
    """Direct per-pixel evaluation of the separable Keys kernel with edge clamping."""
    in_h, in_w, ch = img.shape
    out = np.zeros((out_h, out_w, ch))
    for i in range(out_h):
        sy = (i + 0.5) * in_h / out_h - 0.5
        for j in range(out_w):
            sx = (j + 0.5) * in_w / out_w - 0.5
            acc = np.zeros(ch)
            for yy in range(math.floor(sy) - 1, math.floor(sy) + 3):
                wy = keys_weight(sy - yy)
                for xx in range(math.floor(sx) - 1, math.floor(sx) + 3):
                    wx = keys_weight(sx - xx)
                    acc += wy * wx * img[min(max(yy, 0), in_h - 1), min(max(xx, 0), in_w - 1)]
            out[i, j] = acc
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def test_resize_constant_image():
    img = np.full((13, 7, 3), 0.5, dtype=np.float32)
    out = bicubic_resize(img, (20, 31))
    assert out.shape == (20, 31, 3)
    np.testing.assert_allclose(out, 0.5, atol=1e-6)


def test_resize_identity_is_bit_exact(rng):
    img = rng.random((48, 48, 3)).astype(np.float32)
    out = bicubic_resize(img, (48, 48))
    assert out.dtype == img.dtype
    assert np.array_equal(out, img)


@pytest.mark.parametrize("target", [(5, 5), (13, 11), (3, 17)])
def test_resize_matches_reference_kernel(rng, target):
    img = rng.random((8, 8, 3))
    expected = np.clip(reference_bicubic(img, *target), 0, 1)
    np.testing.assert_allclose(bicubic_resize(img, target), expected, atol=1e-5)


@pytest.mark.parametrize("target", [(0, 4), (4, 0), (-1, 3)])
def test_resize_rejects_nonpositive_target(target):
    with pytest.raises(ValueError):
        bicubic_resize(np.zeros((4, 4, 3)), target)


@settings(max_examples=25, deadline=None)
@given(
    a=st.floats(-3, 3), b=st.floats(-3, 3),
    h=st.integers(1, 20), w=st.integers(1, 20), oh=st.integers(1, 20), ow=st.integers(1, 20),
)
def test_resize_is_linear_before_clipping(a, b, h, w, oh, ow):
    gen = np.random.default_rng(h * 1000 + w)
    x, y = gen.random((h, w, 3)), gen.random((h, w, 3))
    lhs = bicubic_resize(a * x + b * y, (oh, ow), clip=False)
    rhs = a * bicubic_resize(x, (oh, ow), clip=False) + b * bicubic_resize(y, (oh, ow), clip=False)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_tensor_resize_matches_numpy(rng):
    img = rng.random((9, 14, 3))
    t = torch.from_numpy(img.transpose(2, 0, 1))[None]
    out = resize_tensor(t, (21, 6))[0].numpy().transpose(1, 2, 0)
    np.testing.assert_allclose(out, bicubic_resize(img, (21, 6), clip=False), atol=1e-12)


@pytest.mark.parametrize(
    "scale, hr, eff",
    [(4.0, 192, 4.0), (2.6, 120, 2.5), (1.0, 48, 1.0), (8.0, 384, 8.0)],
)
def test_training_pair_rounding(rng, scale, hr, eff):
    src = rng.random((400, 400, 3)).astype(np.float32)
    s = make_training_pair(src, 48, scale, rng)
    assert s.hr.shape == (hr, hr, 3)
    assert s.lr.shape == (48, 48, 3)
    assert s.lr_up.shape == (hr, hr, 3)
    assert s.scale == pytest.approx(eff, abs=0)
    np.testing.assert_array_equal(s.lr_up, bicubic_resize(s.lr, (hr, hr)))


def test_scale_one_is_identity_pair(rng):
    src = rng.random((64, 64, 3)).astype(np.float32)
    s = make_training_pair(src, 48, 1.0, rng)
    assert np.array_equal(s.hr, s.lr)
    assert np.array_equal(s.lr, s.lr_up)


def test_training_pair_insufficient_source(rng):
    with pytest.raises(InsufficientSourceError):
        make_training_pair(np.zeros((100, 100, 3), np.float32), 48, 4.0, rng)


@settings(max_examples=30, deadline=None)
@given(scale=st.floats(1.0, 8.0), lr_patch=st.sampled_from([8, 16, 24, 48]))
def test_pair_shape_round_trip(scale, lr_patch):
    gen = np.random.default_rng(0)
    src = gen.random((8 * lr_patch, 8 * lr_patch, 3)).astype(np.float32)
    s = make_training_pair(src, lr_patch, scale, gen)
    assert s.hr.shape[0] % 8 == 0
    assert s.hr.shape[0] == s.scale * s.lr.shape[0]
    assert s.hr.shape[0] >= lr_patch


def _sample(rng, size=16):
    src = rng.random((64, 64, 3)).astype(np.float32)
    return make_training_pair(src, 8, size / 8, rng)


def _same(a: TrainSample, b: TrainSample):
    return all(np.array_equal(getattr(a, k), getattr(b, k)) for k in ("hr", "lr", "lr_up")) and a.scale == b.scale


def test_augment_identity_draw(rng):
    s = _sample(rng)
    assert _same(apply_transform(s, False, False, 0), s)


def test_hflip_involution(rng):
    s = _sample(rng)
    once = apply_transform(s, True, False, 0)
    assert not _same(once, s)
    assert _same(apply_transform(once, True, False, 0), s)


def test_rot90_four_cycle(rng):
    s = _sample(rng)
    out = s
    for _ in range(4):
        out = apply_transform(out, False, False, 1)
    assert _same(out, s)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_augment_preserves_pixel_multisets(seed):
    gen = np.random.default_rng(seed)
    s = _sample(gen)
    out = augment(s, gen)
    assert out.scale == s.scale
    for k in ("hr", "lr", "lr_up"):
        a, b = getattr(s, k), getattr(out, k)
        for c in range(3):
            np.testing.assert_array_equal(np.sort(a[..., c].ravel()), np.sort(b[..., c].ravel()))


def test_augment_applies_same_transform_to_all_views(rng):
    s = _sample(rng)
    for hflip in (False, True):
        for vflip in (False, True):
            for rot in range(4):
                out = apply_transform(s, hflip, vflip, rot)
                np.testing.assert_allclose(out.lr_up, bicubic_resize(out.lr, out.hr.shape[:2]), atol=1e-6)


def test_sample_batch_shares_scale(rng):
    data = [rng.random((400, 400, 3)).astype(np.float32) for _ in range(3)]
    batch = sample_batch(data, 4, 48, rng, augmentation=True)
    assert len(batch) == 4
    assert len({s.scale for s in batch}) == 1
    assert len({s.hr.shape for s in batch}) == 1
    hr, lr, lr_up, scale = collate(batch)
    assert hr.shape == lr_up.shape and lr.shape == (4, 3, 48, 48)


def test_sample_batch_single(rng):
    data = [rng.random((400, 400, 3)).astype(np.float32)]
    (s,) = sample_batch(data, 1, 48, rng)
    assert s.hr.shape[0] == s.scale * 48 and s.hr.shape[0] % 8 == 0


def test_sample_batch_scale_is_uniform():
    gen = np.random.default_rng(7)
    data = [gen.random((384, 384, 3)).astype(np.float32)]
    scales = [sample_batch(data, 1, 48, gen)[0].scale for _ in range(1000)]
    assert min(scales) >= 1.0 and max(scales) <= 8.0
    assert stats.kstest(scales, stats.uniform(loc=1, scale=7).cdf).pvalue > 0.01


def test_sample_batch_empty_dataset(rng):
    with pytest.raises(EmptyDatasetError):
        sample_batch([], 4, 48, rng)


def test_image_folder_and_png_round_trip(tmp_path, rng):
    img = np.round(rng.random((10, 12, 3)) * 255) / 255
    save_image(img, tmp_path / "a.png")
    save_image(img[::-1], tmp_path / "b.png")
    (tmp_path / "split.txt").write_text("# train split\nb.png\n\n")
    assert len(ImageFolder(tmp_path)) == 2
    ds = ImageFolder(tmp_path, tmp_path / "split.txt")
    assert len(ds) == 1
    np.testing.assert_allclose(ds[0], img[::-1], atol=1e-6)
    np.testing.assert_allclose(load_image(tmp_path / "a.png"), img, atol=1e-6)
