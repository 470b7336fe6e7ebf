import json
import warnings

import numpy as np
import pytest
from scipy import ndimage

from mel.core import AffineTransform2D, ImagePlane, Modality, Pyramid, apply_affine, compose_affine, load_transform
from mel.errors import InvalidWindow, LowContrastWarning
from mel.registration import (
    RegistrationConfig,
    corner_error,
    estimate_global_translation,
    preprocess_modality,
    refine_affine,
    register_pair,
)
from mel.synthdata import generate_slide_pair, make_registration_case


def _texture(seed, h, w, sigma=2.0):
    rng = np.random.default_rng(seed)
    f = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma)
    f = (f - f.min()) / (f.max() - f.min())
    return ImagePlane(f[:, :, None].astype(np.float64), 2.0)


def _shift_zero_fill(img: ImagePlane, dx: int, dy: int) -> ImagePlane:
    d = img.data
    out = np.zeros_like(d)
    h, w = d.shape[:2]
    out[max(dy, 0) : h + min(dy, 0), max(dx, 0) : w + min(dx, 0)] = d[max(-dy, 0) : h - max(dy, 0), max(-dx, 0) : w - max(dx, 0)]
    return img.replace(out)


# --------------------------------------------------------------------------- #
# preprocess_modality
# --------------------------------------------------------------------------- #


def test_preprocess_pas_luminance_stretch():
    pas, _ = generate_slide_pair(0, 64, 64)
    out = preprocess_modality(pas)
    assert out.data.shape == (64, 64, 1)
    gray = pas.data @ np.array([0.299, 0.587, 0.114])
    lo, hi = np.percentile(gray, [1, 99])
    expect = np.clip((gray - lo) / (hi - lo), 0, 1)
    np.testing.assert_allclose(out.data[:, :, 0], expect, atol=1e-6)


def test_preprocess_zero_if_is_flat_with_warning():
    img = ImagePlane(np.zeros((16, 16, 3)), 0.5, Modality.IF)
    with pytest.warns(LowContrastWarning):
        out = preprocess_modality(img)
    assert np.all(out.data == 0.5)


def test_preprocess_if_inverts_blob():
    d = np.zeros((32, 32, 3))
    d[20, 9, 1] = 1.0
    d[:, :, 1] = ndimage.gaussian_filter(d[:, :, 1], 2.0)
    d /= d.max()
    img = ImagePlane(d, 0.5, Modality.IF)
    out = preprocess_modality(img).data[:, :, 0]
    peak = np.unravel_index(np.argmax(d.max(axis=2)), out.shape)
    # the percentile stretch clips the brightest pixels to one value, so compare against the minimum
    assert out[peak] == out.min() == 0.0
    assert out[0, 0] == 1.0


# --------------------------------------------------------------------------- #
# estimate_global_translation
# --------------------------------------------------------------------------- #


@pytest.mark.parametrize("metric", ["ncc", "phase_correlation"])
def test_translation_identity(metric):
    img = _texture(1, 96, 80)
    t = estimate_global_translation(img, img, RegistrationConfig(coarse_metric=metric))
    assert t.allclose(AffineTransform2D.identity())


@pytest.mark.parametrize("metric", ["ncc", "phase_correlation"])
def test_translation_integer_shift_exact(metric):
    fixed = _texture(2, 96, 96)
    moving = _shift_zero_fill(fixed, 7, -3)
    t = estimate_global_translation(fixed, moving, RegistrationConfig(coarse_metric=metric))
    np.testing.assert_array_equal(t.m, [[1, 0, -7], [0, 1, 3]])


def test_translation_with_missing_tissue():
    fixed = _texture(3, 128, 128)
    moving = _shift_zero_fill(fixed, 7, -3)
    d = moving.data.copy()
    # blank 20% of the area
    d[10:10 + 51, 30:30 + 64] = 0.0
    t = estimate_global_translation(fixed, moving.replace(d))
    assert abs(t.m[0, 2] + 7) <= 1 and abs(t.m[1, 2] - 3) <= 1
    np.testing.assert_array_equal(t.m[:, :2], np.eye(2))


def test_translation_window_empty():
    img = _texture(4, 32, 32)
    with pytest.raises(InvalidWindow):
        estimate_global_translation(img, img, RegistrationConfig(min_overlap=1.5))


def test_translation_mpp_mismatch():
    a = _texture(5, 32, 32)
    b = ImagePlane(a.data, 0.5)
    with pytest.raises(ValueError):
        estimate_global_translation(a, b)


# --------------------------------------------------------------------------- #
# refine_affine
# --------------------------------------------------------------------------- #


def test_refine_fixed_point():
    img = _texture(6, 96, 96)
    t, loss = refine_affine(img, img, AffineTransform2D.identity())
    np.testing.assert_allclose(t.m, AffineTransform2D.identity().m, atol=1e-3)
    assert loss <= 1e-6


@pytest.mark.parametrize("metric", ["mse", "ncc"])
def test_refine_recovers_known_affine(metric):
    size = 256
    truth = AffineTransform2D.from_params(3.0, 1.02, (4.0, 2.0), ((size - 1) / 2, (size - 1) / 2))
    fixed, moving = make_registration_case(7, size, truth)
    f, m = preprocess_modality(fixed), preprocess_modality(moving)
    init = estimate_global_translation(f, m)
    t, _ = refine_affine(f, m, init, RegistrationConfig(fine_metric=metric))
    assert corner_error(t, truth, (0, 0, size, size)) <= 0.5


def test_refine_single_iteration_is_monotone():
    size = 128
    truth = AffineTransform2D.from_params(2.0, 1.0, (1.5, -1.0), (64, 64))
    fixed, moving = make_registration_case(8, size, truth)
    f, m = preprocess_modality(fixed), preprocess_modality(moving)
    init = AffineTransform2D.identity()
    cfg = RegistrationConfig(max_iters=1, pyramid_levels=1)
    _, init_loss = refine_affine(f, m, init, RegistrationConfig(max_iters=1, pyramid_levels=1, step_size=1e-12))
    _, loss = refine_affine(f, m, init, cfg)
    assert loss <= init_loss


def test_refine_never_worse_than_init():
    rng = np.random.default_rng(0)
    fixed = _texture(9, 64, 64)
    moving = _texture(10, 64, 64)  # unrelated content
    for _ in range(5):
        init = AffineTransform2D.from_params(rng.uniform(-3, 3), 1.0, tuple(rng.uniform(-2, 2, 2)), (32, 32))
        t, loss = refine_affine(fixed, moving, init, RegistrationConfig(max_iters=5))
        _, init_loss = refine_affine(fixed, moving, init, RegistrationConfig(max_iters=1, step_size=1e-12))
        assert loss <= init_loss + 1e-12


def test_max_iters_zero_rejected():
    with pytest.raises(ValueError):
        RegistrationConfig(max_iters=0)


# --------------------------------------------------------------------------- #
# register_pair
# --------------------------------------------------------------------------- #

SMALL = dict(tile_size=128, tile_overlap=32)


def test_register_identical_pyramids():
    pas, _ = generate_slide_pair(11, 256, 256)
    pyr = Pyramid.build(pas, (1, 4))
    res = register_pair(pyr, pyr, RegistrationConfig(**SMALL))
    assert res.global_t.allclose(AffineTransform2D.identity())
    for origin in res.plan.origins:
        np.testing.assert_allclose(res.refined_t[origin].m, AffineTransform2D.identity().m, atol=1e-3)


def test_register_recovers_tiles_and_composition():
    size = 384
    truth = AffineTransform2D.from_params(2.5, 1.01, (-20.0, 12.0), ((size - 1) / 2, (size - 1) / 2))
    fixed, moving = make_registration_case(12, size, truth)
    res = register_pair(Pyramid.build(fixed, (1, 4)), Pyramid.build(moving, (1, 4)), RegistrationConfig(**SMALL))
    errs = [corner_error(res.composed_t[o], truth, res.plan.rect(o)) for o in res.plan.origins]
    assert np.mean(np.array(errs) <= 1.0) >= 0.9
    for o in res.plan.origins:
        expect = compose_affine(res.global_t, res.refined_t[o])
        assert np.max(np.abs(expect.m - res.composed_t[o].m)) <= 1e-9


def test_translation_rescaled_between_levels():
    # content shift of 8 fine px = 2 coarse px
    pas, if_img = generate_slide_pair(13, 256, 256)
    truth = AffineTransform2D.translation(8.0, -12.0)
    moving = apply_affine(if_img, truth, 256, 256)
    res = register_pair(Pyramid.build(pas, (1, 4)), Pyramid.build(moving, (1, 4)), RegistrationConfig(**SMALL))
    np.testing.assert_allclose(res.global_t.m, truth.inverse().m)


def test_register_workers_deterministic(tmp_path):
    size = 256
    truth = AffineTransform2D.from_params(1.0, 1.0, (5.0, 3.0), (128, 128))
    fixed, moving = make_registration_case(14, size, truth)
    pf, pm = Pyramid.build(fixed, (1, 4)), Pyramid.build(moving, (1, 4))
    a = register_pair(pf, pm, RegistrationConfig(**SMALL, workers=1))
    b = register_pair(pf, pm, RegistrationConfig(**SMALL, workers=3))
    for o in a.plan.origins:
        np.testing.assert_array_equal(a.composed_t[o].m, b.composed_t[o].m)
    a.save(tmp_path)
    assert (tmp_path / "global.json").exists()
    rows = (tmp_path / "report.csv").read_text().splitlines()
    assert rows[0] == "row,col,final_loss,status" and len(rows) == 1 + len(a.plan.origins)
    r, c = a.plan.origins[-1]
    assert load_transform(tmp_path / "tiles" / f"{r}_{c}.json").allclose(a.composed_t[(r, c)], atol=0)
    json.loads((tmp_path / "global.json").read_text())


@pytest.mark.slow
def test_register_full_size_nine_tiles():
    # 8192^2 fine level with default tiling gives the 3x3 grid
    rng = np.random.default_rng(0)
    small = ndimage.gaussian_filter(rng.standard_normal((1024, 1024)).astype(np.float32), 2.0)
    small = (small - small.min()) / (small.max() - small.min())
    fine = np.kron(small, np.ones((8, 8), dtype=np.float32))[:, :, None]
    plane = ImagePlane(fine, 0.5)
    pyr = Pyramid([plane, ImagePlane(fine[::4, ::4], 2.0)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = register_pair(pyr, pyr, RegistrationConfig(max_iters=2, pyramid_levels=1, max_samples=1 << 14))
    assert sorted(res.composed_t) == [(r, c) for r in (0, 3072, 4096) for c in (0, 3072, 4096)]


def test_corner_error_zero_for_equal():
    t = AffineTransform2D.from_params(3, 1.01, (2, 1))
    assert corner_error(t, t, (0, 0, 10, 10)) == 0.0
    shifted = compose_affine(t, AffineTransform2D.translation(0.5, 0))
    assert corner_error(shifted, t, (0, 0, 10, 10)) == pytest.approx(0.5 / 1.01, rel=1e-9)
