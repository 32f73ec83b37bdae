import json

import numpy as np
import pytest

from hsiplastic.cube_io import CalibrationState, RGBImage, SpectralCube
from hsiplastic.register import (
    Correspondence,
    DegenerateConfigurationError,
    Homography,
    RegistrationError,
    estimate_homography,
    load_correspondences,
    load_homography,
    register_cube_to_rgb,
    save_correspondences,
    save_homography,
    warp_array,
    warp_to,
)


def random_homography(rng, perspective=1e-4):
    m = np.eye(3)
    m[:2, :2] += rng.normal(0, 0.2, (2, 2))
    m[:2, 2] = rng.uniform(-20, 20, 2)
    m[2, :2] = rng.normal(0, perspective, 2)
    return Homography(m)


def apply(m, pts):
    """Plain projective mapping used as the test oracle."""
    hom = np.c_[pts, np.ones(len(pts))] @ np.asarray(m).T
    return hom[:, :2] / hom[:, 2:]


def ramp(h, w, bands=2):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([0.2 + 0.01 * xx + 0.005 * yy, 0.9 - 0.004 * xx + 0.003 * yy][:bands])


def test_homography_normalization():
    h = Homography(2 * np.eye(3))
    assert np.array_equal(h.m, np.eye(3))
    m = np.array([[0.0, 1, 0], [1, 0, 1], [1, 0, 0.0]])
    h = Homography(m)
    assert abs(np.linalg.norm(h.m) - 1.0) < 1e-12
    with pytest.raises(RegistrationError):
        Homography(np.zeros((3, 3)) + np.diag([1.0, 0.0, 1.0]))


def test_identity_from_four_points():
    src = np.array([[0.0, 0], [10, 0], [10, 10], [0, 10]])
    h, rms = estimate_homography((src, src.copy()))
    np.testing.assert_allclose(h.m, np.eye(3), atol=1e-12)
    assert rms < 1e-9


def test_translation_recovered():
    src = np.array([[0.0, 0], [10, 0], [10, 10], [0, 10], [3, 7]])
    points = [Correspondence(tuple(s), (s[0] + 3, s[1] - 2)) for s in src]
    h, rms = estimate_homography(points)
    np.testing.assert_allclose(h.m, Homography.translation(3, -2).m, atol=1e-9)
    assert rms < 1e-9


def test_random_homography_from_eight_points(rng):
    for _ in range(10):
        truth = random_homography(rng)
        src = rng.uniform(0, 500, (8, 2))
        dst = apply(truth.m, src)
        h, rms = estimate_homography((src, dst))
        np.testing.assert_allclose(h.m, truth.m, rtol=1e-7, atol=1e-9)
        assert np.abs(apply(h.m, src) - dst).max() < 1e-6
        assert rms < 1e-6


def test_too_few_points():
    with pytest.raises(RegistrationError, match="at least 4"):
        estimate_homography((np.zeros((3, 2)), np.zeros((3, 2))))


def test_collinear_rejected():
    src = np.array([[0.0, 0], [1, 1], [2, 2], [3, 3], [4, 4]])
    with pytest.raises(DegenerateConfigurationError):
        estimate_homography((src, src * 2))


def test_coincident_rejected():
    src = np.ones((5, 2))
    with pytest.raises(DegenerateConfigurationError):
        estimate_homography((src, src))


def test_scale_invariance(rng):
    truth = random_homography(rng, perspective=1e-3)
    src = rng.uniform(0, 100, (12, 2))
    dst = apply(truth.m, src) + rng.normal(0, 0.5, (12, 2))  # noisy, so not an exact fit
    h1, _ = estimate_homography((src, dst))
    h10, _ = estimate_homography((src * 10, dst * 10))
    s = np.diag([10.0, 10.0, 1.0])
    back = Homography(np.linalg.inv(s) @ h10.m @ s)
    np.testing.assert_allclose(back.m, h1.m, atol=1e-8)


def test_warp_identity():
    src = ramp(6, 9)
    out, valid = warp_array(src, Homography.identity(), 6, 9)
    assert np.abs(out - src).max() <= 1e-6
    assert valid.all()


def test_warp_integer_translation():
    src = np.random.default_rng(1).random((3, 5, 12))
    out, valid = warp_array(src, Homography.translation(5, 0), 5, 12)
    np.testing.assert_allclose(out[:, :, 5:], src[:, :, :-5], atol=1e-12)
    assert not valid[:, :5].any() and valid[:, 5:].all()
    assert np.all(out[:, :, :5] == 0)


def test_warp_round_trip_on_ramp(rng):
    h = Homography(np.array([[1.02, 0.03, 1.5], [-0.02, 0.98, -2.0], [1e-5, -2e-5, 1.0]]))
    src = ramp(60, 80)
    fwd, v1 = warp_array(src, h, 60, 80)
    back, v2 = warp_array(fwd, h.inverse(), 60, 80)
    interior = np.zeros_like(v2)
    interior[10:-10, 10:-10] = True
    assert (v2 & interior).sum() > 1000
    err = np.abs(back - src)[:, v2 & interior]
    assert err.max() < 1e-4


def test_warp_linearity(rng):
    h = random_homography(rng)
    x = rng.random((2, 20, 30))
    y = rng.random((2, 20, 30))
    a, b = 1.7, -0.4
    wxy, valid = warp_array(a * x + b * y, h, 25, 25)
    wx, _ = warp_array(x, h, 25, 25)
    wy, _ = warp_array(y, h, 25, 25)
    np.testing.assert_allclose(wxy[:, valid], (a * wx + b * wy)[:, valid], atol=1e-12)


def test_warp_composition(rng):
    h1 = Homography(np.array([[1.01, 0.02, 2.0], [0.01, 0.99, 1.0], [1e-5, 0, 1.0]]))
    h2 = Homography(np.array([[0.99, -0.01, -1.0], [0.02, 1.01, 0.5], [0, 1e-5, 1.0]]))
    src = ramp(50, 60)
    w1, _ = warp_array(src, h1, 50, 60)
    w21, v21 = warp_array(w1, h2, 50, 60)
    direct, vd = warp_array(src, h2 @ h1, 50, 60)
    both = v21 & vd
    both[:5] = both[-5:] = False
    both[:, :5] = both[:, -5:] = False
    assert both.sum() > 1000
    assert np.abs(w21 - direct)[:, both].max() < 1e-3


def test_warp_independent_of_workers(rng):
    h = random_homography(rng)
    src = rng.random((3, 40, 50)).astype(np.float32)
    a, va = warp_array(src, h, 47, 53, workers=1)
    b, vb = warp_array(src, h, 47, 53, workers=3)
    assert a.tobytes() == b.tobytes() and np.array_equal(va, vb)


def test_warp_rgb_and_cube_types(rng):
    rgb = RGBImage(rng.random((6, 7, 3)).astype(np.float32))
    out, valid = warp_to(rgb, Homography.identity(), 6, 7)
    assert isinstance(out, RGBImage) and out == rgb and valid.all()
    with pytest.raises(TypeError):
        warp_to(np.zeros((1, 2, 2)), Homography.identity(), 2, 2)


def test_register_identity_unchanged(rng):
    cube = SpectralCube(rng.random((4, 8, 9)).astype(np.float32), [700, 800, 900, 1000],
                        state=CalibrationState.REFLECTANCE)
    rgb = RGBImage(np.zeros((8, 9, 3), np.float32))
    out, valid = register_cube_to_rgb(cube, rgb, Homography.identity())
    assert out == cube and valid.all()


def test_register_full_resolution_by_doubling(rng):
    cube = SpectralCube(rng.random((33, 526, 794)).astype(np.float32), np.linspace(660, 1700, 33),
                        state=CalibrationState.REFLECTANCE)
    rgb = RGBImage(np.zeros((1052, 1588, 3), np.float32))
    out, valid = register_cube_to_rgb(cube, rgb, Homography.scaling(2.0))
    assert out.shape == (1052, 1588, 33)
    assert np.array_equal(out.wavelengths, cube.wavelengths)
    # pixel (2r, 2c) lands exactly on input (r, c)
    assert np.array_equal(out.data[:, ::2, ::2][:, :526, :794], cube.data)
    assert valid[:-1, :-1].all()


def test_register_outside_frame_invalid(rng):
    cube = SpectralCube(rng.random((2, 10, 10)).astype(np.float32), [700, 800], state="reflectance")
    rgb = RGBImage(np.zeros((10, 10, 3), np.float32))
    out, valid = register_cube_to_rgb(cube, rgb, Homography.translation(500, 0))
    assert not valid.any() and np.all(out.data == 0)


def test_json_files(tmp_path, rng):
    pts = [Correspondence((1.0, 2.0), (3.0, 4.5)), Correspondence((0.0, 0.0), (1.0, -1.0))]
    save_correspondences(pts, tmp_path / "c.json")
    assert load_correspondences(tmp_path / "c.json") == pts
    assert json.loads((tmp_path / "c.json").read_text())[0] == {"src": [1.0, 2.0], "dst": [3.0, 4.5]}
    h = random_homography(rng)
    save_homography(h, tmp_path / "h.json")
    assert np.array_equal(load_homography(tmp_path / "h.json").m, h.m)
    assert np.array(json.loads((tmp_path / "h.json").read_text())).shape == (3, 3)
