import numpy as np
import pytest

from gl2steer import polynomials as poly
from gl2steer.descriptors import (
    Keypoint,
    calibrate_convention,
    describe,
    harris_detect,
    jet_descriptor,
    jet_steerer_spec,
    keypoint_array,
    moment_descriptor,
    split_blocks,
)
from gl2steer.errors import CoverageError
from gl2steer.geometry import Affine2, random_affine
from gl2steer.raster import RasterImage
from gl2steer.repr_gl2 import element_map, rotation
from gl2steer.scene_synth import Blob, Jet, SceneImage, random_scene, render, scene_jet, warp_scene


def test_jet_descriptor_examples():
    np.testing.assert_array_equal(jet_descriptor(Jet(np.zeros(15))), np.zeros(15))
    d = jet_descriptor(scene_jet(SceneImage([Blob(1.0, (0, 0), np.eye(2))]), np.zeros(2)))
    expected = [1, 0, 0, -0.5, 0, -0.5, 0, 0, 0, 0, 1 / 8, 0, 1 / 24, 0, 1 / 8]
    np.testing.assert_allclose(d, expected, atol=1e-15)


def test_jet_descriptor_scale_weights_degrees():
    c = np.random.default_rng(0).normal(size=15)
    d = jet_descriptor(Jet(c), 2.0)
    for k, block in enumerate(split_blocks(d)):
        np.testing.assert_allclose(block, 2.0**k * c[poly.degree_slice(k)])


def test_split_blocks_round_trip():
    d = np.arange(15.0)
    blocks = split_blocks(d)
    assert [len(b) for b in blocks] == [1, 2, 3, 4, 5]
    np.testing.assert_array_equal(np.concatenate(blocks), d)


# --- steering convention


def test_calibrated_convention_and_spec():
    assert calibrate_convention() == "MinvT"
    spec = jet_steerer_spec()
    assert spec.convention == "MinvT"
    np.testing.assert_array_equal(spec.xis, [0, 0.5, 1, 1.5, 2])


def test_rotation_cannot_disambiguate_conventions():
    R = rotation(0.9)
    np.testing.assert_allclose(element_map("M", R), element_map("MinvT", R), atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_jet_exactly_steerable(seed):
    rng = np.random.default_rng(seed)
    scene = random_scene(seed, 5, (-6, -6, 6, 6), scale_range=(1.0, 3.0))
    x = rng.uniform(-3, 3, 2)
    A = Affine2(random_affine(2.0, True, 2.0, seed), rng.uniform(-2, 2, 2))
    spec = jet_steerer_spec()
    for unit in (1.0, 5.0):
        lhs = spec.matrix(A.linear) @ jet_descriptor(scene_jet(scene, x), unit)
        rhs = jet_descriptor(scene_jet(warp_scene(scene, A), A(x)), unit)
        np.testing.assert_allclose(lhs, rhs, atol=1e-8 * max(1.0, np.abs(rhs).max()))


# --- moment descriptor


def _poly_image(coeffs, size=32):
    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    c = (size - 1) / 2
    return RasterImage(poly.evaluate(coeffs, xs - c, ys - c)), np.array([c, c])


def test_moment_descriptor_constant_image():
    img = RasterImage(np.full((32, 32), 0.7))
    d = moment_descriptor(img, Keypoint((15.5, 15.0)), 6.0)
    assert d[0] == pytest.approx(0.7)
    assert np.max(np.abs(d[1:])) <= 1e-10


def test_moment_descriptor_ramp_gradient():
    coeffs = np.zeros(15)
    coeffs[0], coeffs[poly.index(1, 0)], coeffs[poly.index(1, 1)] = 0.5, -0.01, 0.02  # 0.5 - 0.01 y + 0.02 x
    img, c = _poly_image(coeffs)
    d = moment_descriptor(img, c, 6.0)
    np.testing.assert_allclose(d[1:3], [-0.06, 0.12], atol=1e-12)  # basis (y, x), unit 6
    assert np.max(np.abs(d[3:])) <= 1e-12


def test_moment_descriptor_exact_for_quartic_images():
    rng = np.random.default_rng(1)
    coeffs = rng.normal(size=15) * np.array([10.0 ** -k for k in range(5) for _ in range(k + 1)])
    img, c = _poly_image(coeffs)
    want = jet_descriptor(Jet(coeffs / poly.binomial_weights()), 5.0)
    np.testing.assert_allclose(moment_descriptor(img, c, 5.0), want, atol=1e-10)


def test_moment_descriptor_converges_to_jet():
    scene = SceneImage([Blob(1.0, (0.5, -0.3), [[4.0, 1.0], [1.0, 3.0]]), Blob(-0.6, (-2.0, 1.0), np.eye(2) * 5)])
    x = np.zeros(2)
    errs = []
    for res in (4.0, 8.0, 16.0):  # pixels per world unit; window fixed at 12 pixels
        A = Affine2(np.eye(2) * res, [40.0, 40.0])
        s = warp_scene(scene, A)
        img = render(s, 81, 81)
        img.data = img.data * (s.intensity_range[1] - s.intensity_range[0]) + s.intensity_range[0]
        d = moment_descriptor(img, A(x), 12.0)
        want = jet_descriptor(scene_jet(s, A(x)), 12.0)
        errs.append(np.max(np.abs(d - want)))
    assert errs[1] / errs[0] <= 0.7 and errs[2] / errs[1] <= 0.7


def test_moment_descriptor_coverage():
    img = RasterImage(np.zeros((32, 32)))
    with pytest.raises(CoverageError):
        moment_descriptor(img, (2.0, 10.0), 6.0)
    img.valid[10, 12] = False
    with pytest.raises(CoverageError):
        moment_descriptor(img, (10.0, 10.0), 6.0)
    descs, kept = describe(img, [Keypoint((2.0, 2.0)), Keypoint((20.0, 20.0))], 6.0)
    assert descs.shape == (1, 15) and kept.tolist() == [1]


# --- Harris


def test_harris_constant_image_is_empty():
    assert harris_detect(RasterImage(np.full((32, 32), 0.3))) == []


def test_harris_single_blob_rim():
    scene = SceneImage([Blob(1.0, (32.0, 32.0), [[36.0, 0.0], [0.0, 16.0]])])
    img = render(scene, 64, 64)
    kps = harris_detect(img, top_k=10)
    assert 0 < len(kps) <= 10
    pts = keypoint_array(kps)
    r = np.linalg.norm(pts - 32.0, axis=1)
    assert np.all(r > 1.0) and np.all(r < 20.0)
    scores = [k.score for k in kps]
    assert scores == sorted(scores, reverse=True)


def test_harris_deterministic_and_respects_mask():
    img = render(random_scene(2, 20, (0, 0, 63, 63), (3, 6)), 64, 64)
    a, b = harris_detect(img, top_k=30), harris_detect(img, top_k=30)
    np.testing.assert_array_equal(keypoint_array(a), keypoint_array(b))
    img.valid[:, 32:] = False
    pts = keypoint_array(harris_detect(img, top_k=30, border=3))
    assert np.all(pts[:, 0] < 32 - 3 + 0.5)
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1) + np.eye(len(pts)) * 1e9
    assert d.min() > 4.0 - 1.0  # NMS radius 4, up to the sub-pixel shifts
