import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from greedyreg.core import AffineTransform2D, DisplacementField, LandmarkSet, ScalarImage
from greedyreg.filters import smooth_array
from greedyreg.warp import (TotalTransform, compose, jacobian_det, map_landmarks, sample_bilinear,
                            sample_bilinear_grad, warp_image, warp_image_affine)

from conftest import smooth_random
from oracles import bilinear_at, compose_oracle, warp_oracle


def smooth_field(shape, amp, seed, sigma=3.0):
    rng = np.random.default_rng(seed)
    return DisplacementField(amp * smooth_array(rng.standard_normal(shape), sigma) * sigma,
                             amp * smooth_array(rng.standard_normal(shape), sigma) * sigma)


def test_zero_field_is_identity():
    img = ScalarImage(np.random.default_rng(0).random((9, 11)))
    assert warp_image(img, DisplacementField.zeros(11, 9)) == img


def test_integer_shift_on_ramp():
    ramp = ScalarImage(np.tile(np.arange(10.0) / 10, (6, 1)))
    out = warp_image(ramp, DisplacementField(np.ones((6, 10)), np.zeros((6, 10))))
    np.testing.assert_array_equal(out.data[:, :-1], ramp.data[:, 1:])
    np.testing.assert_array_equal(out.data[:, -1], ramp.data[:, -1])


def test_warp_matches_oracle():
    rng = np.random.default_rng(1)
    img = rng.random((17, 13))
    fld = DisplacementField(rng.uniform(-4, 4, (17, 13)), rng.uniform(-4, 4, (17, 13)))
    got = warp_image(ScalarImage(img), fld).data
    assert np.abs(got - warp_oracle(img, fld.dx, fld.dy)).max() < 1e-12


def test_warp_size_mismatch():
    with pytest.raises(ValueError):
        warp_image(ScalarImage(np.zeros((4, 4))), DisplacementField.zeros(5, 4))


def test_fill_replaces_out_of_frame_reads():
    img = ScalarImage(np.full((4, 4), 0.5))
    fld = DisplacementField(np.full((4, 4), 10.0), np.zeros((4, 4)))
    assert np.all(warp_image(img, fld, fill=0.0).data == 0.0)
    assert np.all(warp_image(img, fld).data == 0.5)


def test_affine_identity_and_quarter_turn():
    img = ScalarImage(np.random.default_rng(2).random((15, 15)))
    assert warp_image_affine(img, AffineTransform2D.identity(7, 7)) == img
    A = AffineTransform2D.rigid(np.pi / 2, 0, 0, 7, 7)
    out = warp_image_affine(img, A).data
    # out(x, y) reads img at (7 - (y - 7), 7 + (x - 7)), i.e. out[y, x] = img[x, 14 - y]
    expected = np.rot90(img.data, k=1)
    assert np.abs(out - expected).max() < 1e-12


def test_affine_half_pixel_translation_averages():
    ramp = np.tile(np.arange(8.0) ** 2 / 64, (3, 1))
    out = warp_image_affine(ScalarImage(ramp), AffineTransform2D(tx=0.5)).data
    np.testing.assert_allclose(out[:, :-1], 0.5 * (ramp[:, :-1] + ramp[:, 1:]), atol=1e-15)


def test_affine_output_shape():
    img = ScalarImage(np.zeros((5, 6)))
    assert warp_image_affine(img, AffineTransform2D(), shape=(3, 4)).shape == (3, 4)


def test_compose_identity_element():
    u = smooth_field((12, 14), 1.0, 3)
    z = DisplacementField.zeros(14, 12)
    assert compose(u, z) == u
    assert compose(z, u) == u


@settings(max_examples=30)
@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(-20, 20), st.floats(-20, 20))
def test_compose_constant_fields_add(a, b, c, d):
    shape = (6, 7)
    u = DisplacementField(np.full(shape, a), np.full(shape, b))
    v = DisplacementField(np.full(shape, c), np.full(shape, d))
    out = compose(u, v)
    assert np.all(out.dx == c + a) and np.all(out.dy == d + b)


def test_compose_matches_oracle():
    outer = smooth_field((20, 18), 1.5, 4)
    inner = smooth_field((20, 18), 1.5, 5)
    got = compose(outer, inner)
    ox, oy = compose_oracle(outer.dx, outer.dy, inner.dx, inner.dy)
    assert max(np.abs(got.dx - ox).max(), np.abs(got.dy - oy).max()) < 1e-12


def test_compose_size_mismatch():
    with pytest.raises(ValueError):
        compose(DisplacementField.zeros(3, 3), DisplacementField.zeros(3, 4))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_compose_associative(seed):
    u, v, w = (smooth_field((40, 40), 0.3, seed + i, sigma=6.0) for i in range(3))
    left = compose(compose(u, v), w)
    right = compose(u, compose(v, w))
    m = 8
    err = max(np.abs(left.dx - right.dx)[m:-m, m:-m].max(),
              np.abs(left.dy - right.dy)[m:-m, m:-m].max())
    # bilinear interpolation of the smooth inner composite: error is second order
    assert err < 1e-3


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_warp_of_composition(seed):
    img = ScalarImage(smooth_random((48, 48), 4.0, seed))
    u = smooth_field((48, 48), 0.4, seed + 1, sigma=5.0)
    v = smooth_field((48, 48), 0.4, seed + 2, sigma=5.0)
    once = warp_image(img, compose(u, v)).data
    twice = warp_image(warp_image(img, u), v).data
    assert np.abs(once - twice)[8:-8, 8:-8].max() < 1e-2


def test_map_landmarks():
    pts = LandmarkSet([[10.0, 10.0], [3.25, 7.5]])
    zero = DisplacementField.zeros(20, 20)
    assert map_landmarks(pts, TotalTransform(AffineTransform2D(), zero)) == pts
    shifted = map_landmarks(pts, TotalTransform(AffineTransform2D(tx=2.5, ty=-1.0, cx=9, cy=9), zero))
    np.testing.assert_array_equal(shifted.points, pts.points + [2.5, -1.0])
    const = DisplacementField(np.full((20, 20), 3.0), np.full((20, 20), 4.0))
    out = map_landmarks(LandmarkSet([[10.0, 10.0]]), TotalTransform(AffineTransform2D(), const))
    assert out.points.tolist() == [[13.0, 14.0]]
    assert len(map_landmarks(LandmarkSet(), TotalTransform(AffineTransform2D(), zero))) == 0


def test_total_transform_matches_pointwise_formula():
    fld = smooth_field((16, 16), 1.0, 7)
    A = AffineTransform2D(1.05, 0.1, -0.08, 0.97, 1.5, -2.0, 7.5, 7.5)
    T = TotalTransform(A, fld)
    for x, y in [(3.3, 4.1), (0.0, 15.0), (12.7, 8.25)]:
        ux, uy = bilinear_at(fld.dx, x, y), bilinear_at(fld.dy, x, y)
        ex = A.a11 * (x + ux - 7.5) + A.a12 * (y + uy - 7.5) + 7.5 + 1.5
        ey = A.a21 * (x + ux - 7.5) + A.a22 * (y + uy - 7.5) + 7.5 - 2.0
        gx, gy = T.apply(x, y)
        assert abs(gx - ex) < 1e-12 and abs(gy - ey) < 1e-12


def test_jacobian_examples():
    assert np.all(jacobian_det(DisplacementField.zeros(5, 4)).data == 1.0)
    yy, xx = np.mgrid[0:10, 0:12].astype(float)
    j = jacobian_det(DisplacementField(0.1 * xx, np.zeros_like(xx))).data
    np.testing.assert_allclose(j, 1.1, atol=1e-12)
    j = jacobian_det(DisplacementField(0.1 * xx, 0.2 * yy)).data
    np.testing.assert_allclose(j, 1.32, atol=1e-12)


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_jacobian_of_constant_field_is_one(a, b):
    j = jacobian_det(DisplacementField(np.full((5, 6), a), np.full((5, 6), b))).data
    assert np.all(j == 1.0)


def test_sampler_derivative_matches_finite_differences():
    rng = np.random.default_rng(9)
    arr = rng.random((10, 10))
    x = rng.uniform(0.5, 8.5, 50)
    y = rng.uniform(0.5, 8.5, 50)
    h = 1e-6
    _, gx, gy = sample_bilinear_grad(arr, x, y)
    fx = (sample_bilinear(arr, x + h, y) - sample_bilinear(arr, x - h, y)) / (2 * h)
    fy = (sample_bilinear(arr, x, y + h) - sample_bilinear(arr, x, y - h)) / (2 * h)
    np.testing.assert_allclose(gx, fx, atol=1e-7)
    np.testing.assert_allclose(gy, fy, atol=1e-7)
    # on knots the slope is the central difference
    _, gx, gy = sample_bilinear_grad(arr, np.array([4.0]), np.array([3.0]))
    assert gx[0] == pytest.approx((arr[3, 5] - arr[3, 3]) / 2)
    assert gy[0] == pytest.approx((arr[4, 4] - arr[2, 4]) / 2)
