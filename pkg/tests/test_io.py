import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st, HealthCheck
from PIL import Image

from greedyreg import io as rio
from greedyreg.core import AffineTransform2D, DisplacementField, LandmarkSet, RgbImage, ScalarImage

tmp_ok = settings(suppress_health_check=[HealthCheck.function_scoped_fixture], max_examples=25)


def test_read_pgm_scaling(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    img = rio.read_image(p)
    assert isinstance(img, ScalarImage)
    np.testing.assert_array_equal(img.data, np.array([[0, 1.0], [128 / 255, 64 / 255]]))


def test_read_ppm_white_pixel(tmp_path):
    p = tmp_path / "a.ppm"
    p.write_bytes(b"P6\n# comment\n1 1\n255\n" + bytes([255, 255, 255]))
    img = rio.read_image(p)
    assert isinstance(img, RgbImage)
    assert img.data.tolist() == [[[255, 255, 255]]]


@pytest.mark.parametrize("payload", [
    b"P5\n2 2\n255\n" + bytes([0, 1, 2]),
    b"P5\n2 2",
    b"P6\n2 2\n255\n" + bytes(11),
    b"P",
    b"",
])
def test_truncated_file_is_corrupt(tmp_path, payload):
    p = tmp_path / "t.pgm"
    p.write_bytes(payload)
    with pytest.raises(rio.ImageFormatError, match="corrupt image"):
        rio.read_image(p)


def test_sixteen_bit_rejected(tmp_path):
    p = tmp_path / "deep.pgm"
    p.write_bytes(b"P5\n1 1\n65535\n" + bytes(2))
    with pytest.raises(rio.ImageFormatError, match="bit depth"):
        rio.read_image(p)
    q = tmp_path / "deep.png"
    Image.fromarray(np.full((2, 2), 40000, dtype=np.uint16)).save(q)
    with pytest.raises(rio.ImageFormatError, match="bit depth"):
        rio.read_image(q)


def test_missing_file_is_oserror(tmp_path):
    with pytest.raises(OSError):
        rio.read_image(tmp_path / "nope.pgm")


def test_png_gray_and_color(tmp_path):
    gray = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    Image.fromarray(gray).save(tmp_path / "g.png")
    img = rio.read_image(tmp_path / "g.png")
    assert isinstance(img, ScalarImage)
    np.testing.assert_array_equal(img.data, gray / 255.0)
    rgb = np.random.default_rng(0).integers(0, 256, (3, 4, 3), dtype=np.uint8)
    Image.fromarray(rgb).save(tmp_path / "c.png")
    out = rio.read_image(tmp_path / "c.png")
    assert isinstance(out, RgbImage)
    np.testing.assert_array_equal(out.data, rgb)


@pytest.mark.parametrize("suffix", [".pgm", ".png"])
def test_image_round_trip_within_quantization(tmp_path, suffix):
    data = np.random.default_rng(3).random((7, 5))
    rio.write_image(tmp_path / f"x{suffix}", ScalarImage(data))
    back = rio.read_image(tmp_path / f"x{suffix}")
    assert np.abs(back.data - data).max() <= 0.5 / 255 + 1e-12


@pytest.mark.parametrize("suffix", [".ppm", ".png"])
def test_rgb_round_trip_exact(tmp_path, suffix):
    rgb = RgbImage(np.random.default_rng(4).integers(0, 256, (5, 6, 3), dtype=np.uint8))
    rio.write_image(tmp_path / f"x{suffix}", rgb)
    assert rio.read_image(tmp_path / f"x{suffix}") == rgb


def test_field_zero_round_trip(tmp_path):
    f = DisplacementField.zeros(3, 3)
    rio.write_field(tmp_path / "z.df2d", f)
    assert rio.read_field(tmp_path / "z.df2d") == f


def test_field_layout(tmp_path):
    f = DisplacementField(np.array([[0.5, -0.25]]), np.array([[0.0, 1.0]]))
    rio.write_field(tmp_path / "f.df2d", f)
    buf = (tmp_path / "f.df2d").read_bytes()
    assert len(buf) == 12 + 4 * 4
    assert buf[:12] == b"DF2D" + struct.pack("<II", 2, 1)
    assert struct.unpack("<4f", buf[12:]) == (0.5, -0.25, 0.0, 1.0)


def test_field_bad_magic_and_size(tmp_path):
    good = rio.field_to_bytes(DisplacementField.zeros(2, 2))
    p = tmp_path / "bad.df2d"
    p.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(rio.FieldFormatError, match="magic"):
        rio.read_field(p)
    p.write_bytes(good[:-1])
    with pytest.raises(rio.FieldFormatError):
        rio.read_field(p)
    p.write_bytes(good + b"\0")
    with pytest.raises(rio.FieldFormatError):
        rio.read_field(p)
    p.write_bytes(b"DF2D" + struct.pack("<II", 0, 3))
    with pytest.raises(rio.FieldFormatError):
        rio.read_field(p)


@tmp_ok
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_field_round_trip_bit_exact(tmp_path, w, h, seed):
    rng = np.random.default_rng(seed)
    f = rio.quantize_field(DisplacementField(rng.normal(0, 50, (h, w)), rng.normal(0, 50, (h, w))))
    rio.write_field(tmp_path / "r.df2d", f)
    back = rio.read_field(tmp_path / "r.df2d")
    assert back == f
    assert rio.field_to_bytes(back) == (tmp_path / "r.df2d").read_bytes()


def test_landmark_parse(tmp_path):
    p = tmp_path / "l.csv"
    p.write_text(",X,Y\n0,10.0,20.0\n1,3.5,4.5")
    assert rio.read_landmarks(p).points.tolist() == [[10, 20], [3.5, 4.5]]
    p.write_text(",X,Y\n")
    assert len(rio.read_landmarks(p)) == 0


@pytest.mark.parametrize("text, msg", [
    ("X,Y\n0,1\n", "bad header"),
    ("", "bad header"),
    (",X,Y\n0,1.0\n", "expected 3 fields"),
    (",X,Y\n0,1.0,2.0,3.0\n", "expected 3 fields"),
    (",X,Y\n0,abc,2.0\n", "non-numeric"),
])
def test_landmark_errors(tmp_path, text, msg):
    p = tmp_path / "l.csv"
    p.write_text(text)
    with pytest.raises(rio.FormatError, match=msg):
        rio.read_landmarks(p)


def test_landmark_writer_uses_six_decimals(tmp_path):
    rio.write_landmarks(tmp_path / "o.csv", LandmarkSet([[1.0, 2.5], [1 / 3, -7.0]]))
    assert (tmp_path / "o.csv").read_text() == ",X,Y\n0,1.000000,2.500000\n1,0.333333,-7.000000\n"


@tmp_ok
@given(st.lists(st.tuples(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4)), max_size=20))
def test_landmark_round_trip(tmp_path, pts):
    lm = LandmarkSet(np.array(pts, dtype=float).reshape(-1, 2))
    rio.write_landmarks(tmp_path / "rt.csv", lm)
    back = rio.read_landmarks(tmp_path / "rt.csv")
    assert len(back) == len(lm)
    if len(lm):
        assert np.abs(back.points - lm.points).max() <= 5e-7 + 1e-12


def test_affine_identity_text(tmp_path):
    rio.write_affine(tmp_path / "a.txt", AffineTransform2D.identity(50, 50))
    assert (tmp_path / "a.txt").read_text().strip() == "1 0 0 1 0 0 50 50"


def test_affine_arity_and_tokens():
    with pytest.raises(rio.FormatError):
        rio.parse_affine("1 0 0 1 0 0 50")
    with pytest.raises(rio.FormatError):
        rio.parse_affine("1 0 0 1 0 0 50 50 1")
    with pytest.raises(rio.FormatError):
        rio.parse_affine("1 0 0 1 0 0 50 y")
    with pytest.raises(rio.FormatError):
        rio.parse_affine("0 0 0 0 0 0 0 0")


reasonable = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@tmp_ok
@given(st.floats(-math.pi, math.pi), st.floats(0.1, 10), reasonable, reasonable, reasonable,
       reasonable, st.floats(-1, 1))
def test_affine_round_trip_exact(tmp_path, theta, scale, tx, ty, cx, cy, shear):
    c, s = math.cos(theta) * scale, math.sin(theta) * scale
    A = AffineTransform2D(c, -s + shear, s, c, tx, ty, cx, cy)
    rio.write_affine(tmp_path / "a.txt", A)
    assert rio.read_affine(tmp_path / "a.txt") == A


def test_atomic_write_leaves_no_partial_file(tmp_path):
    target = tmp_path / "out.txt"
    target.write_text("old")
    with pytest.raises(RuntimeError):
        with rio.atomic_write(target, "w") as fh:
            fh.write("new")
            raise RuntimeError("interrupted")
    assert target.read_text() == "old"
    assert list(tmp_path.iterdir()) == [target]


def test_kv_round_trip(tmp_path):
    rio.write_kv(tmp_path / "k.txt", {"a": 1, "b": "x y"})
    assert rio.read_kv(tmp_path / "k.txt") == {"a": "1", "b": "x y"}
    (tmp_path / "bad.txt").write_text("novalue\n")
    with pytest.raises(rio.FormatError):
        rio.read_kv(tmp_path / "bad.txt")
