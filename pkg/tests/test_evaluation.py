import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from greedyreg.core import LandmarkSet
from greedyreg.evaluation import aggregate, rtre, score_pair, tre


def test_tre_examples():
    assert tre(LandmarkSet([[1.0, 2.0]]), LandmarkSet([[1.0, 2.0]])) == [0.0]
    assert tre(LandmarkSet([[10.0, 10.0]]), LandmarkSet([[13.0, 14.0]])) == [5.0]
    assert tre(LandmarkSet([[0.0, 0.0]]), LandmarkSet([[1.0, 0.0]])) == [1.0]
    with pytest.raises(ValueError):
        tre(LandmarkSet([[0.0, 0.0]]), LandmarkSet())


def test_rtre_examples():
    assert abs(rtre([5.0], 100, 100)[0] - 0.0353553) < 1e-7
    assert rtre([5.0], 100, 100)[0] == 5.0 / math.sqrt(20000.0)
    assert rtre([0.0], 7, 9) == [0.0]
    assert rtre([math.hypot(30, 40)], 30, 40) == [1.0]
    with pytest.raises(ValueError):
        rtre([1.0], 0, 10)


def test_score_pair_conventions():
    target = LandmarkSet([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    before = LandmarkSet(target.points + 1.0)
    perfect = score_pair(target, before, target, 100, 100)
    assert perfect.median_rtre == 0.0 and perfect.robustness == 1.0
    same = score_pair(target, before, before, 100, 100)
    assert same.robustness == 0.0
    after = LandmarkSet(target.points + [[10.0, 0], [30.0, 0], [20.0, 0]])
    s = score_pair(target, before, after, 100, 100)
    assert s.median_rtre == pytest.approx(20.0 / math.sqrt(20000.0))
    with pytest.raises(ValueError):
        score_pair(LandmarkSet(), LandmarkSet(), LandmarkSet(), 10, 10)
    with pytest.raises(ValueError):
        score_pair(target, before, LandmarkSet([[0.0, 0.0]]), 10, 10)


def test_even_count_median():
    target = LandmarkSet(np.zeros((4, 2)))
    after = LandmarkSet([[1.0, 0], [2.0, 0], [3.0, 0], [10.0, 0]])
    s = score_pair(target, LandmarkSet(np.full((4, 2), 50.0)), after, 3, 4)
    assert s.median_rtre == pytest.approx(2.5 / 5.0)


def test_median_of_three():
    # rtres 0.1, 0.3, 0.2 on a 60 x 80 image, whose diagonal is 100
    target = LandmarkSet(np.zeros((3, 2)))
    after = LandmarkSet([[10.0, 0], [30.0, 0], [20.0, 0]])
    s = score_pair(target, LandmarkSet(np.full((3, 2), 90.0)), after, 60, 80)
    assert s.median_rtre == pytest.approx(0.2)


def test_aggregate():
    target = LandmarkSet([[0.0, 0.0]])
    s = score_pair(target, LandmarkSet([[9.0, 0]]), LandmarkSet([[3.0, 4.0]]), 100, 100)
    one = aggregate([s])
    assert (one.n_pairs, one.avg_median_rtre, one.avg_robustness) == (1, s.median_rtre, 1.0)
    a = score_pair(target, target, LandmarkSet([[0.4, 0]]), 60, 80)
    b = score_pair(target, target, LandmarkSet([[0.6, 0]]), 60, 80)
    assert aggregate([a, b]).avg_median_rtre == pytest.approx(0.005)
    with pytest.raises(ValueError):
        aggregate([])
    assert "avg_median_rtre=" in one.line()


pts = arrays(np.float64, (7, 2), elements=st.floats(-500, 500))


@settings(max_examples=50)
@given(pts, pts, st.floats(1, 20), st.integers(1, 2000), st.integers(1, 2000))
def test_rtre_scale_invariance(a, b, s, w, h):
    r1 = rtre(tre(LandmarkSet(a), LandmarkSet(b)), w, h)
    r2 = rtre(tre(LandmarkSet(a * s), LandmarkSet(b * s)), w * s, h * s)
    assert np.allclose(r1, r2, rtol=1e-12, atol=1e-12)


@settings(max_examples=50)
@given(pts, pts, pts)
def test_score_invariants(t, before, after):
    s = score_pair(LandmarkSet(t), LandmarkSet(before), LandmarkSet(after), 640, 480)
    assert min(s.rtres) <= s.median_rtre <= max(s.rtres)
    assert 0.0 <= s.robustness <= 1.0
    improved = np.hypot(*(after - t).T) < np.hypot(*(before - t).T)
    assert (s.robustness == 1.0) == bool(improved.all())
    assert len(s.tres) == len(s.rtres) == 7
