import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from calcpheno.metrics import (StageTimings, aggregate_scores, confusion, dsc, jsc,
                               report_timings, slice_scores)

from .oracles import set_dice


def test_dsc_jsc_examples():
    p = np.array([1, 1, 0, 0], bool)
    t = np.array([1, 0, 1, 0], bool)
    c = confusion(p, t)
    assert (c.TP, c.FP, c.FN, c.TN) == (1, 1, 1, 1)
    assert dsc(c).value == 0.5
    assert jsc(c).value == pytest.approx(1 / 3)


def test_empty_masks_flagged():
    z = np.zeros((3, 3), bool)
    assert dsc(confusion(z, z)) .flagged and dsc(confusion(z, z)).value == 1.0
    assert jsc(confusion(z, z)).flagged


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        confusion(np.zeros((2, 2)), np.zeros((2, 3)))


@settings(max_examples=200, deadline=None)
@given(arrays(bool, (5, 6, 4)), arrays(bool, (5, 6, 4)))
def test_jsc_dsc_identity(p, t):
    c = confusion(p, t)
    d, j = dsc(c).value, jsc(c).value
    assert abs(j - d / (2 - d)) < 1e-12
    assert 0.0 <= j <= d <= 1.0
    ref_d, ref_j = set_dice(p, t)
    assert d == pytest.approx(ref_d, abs=1e-15) and j == pytest.approx(ref_j, abs=1e-15)


def test_aggregate():
    mean, sd = aggregate_scores([0.9, 0.95, 1.0])
    assert mean == pytest.approx(0.95)
    assert sd.value == pytest.approx(0.05)
    mean, sd = aggregate_scores([0.7])
    assert mean == 0.7 and sd.value == 0 and sd.flagged
    with pytest.raises(ValueError):
        aggregate_scores([])


def test_slice_scores():
    p = np.zeros((3, 4, 4), bool)
    p[1, :2] = True
    rows = slice_scores(p, p, [0, 1])
    assert rows == [(0, 1.0, 1.0), (1, 1.0, 1.0)]


def test_timings_percentages():
    t = StageTimings()
    for k, v in (("a", 10.0), ("b", 30.0), ("c", 60.0)):
        t.add(k, v)
    assert t.percentages() == pytest.approx({"a": 10.0, "b": 30.0, "c": 60.0})
    table, d = report_timings(t)
    assert d["total_seconds"] == pytest.approx(100.0)
    assert "60.0%" in table
    one = StageTimings()
    one.add("only", 2.0)
    assert one.percentages() == {"only": 100.0}


def test_timing_context_monotonic():
    t = StageTimings()
    with t.time("x"):
        time.sleep(0.01)
    assert t.seconds["x"] >= 0.009
    with pytest.raises(ValueError):
        t.add("y", -1.0)
