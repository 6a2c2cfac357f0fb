"""The numba kernels and their numpy fallbacks must agree exactly."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from calcpheno import kernels
from calcpheno.kernels import _numba, _numpy


@settings(max_examples=60, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 7), st.integers(1, 7), st.integers(1, 7))),
       st.sampled_from([6, 26]))
def test_labels_parity(mask, conn):
    a, na = kernels.label_components(mask, conn, impl=_numba)
    b, nb = kernels.label_components(mask, conn, impl=_numpy)
    assert na == nb
    np.testing.assert_array_equal(a, b)
    for impl in (_numba, _numpy):
        c1 = kernels.component_stats(a, na, impl=impl)
        c0 = kernels.component_stats(a, na, impl=_numpy)
        for x, y in zip(c1, c0):
            np.testing.assert_array_equal(x, y)
    np.testing.assert_array_equal(kernels.count_in_mask(a, na, mask, impl=_numba),
                                  kernels.count_in_mask(a, na, mask, impl=_numpy))


def test_labels_first_voxel_order():
    m = np.zeros((1, 3, 5), bool)
    m[0, 0, 4] = m[0, 2, 0] = m[0, 2, 1] = True
    lab, n = kernels.label_components(m, 26)
    assert n == 2 and lab[0, 0, 4] == 1 and lab[0, 2, 0] == 2


@settings(max_examples=40, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9))),
       st.integers(1, 4))
def test_block_sums_parity(mask, w):
    s1, n1 = kernels.block_sums(mask, w, impl=_numba)
    s0, n0 = kernels.block_sums(mask, w, impl=_numpy)
    np.testing.assert_array_equal(s1, s0)
    np.testing.assert_array_equal(n1, n0)
    assert s1.sum() == mask.sum() and n1.sum() == mask.size


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 60), st.floats(0.5, 30), st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_dbscan_parity(n, eps, min_pts, seed):
    pts = np.random.default_rng(seed).uniform(0, 50, (n, 3))
    l1, c1 = kernels.dbscan_labels(pts, eps, min_pts, impl=_numba)
    l0, c0 = kernels.dbscan_labels(pts, eps, min_pts, impl=_numpy)
    np.testing.assert_array_equal(l1, l0)
    np.testing.assert_array_equal(c1, c0)


def test_bad_connectivity():
    with pytest.raises(ValueError):
        kernels.neighbour_offsets(18)


def test_backend_flag_subprocess():
    import os
    import subprocess
    import sys
    env = dict(os.environ, CALCPHENO_NO_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "from calcpheno import kernels; print(kernels.backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
