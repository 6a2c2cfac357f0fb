import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calcpheno import collagen as col
from calcpheno.particles import extract_particles
from calcpheno.phantom import collagen_phantom

from .oracles import best_split_exhaustive


def _sse(v, thr):
    lo, hi = v[v <= thr], v[v > thr]
    return ((lo - lo.mean()) ** 2).sum() + ((hi - hi.mean()) ** 2).sum()


@settings(max_examples=150, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=40))
def test_two_means_is_exhaustive_optimum(values):
    v = np.array(values)
    res = col.two_means_1d(v)
    ref = best_split_exhaustive(v)
    if ref is None:
        assert res is None
        return
    thr, lo, hi = res
    assert _sse(v, thr) <= ref[0] + 1e-9
    assert lo < hi


def test_local_density_edges():
    m = np.zeros((5, 5, 5), bool)
    m[4, 4, 4] = True
    fld = col.local_density(m, window_um=12.0, spacing_um=3.0)  # 4-voxel windows
    assert fld.cells.shape == (2, 2, 2)
    assert fld.cells[1, 1, 1] == 1.0
    assert fld.cells[0, 0, 0] == 0.0


def test_constant_field_flagged():
    fld = col.local_density(np.ones((8, 8, 8), bool), 12.0, 3.0)
    s = col.split_two_level(fld)
    assert s.flagged and not s.high.any()


def test_agreement_pairings():
    c = {1: "C1", 2: "C2"}
    d = {1: "D2", 2: "D1"}
    assert col.agreement(c, d, "inverse") == 1.0
    assert col.agreement(c, d, "direct") == 0.0


def test_coupling_phantom_converges():
    cp = collagen_phantom(seed=0)
    ps = extract_particles(cp.calcification, cp.calcification.spacing_um)
    fld = col.local_density(cp.collagen, cp.window_um)
    split = col.split_two_level(fld)
    c = col.label_by_collagen(ps, split, fld)
    assert sum(v == "C1" for v in c.values()) == 24
    res = col.search_density_threshold(ps, c)
    assert res.converged and res.agreement >= 0.8
    assert len(res.scan) == 20
    # a larger radius that still separates groups is never preferred on ties
    best = max(a for _, a in res.scan)
    assert res.best_eps_um == min(e for e, a in res.scan if a == best)


def test_search_needs_particles():
    cp = collagen_phantom(seed=0)
    ps = extract_particles(cp.calcification, cp.calcification.spacing_um)
    one = ps.with_particles(ps.particles[:1])
    with pytest.raises(ValueError):
        col.search_density_threshold(one, {one.particles[0].id: "C1"})
    with pytest.raises(ValueError):
        col.search_density_threshold(ps, {p.id: "C1" for p in ps.particles}, pairing="odd")
