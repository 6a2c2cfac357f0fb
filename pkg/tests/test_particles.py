import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from calcpheno.particles import (MACRO, MICRO, classify_size, connected_components,
                                 equivalent_diameter, extract_particles, filter_min_volume,
                                 write_particle_csv)

from .oracles import flood_fill


def ball(n, r, c=None):
    c = (n - 1) / 2 if c is None else c
    z, y, x = np.ogrid[:n, :n, :n]
    return (x - c) ** 2 + (y - c) ** 2 + (z - c) ** 2 <= r * r


@settings(max_examples=80, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8))))
def test_matches_flood_fill(mask):
    lab, _ = connected_components(mask, 3.0)
    ref, n = flood_fill(mask)
    assert lab.max() == n
    np.testing.assert_array_equal(lab, ref)


def test_partition_properties(rng):
    mask = rng.random((20, 20, 20)) > 0.7
    lab, ps = connected_components(mask, 3.0)
    assert sum(p.voxel_count for p in ps.particles) == mask.sum()
    assert ((lab > 0) == mask).all()


def test_diagonal_touching_26_vs_6():
    m = np.zeros((2, 2, 2), bool)
    m[0, 0, 0] = m[1, 1, 1] = True
    assert len(connected_components(m, 1.0, 26)[1].particles) == 1
    assert len(connected_components(m, 1.0, 6)[1].particles) == 2


@pytest.mark.parametrize("r", [10, 12, 15])
def test_sphere_volume(r):
    _, ps = connected_components(ball(2 * r + 5, r), 1.0)
    (p,) = ps.particles
    assert abs(p.voxel_count - 4 / 3 * math.pi * r ** 3) / (4 / 3 * math.pi * r ** 3) < 0.02


def test_centroid_voxel_centres():
    m = np.zeros((3, 3, 3), bool)
    m[1, 1, 2] = True
    _, ps = connected_components(m, 2.0)
    assert ps.particles[0].centroid_um == (5.0, 3.0, 3.0)


def test_size_boundary_strict():
    assert equivalent_diameter(math.pi / 6 * 500.0 ** 3) == pytest.approx(500.0)
    m = np.zeros((4, 4, 4), bool)
    m[:2, :2, :2] = True  # 8 voxels
    s = (math.pi / 6 * 500.0 ** 3 / 8) ** (1 / 3)  # 8 voxels -> d_eq exactly 500 um
    _, ps = connected_components(m, s)
    p = classify_size(ps).particles[0]
    assert p.d_eq_um == pytest.approx(500.0)
    assert p.size_class == (MICRO if p.d_eq_um < 500.0 else MACRO)
    below = classify_size(connected_components(m, s * 0.999)[1]).particles[0]
    above = classify_size(connected_components(m, s * 1.001)[1]).particles[0]
    assert below.size_class == MICRO and above.size_class == MACRO


def test_min_volume_filter_keeps_ids():
    m = np.zeros((10, 10, 10), bool)
    m[0, 0, 0] = True
    m[5:8, 5:8, 5:8] = True
    _, ps = connected_components(m, 1.0)
    f = filter_min_volume(ps)
    assert [p.id for p in f.particles] == [2]
    assert f.labels[0, 0, 0] == 0 and f.labels[6, 6, 6] == 2


def test_empty_mask():
    ps = extract_particles(np.zeros((3, 3, 3), bool), 1.0)
    assert ps.particles == []


def test_csv(tmp_path):
    ps = extract_particles(ball(12, 4), 3.0)
    write_particle_csv(ps, tmp_path / "p.csv")
    rows = list(csv.DictReader(open(tmp_path / "p.csv")))
    assert len(rows) == 1 and rows[0]["size_class"] == MICRO
