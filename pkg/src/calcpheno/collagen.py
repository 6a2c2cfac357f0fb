"""Coupling between collagen fibre density and calcification distribution density.

A collagen mask is reduced to windowed volume fractions, split into low and
high density by 1-D two-means, and each calcification is labelled by the
collagen class at its centroid (C1 low, C2 high). Density clustering of the
calcification centroids gives D2 (clustered, high calcification density) and
D1 (isolated). The neighbourhood radius is scanned until the two labellings
agree on at least 80% of the particles.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .particles import MICRO
from .phenotype import ClusterParams, dbscan

C_LOW, C_HIGH = "C1", "C2"
D_SPARSE, D_DENSE = "D1", "D2"
AGREEMENT_TARGET = 0.8


@dataclass
class DensityField:
    window_um: float
    window_vox: int
    cells: np.ndarray  # collagen volume fraction per window, shape ceil(dims / window_vox)
    spacing_um: float
    volume_shape: tuple


@dataclass
class TwoLevelSplit:
    high: np.ndarray  # bool per cell
    threshold: float  # cells with fraction > threshold are high
    centers: tuple
    flagged: bool = False  # constant field: every cell low

    def upsample(self, fld):
        w = fld.window_vox
        nz, ny, nx = fld.volume_shape
        return np.repeat(np.repeat(np.repeat(self.high, w, 0), w, 1), w, 2)[:nz, :ny, :nx]


@dataclass
class CouplingResult:
    best_eps_um: float
    agreement: float
    converged: bool
    c_labels: dict
    d_labels: dict
    scan: list = field(default_factory=list)  # (eps_um, agreement) in grid order
    pairing: str = "inverse"

    def to_dict(self):
        return {"best_eps_um": self.best_eps_um, "agreement": self.agreement,
                "converged": self.converged, "pairing": self.pairing,
                "scan": [{"eps_um": e, "agreement": a} for e, a in self.scan],
                "particles": [{"id": i, "c_label": self.c_labels[i], "d_label": self.d_labels[i]}
                              for i in sorted(self.c_labels)]}


def local_density(collagen, window_um=60.0, spacing_um=None):
    """Collagen volume fraction in non-overlapping cubic windows.

    Edge windows are divided by the number of voxels they actually cover.
    """
    bits = np.asarray(getattr(collagen, "bits", collagen), dtype=np.bool_)
    if spacing_um is None:
        spacing_um = getattr(collagen, "spacing_um", 3.0)
    w = int(round(window_um / spacing_um))
    if w < 1:
        raise ValueError(f"window of {window_um} um is below one voxel at {spacing_um} um spacing")
    sums, sizes = kernels.block_sums(bits, w)
    return DensityField(float(window_um), w, sums / sizes, float(spacing_um), bits.shape)


def two_means_1d(values):
    """Globally optimal split of 1-D values into two groups (minimum summed squared error).

    In one dimension the optimum is a cut in sorted order, so every cut is
    scored with prefix sums. Returns ``(threshold, low_center, high_center)``
    with ``high = values > threshold``; ``None`` for fewer than two distinct values.
    """
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size < 2 or v[0] == v[-1]:
        return None
    n = v.size
    c1 = np.cumsum(v)
    c2 = np.cumsum(v * v)
    k = np.arange(1, n)  # size of the low group
    s_lo, q_lo = c1[:-1], c2[:-1]
    s_hi, q_hi = c1[-1] - s_lo, c2[-1] - q_lo
    sse = (q_lo - s_lo ** 2 / k) + (q_hi - s_hi ** 2 / (n - k))
    valid = v[1:] > v[:-1]  # a cut must separate distinct values
    sse = np.where(valid, sse, np.inf)
    i = int(np.argmin(sse))
    return float(v[i]), float(s_lo[i] / k[i]), float(s_hi[i] / (n - k[i]))


def split_two_level(fld):
    """Label each density cell low or high collagen."""
    res = two_means_1d(fld.cells)
    if res is None:
        c = float(fld.cells.flat[0]) if fld.cells.size else 0.0
        return TwoLevelSplit(np.zeros(fld.cells.shape, np.bool_), c, (c, c), flagged=True)
    thr, lo, hi = res
    return TwoLevelSplit(fld.cells > thr, thr, (lo, hi))


def label_by_collagen(pset, split, fld):
    """C1 when a particle's centroid falls in a low-density cell, else C2."""
    edge = fld.window_vox * fld.spacing_um
    g = split.high.shape
    out = {}
    for p in pset.particles:
        x, y, z = p.centroid_um
        idx = (int(z // edge), int(y // edge), int(x // edge))
        if not all(0 <= i < n for i, n in zip(idx, g)):
            raise RuntimeError(f"particle {p.id} centroid lies outside the density grid")
        out[p.id] = C_HIGH if split.high[idx] else C_LOW
    return out


def _matches(c, d, pairing):
    if pairing == "inverse":
        return (d == D_DENSE and c == C_LOW) or (d == D_SPARSE and c == C_HIGH)
    return (d == D_SPARSE and c == C_LOW) or (d == D_DENSE and c == C_HIGH)


def agreement(c_labels, d_labels, pairing="inverse"):
    ids = sorted(c_labels)
    if not ids:
        return 0.0
    return sum(_matches(c_labels[i], d_labels[i], pairing) for i in ids) / len(ids)


def default_eps_grid():
    return np.geomspace(10.0, 1000.0, 20)


def search_density_threshold(pset, c_labels, eps_grid=None, min_pts=3, micros_only=False,
                             pairing="inverse"):
    """Scan the clustering radius for the best D/C label agreement.

    ``pairing="inverse"`` scores clustered (D2) particles as matching low
    collagen (C1) and isolated (D1) as matching high collagen (C2), the
    expected inverse relation. ``"direct"`` pairs D1-C1 and D2-C2. Ties go to
    the smaller radius; ``converged`` means the best agreement reached 0.8.
    """
    if pairing not in ("inverse", "direct"):
        raise ValueError(f"unknown pairing {pairing!r}")
    ps = sorted((p for p in pset.particles if not micros_only or p.size_class == MICRO),
                key=lambda p: p.id)
    if len(ps) < 2:
        raise ValueError("need at least two particles")
    grid = default_eps_grid() if eps_grid is None else np.asarray(eps_grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("empty eps grid")
    pts = np.array([p.centroid_um for p in ps])
    c = {p.id: c_labels[p.id] for p in ps}
    best = None
    scan = []
    for eps in grid:
        lab = dbscan(pts, ClusterParams(float(eps), min_pts))
        d = {p.id: (D_DENSE if l >= 0 else D_SPARSE) for p, l in zip(ps, lab)}
        a = agreement(c, d, pairing)
        scan.append((float(eps), a))
        if best is None or a > best[1]:
            best = (float(eps), a, d)
    eps, a, d = best
    return CouplingResult(eps, a, a >= AGREEMENT_TARGET, c, d, scan, pairing)
