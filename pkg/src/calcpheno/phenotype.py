"""Eight-way calcification phenotyping and the volumetric report.

Axes: size (micro/macro, see :mod:`calcpheno.particles`), micro distribution
(clustered/isolated, density clustering of centroids), macro topology
(sparse/dense, morphological opening) and lipid co-localisation
(athero/non-athero).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import kernels
from .particles import MACRO, MICRO

ATHERO = "athero"
NON_ATHERO = "non-athero"
SUBTYPES = ("isolated-micro", "clustered-micro", "sparse-macro", "dense-macro")
PHENOTYPES = tuple(f"{a}-{s}" for a in (ATHERO, NON_ATHERO) for s in SUBTYPES)


class PhenotypeError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterParams:
    eps_um: float = 150.0
    min_pts: int = 3

    def __post_init__(self):
        if not self.eps_um > 0:
            raise ValueError("eps_um must be positive")
        if self.min_pts < 2:
            raise ValueError("min_pts must be >= 2")


@dataclass(frozen=True)
class TopologyParams:
    opening_radius_um: float = 150.0

    def __post_init__(self):
        if not self.opening_radius_um > 0:
            raise ValueError("opening_radius_um must be positive")


def dbscan(points, params):
    """Density clustering of points (rows, in micrometres).

    Returns an int array: cluster index per point, ``-1`` for isolated points.
    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps_um``. Clusters are numbered by their lowest member index, and
    a border point joins the cluster of its lowest-index core neighbour.
    """
    labels, _ = kernels.dbscan_labels(np.asarray(points, dtype=np.float64), params.eps_um,
                                      params.min_pts)
    return labels


def classify_micro_distribution(pset, params=ClusterParams()):
    micros = sorted((p for p in pset.particles if p.size_class == MICRO), key=lambda p: p.id)
    if any(p.size_class is None for p in pset.particles):
        raise PhenotypeError("size classes must be assigned first")
    if not micros:
        return pset
    labels = dbscan([p.centroid_um for p in micros], params)
    upd = {p.id: replace(p, clustered=bool(l >= 0), cluster_id=int(l) if l >= 0 else None)
           for p, l in zip(micros, labels)}
    return pset.with_particles([upd.get(p.id, p) for p in pset.particles])


def _ball_opening(mask, r_vox):
    """Opening by the digital ball {d : |d|^2 <= r^2}, via two exact distance transforms."""
    r2 = r_vox * r_vox
    if not mask.any():
        return mask.copy()
    d_in = ndimage.distance_transform_edt(mask)
    eroded = np.rint(d_in * d_in) > r2
    if not eroded.any():
        return np.zeros_like(mask)
    d_out = ndimage.distance_transform_edt(~eroded)
    return np.rint(d_out * d_out) <= r2


def classify_macro_topology(particle_mask, params=TopologyParams(), spacing_um=3.0):
    """Split one particle into dense (survives opening) and sparse (removed) voxels.

    Returns
    -------
    dense, sparse : bool arrays shaped like ``particle_mask``
    sparse_fraction, dense_fraction : float
    """
    m = np.asarray(particle_mask, dtype=np.bool_)
    r_vox = params.opening_radius_um / spacing_um
    if r_vox < 1.0:
        raise PhenotypeError("radius below resolution: opening radius is under one voxel")
    pad = int(math.ceil(r_vox)) + 1
    opened = _ball_opening(np.pad(m, pad), r_vox)
    dense = opened[tuple(slice(pad, -pad) for _ in range(m.ndim))] & m
    sparse = m & ~dense
    n = int(m.sum())
    if n == 0:
        return dense, sparse, 0.0, 0.0
    ns = int(sparse.sum())
    return dense, sparse, ns / n, (n - ns) / n


def classify_macros(pset, params=TopologyParams()):
    out = []
    for p in pset.particles:
        if p.size_class == MACRO:
            sub, _ = pset.crop(p)
            _, sparse, fs, fd = classify_macro_topology(sub, params, pset.spacing_um)
            p = replace(p, sparse_voxels=int(sparse.sum()), sparse_fraction=fs,
                        dense_fraction=fd, topology_done=True)
        out.append(p)
    return pset.with_particles(out)


def colocalize(pset, lipid, overlap_fraction=0.5, mode="overlap"):
    """Mark particles athero when enough of them lies inside the lipid mask.

    ``mode="overlap"``: athero iff (voxels in lipid) / voxel_count >= overlap_fraction.
    ``mode="centroid"``: athero iff the voxel holding the centroid is lipid.
    """
    bits = np.asarray(getattr(lipid, "bits", lipid), dtype=np.bool_)
    if bits.shape != pset.shape:
        raise PhenotypeError(f"lipid mask {bits.shape} does not match particle grid {pset.shape}")
    n = int(pset.labels.max(initial=0))
    inside = kernels.count_in_mask(pset.labels, n, bits)
    out = []
    for p in pset.particles:
        frac = inside[p.id] / p.voxel_count
        if mode == "overlap":
            ath = frac >= overlap_fraction
        elif mode == "centroid":
            x, y, z = (int(c // pset.spacing_um) for c in p.centroid_um)
            ath = bool(bits[z, y, x])
        else:
            raise ValueError(f"unknown co-localisation mode {mode!r}")
        out.append(replace(p, athero=bool(ath), lipid_fraction=float(frac)))
    return pset.with_particles(out)


def assign_phenotype(p):
    """One of the eight labels in :data:`PHENOTYPES`."""
    if p.athero is None or p.size_class is None:
        raise PhenotypeError(f"particle {p.id}: co-localisation or size class unset")
    prefix = ATHERO if p.athero else NON_ATHERO
    if p.size_class == MICRO:
        if p.clustered is None:
            raise PhenotypeError(f"particle {p.id}: distribution unset")
        return f"{prefix}-{'clustered' if p.clustered else 'isolated'}-micro"
    if not p.topology_done:
        raise PhenotypeError(f"particle {p.id}: topology unset")
    return f"{prefix}-{'sparse' if p.sparse_fraction > p.dense_fraction else 'dense'}-macro"


def assign_all(pset):
    return pset.with_particles([replace(p, phenotype=assign_phenotype(p)) for p in pset.particles])


def _share(num, den):
    return num / den if den else 0.0


def _split(num_a, num_b):
    """Fractions of a two-way split; an empty group is flagged."""
    tot = num_a + num_b
    if tot == 0:
        return {"fractions": [0.0, 0.0], "empty": True, "voxels": 0}
    return {"fractions": [num_a / tot, num_b / tot], "empty": False, "voxels": tot}


@dataclass
class PhenotypeReport:
    spacing_um: float
    voxels: dict  # tissue / lipid / calcification voxel counts
    ratios: dict
    macro_topology: dict  # athero / non_athero -> {sparse, dense, empty}
    micro_distribution: dict  # athero / non_athero -> {isolated, clustered, empty}
    counts: dict
    n_particles: int
    timings: dict = field(default_factory=dict)

    @property
    def volumes_um3(self):
        v = self.spacing_um ** 3
        return {k: n * v for k, n in self.voxels.items()}

    def to_dict(self, timings=True):
        d = {"spacing_um": self.spacing_um, "voxels": self.voxels, "volumes_um3": self.volumes_um3,
             "ratios": self.ratios, "macro_topology": self.macro_topology,
             "micro_distribution": self.micro_distribution, "phenotype_counts": self.counts,
             "n_particles": self.n_particles}
        if timings:
            d["timings"] = self.timings
        return d

    def to_json(self, timings=True):
        return json.dumps(self.to_dict(timings), indent=2, sort_keys=True)


def build_report(tissue, lipid, pset, timings=None):
    """Volumetric ratios and phenotype counts from fully classified particles."""
    t_bits = np.asarray(getattr(tissue, "bits", tissue), dtype=np.bool_)
    l_bits = np.asarray(getattr(lipid, "bits", lipid), dtype=np.bool_)
    n_tissue = int(np.count_nonzero(t_bits))
    if n_tissue == 0:
        raise PhenotypeError("zero tissue volume")
    n_lipid = int(np.count_nonzero(l_bits & t_bits))
    ps = [replace(p, phenotype=assign_phenotype(p)) for p in pset.particles]
    # integer voxel sums keep every number independent of particle order
    calc = sum(p.voxel_count for p in ps)
    ath = sum(p.voxel_count for p in ps if p.athero)
    macro = sum(p.voxel_count for p in ps if p.size_class == MACRO)
    clus = sum(p.voxel_count for p in ps if p.size_class == MICRO and p.clustered)

    def macro_split(flag):
        g = [p for p in ps if p.size_class == MACRO and p.athero == flag]
        s = _split(sum(p.sparse_voxels for p in g), sum(p.voxel_count - p.sparse_voxels for p in g))
        return {"sparse": s["fractions"][0], "dense": s["fractions"][1], "empty": s["empty"],
                "voxels": s["voxels"]}

    def micro_split(flag):
        g = [p for p in ps if p.size_class == MICRO and p.athero == flag]
        s = _split(sum(p.voxel_count for p in g if not p.clustered),
                   sum(p.voxel_count for p in g if p.clustered))
        return {"isolated": s["fractions"][0], "clustered": s["fractions"][1],
                "empty": s["empty"], "voxels": s["voxels"]}

    counts = {k: 0 for k in PHENOTYPES}
    for p in ps:
        counts[p.phenotype] += 1
    ratios = {"lipid_to_tissue": n_lipid / n_tissue, "calc_to_tissue": calc / n_tissue,
              "athero_calc_to_calc": _share(ath, calc), "macro_to_calc": _share(macro, calc),
              "clustered_micro_to_calc": _share(clus, calc)}
    return PhenotypeReport(
        spacing_um=pset.spacing_um,
        voxels={"tissue": n_tissue, "lipid": n_lipid, "calcification": calc,
                "athero_calcification": ath, "non_athero_calcification": calc - ath},
        ratios=ratios,
        macro_topology={ATHERO: macro_split(True), NON_ATHERO: macro_split(False)},
        micro_distribution={ATHERO: micro_split(True), NON_ATHERO: micro_split(False)},
        counts=counts,
        n_particles=len(ps),
        timings=timings.to_dict() if timings is not None else {},
    )


def phenotype_volume(pset):
    """uint8 volume: 0 background, 1..8 = index into :data:`PHENOTYPES` plus one."""
    lut = np.zeros(int(pset.labels.max(initial=0)) + 1, np.uint8)
    for p in pset.particles:
        lut[p.id] = PHENOTYPES.index(p.phenotype or assign_phenotype(p)) + 1
    return lut[pset.labels]


def phenotype_particles(pset, lipid, cluster=ClusterParams(), topology=TopologyParams(),
                        overlap_fraction=0.5, mode="overlap", timings=None):
    """Run distribution, topology and co-localisation, then label every particle."""
    from contextlib import nullcontext

    def tick(stage):
        return timings.time(stage) if timings is not None else nullcontext()

    with tick("clustering"):
        pset = classify_micro_distribution(pset, cluster)
    with tick("topology"):
        pset = classify_macros(pset, topology)
    with tick("colocalization"):
        pset = colocalize(pset, lipid, overlap_fraction, mode)
    return assign_all(pset)
