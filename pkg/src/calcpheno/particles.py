"""Calcification particles: 3D labelling, volumes and micro/macro size classes."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels

MICRO = "micro"
MACRO = "macro"
SIZE_THRESHOLD_UM = 500.0
MIN_VOLUME_VOXELS = 8


def equivalent_diameter(volume_um3):
    """Diameter of the sphere with the given volume."""
    return (6.0 * volume_um3 / math.pi) ** (1.0 / 3.0)


@dataclass
class Particle:
    id: int
    voxel_count: int
    volume_um3: float
    centroid_um: tuple  # (x, y, z), voxel centres at (i + 0.5) * spacing
    d_eq_um: float
    bbox: tuple  # ((z0, y0, x0), (z1, y1, x1)) inclusive voxel indices
    size_class: str | None = None
    athero: bool | None = None
    lipid_fraction: float | None = None
    cluster_id: int | None = None
    clustered: bool | None = None
    sparse_voxels: int = 0
    sparse_fraction: float = 0.0
    dense_fraction: float = 0.0
    topology_done: bool = False
    collagen_label: str | None = None
    phenotype: str | None = None

    @property
    def is_micro(self):
        return self.size_class == MICRO


@dataclass
class ParticleSet:
    particles: list
    labels: np.ndarray  # int32 (nz, ny, nx), 0 = background, otherwise particle id
    spacing_um: float
    size_threshold_um: float = SIZE_THRESHOLD_UM
    min_volume_voxels: int = MIN_VOLUME_VOXELS
    connectivity: int = 26
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.labels.shape

    def __len__(self):
        return len(self.particles)

    def __iter__(self):
        return iter(self.particles)

    def by_id(self):
        return {p.id: p for p in self.particles}

    def with_particles(self, particles, labels=None):
        return replace(self, particles=list(particles),
                       labels=self.labels if labels is None else labels)

    def crop(self, p, pad=0):
        """Boolean mask of particle ``p`` within its (padded) bounding box, plus the box origin."""
        (z0, y0, x0), (z1, y1, x1) = p.bbox
        sub = self.labels[z0:z1 + 1, y0:y1 + 1, x0:x1 + 1] == p.id
        if pad:
            sub = np.pad(sub, pad)
        return sub, (z0 - pad, y0 - pad, x0 - pad)


def connected_components(mask, spacing_um=None, connectivity=26,
                         size_threshold_um=SIZE_THRESHOLD_UM, min_volume_voxels=MIN_VOLUME_VOXELS):
    """Label connected true voxels and measure each component.

    Labels are dense from 1, ordered by each component's first voxel in
    z-major scan order.

    Returns
    -------
    labels : ndarray of int32
    ParticleSet
    """
    bits = np.asarray(getattr(mask, "bits", mask), dtype=np.bool_)
    if spacing_um is None:
        spacing_um = getattr(mask, "spacing_um", 3.0)
    labels, n = kernels.label_components(bits, connectivity)
    counts, sums, lo, hi = kernels.component_stats(labels, n)
    v1 = float(spacing_um) ** 3
    out = []
    for i in range(1, n + 1):
        c = int(counts[i])
        mean_zyx = sums[i] / c
        cen = tuple(float((mean_zyx[k] + 0.5) * spacing_um) for k in (2, 1, 0))
        vol = c * v1
        out.append(Particle(i, c, vol, cen, equivalent_diameter(vol),
                            (tuple(int(v) for v in lo[i]), tuple(int(v) for v in hi[i]))))
    pset = ParticleSet(out, labels, float(spacing_um), size_threshold_um, min_volume_voxels,
                       connectivity)
    return labels, pset


def filter_min_volume(pset):
    """Drop particles smaller than ``min_volume_voxels``; surviving ids are kept."""
    if pset.min_volume_voxels < 1:
        raise ValueError("min_volume_voxels must be >= 1")
    keep = [p for p in pset.particles if p.voxel_count >= pset.min_volume_voxels]
    if len(keep) == len(pset.particles):
        return pset.with_particles(keep)
    lut = np.zeros(int(pset.labels.max(initial=0)) + 1, np.int32)
    for p in keep:
        lut[p.id] = p.id
    return pset.with_particles(keep, lut[pset.labels])


def classify_size(pset):
    """Micro iff the equivalent diameter is strictly below the threshold."""
    t = pset.size_threshold_um
    return pset.with_particles(
        [replace(p, size_class=MICRO if p.d_eq_um < t else MACRO) for p in pset.particles])


def extract_particles(mask, spacing_um=None, connectivity=26,
                      size_threshold_um=SIZE_THRESHOLD_UM, min_volume_voxels=MIN_VOLUME_VOXELS):
    """Label, filter and size-classify in one call."""
    _, pset = connected_components(mask, spacing_um, connectivity, size_threshold_um,
                                   min_volume_voxels)
    return classify_size(filter_min_volume(pset))


CSV_FIELDS = ["id", "voxel_count", "volume_um3", "d_eq_um", "centroid_x_um", "centroid_y_um",
              "centroid_z_um", "size_class", "athero", "lipid_fraction", "cluster_id",
              "sparse_fraction", "dense_fraction", "collagen_label", "phenotype"]


def particle_rows(pset):
    for p in sorted(pset.particles, key=lambda q: q.id):
        cx, cy, cz = p.centroid_um
        yield {"id": p.id, "voxel_count": p.voxel_count, "volume_um3": f"{p.volume_um3:.6f}",
               "d_eq_um": f"{p.d_eq_um:.6f}", "centroid_x_um": f"{cx:.6f}",
               "centroid_y_um": f"{cy:.6f}", "centroid_z_um": f"{cz:.6f}",
               "size_class": p.size_class or "",
               "athero": "" if p.athero is None else int(p.athero),
               "lipid_fraction": "" if p.lipid_fraction is None else f"{p.lipid_fraction:.6f}",
               "cluster_id": "" if p.cluster_id is None else p.cluster_id,
               "sparse_fraction": f"{p.sparse_fraction:.6f}",
               "dense_fraction": f"{p.dense_fraction:.6f}",
               "collagen_label": p.collagen_label or "", "phenotype": p.phenotype or ""}


def write_particle_csv(pset, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        w.writerows(particle_rows(pset))
