"""Numba-compiled voxel and point kernels.

Every function here has a drop-in twin in :mod:`._numpy` with the same
signature and bit-identical results.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


@njit(cache=True)
def _union(parent, a, b):
    ra = _find(parent, a)
    rb = _find(parent, b)
    if ra == rb:
        return ra
    # keep the smaller root so roots stay ordered by first appearance
    if ra < rb:
        parent[rb] = ra
        return ra
    parent[ra] = rb
    return rb


@njit(cache=True)
def label_components(mask, offsets):
    """Two-pass union-find labeling over a z-major boolean volume.

    ``offsets`` holds the backward half of the neighbourhood as (dz, dy, dx)
    rows. Labels are dense from 1 and ordered by each component's first voxel
    in z-major scan order.
    """
    nz, ny, nx = mask.shape
    labels = np.zeros((nz, ny, nx), np.int32)
    cap = 1024
    parent = np.empty(cap, np.int64)
    nprov = 0
    noff = offsets.shape[0]
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if not mask[z, y, x]:
                    continue
                cur = -1
                for k in range(noff):
                    zz = z + offsets[k, 0]
                    yy = y + offsets[k, 1]
                    xx = x + offsets[k, 2]
                    if zz < 0 or yy < 0 or xx < 0 or yy >= ny or xx >= nx:
                        continue
                    lab = labels[zz, yy, xx]
                    if lab == 0:
                        continue
                    if cur == -1:
                        cur = _find(parent, lab - 1)
                    else:
                        cur = _union(parent, cur, lab - 1)
                if cur == -1:
                    if nprov == cap:
                        cap *= 2
                        grown = np.empty(cap, np.int64)
                        grown[:nprov] = parent[:nprov]
                        parent = grown
                    parent[nprov] = nprov
                    cur = nprov
                    nprov += 1
                labels[z, y, x] = cur + 1
    final = np.zeros(nprov, np.int32)
    count = 0
    for i in range(nprov):
        r = _find(parent, i)
        if r == i:
            count += 1
            final[i] = count
    for i in range(nprov):
        final[i] = final[_find(parent, i)]
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                lab = labels[z, y, x]
                if lab:
                    labels[z, y, x] = final[lab - 1]
    return labels, count


@njit(cache=True)
def component_stats(labels, n):
    """Voxel counts, coordinate sums (z, y, x) and inclusive bounding boxes."""
    nz, ny, nx = labels.shape
    counts = np.zeros(n + 1, np.int64)
    sums = np.zeros((n + 1, 3), np.float64)
    lo = np.full((n + 1, 3), np.iinfo(np.int64).max, np.int64)
    hi = np.full((n + 1, 3), -1, np.int64)
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                lab = labels[z, y, x]
                if lab == 0:
                    continue
                counts[lab] += 1
                sums[lab, 0] += z
                sums[lab, 1] += y
                sums[lab, 2] += x
                if z < lo[lab, 0]:
                    lo[lab, 0] = z
                if y < lo[lab, 1]:
                    lo[lab, 1] = y
                if x < lo[lab, 2]:
                    lo[lab, 2] = x
                if z > hi[lab, 0]:
                    hi[lab, 0] = z
                if y > hi[lab, 1]:
                    hi[lab, 1] = y
                if x > hi[lab, 2]:
                    hi[lab, 2] = x
    return counts, sums, lo, hi


@njit(cache=True)
def count_in_mask(labels, n, mask):
    """Per-label count of voxels that are also set in ``mask``."""
    nz, ny, nx = labels.shape
    out = np.zeros(n + 1, np.int64)
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                lab = labels[z, y, x]
                if lab and mask[z, y, x]:
                    out[lab] += 1
    return out


@njit(cache=True)
def block_sums(mask, w):
    """True-voxel sums and voxel counts over non-overlapping w-cubes."""
    nz, ny, nx = mask.shape
    gz = (nz + w - 1) // w
    gy = (ny + w - 1) // w
    gx = (nx + w - 1) // w
    sums = np.zeros((gz, gy, gx), np.int64)
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if mask[z, y, x]:
                    sums[z // w, y // w, x // w] += 1
    sizes = np.zeros((gz, gy, gx), np.int64)
    for i in range(gz):
        dz = min(w, nz - i * w)
        for j in range(gy):
            dy = min(w, ny - j * w)
            for k in range(gx):
                sizes[i, j, k] = dz * dy * min(w, nx - k * w)
    return sums, sizes


@njit(cache=True)
def dbscan_labels(points, eps, min_pts):
    """Density clustering; -1 marks noise, clusters numbered by lowest member index.

    A border point joins the cluster of its lowest-index core neighbour.
    """
    n = points.shape[0]
    d = points.shape[1]
    eps2 = eps * eps
    nbr = np.zeros(n, np.int64)
    for i in range(n):
        for j in range(n):
            s = 0.0
            for k in range(d):
                t = points[i, k] - points[j, k]
                s += t * t
            if s <= eps2:
                nbr[i] += 1
    core = nbr >= min_pts
    parent = np.arange(n)
    for i in range(n):
        if not core[i]:
            continue
        for j in range(i + 1, n):
            if not core[j]:
                continue
            s = 0.0
            for k in range(d):
                t = points[i, k] - points[j, k]
                s += t * t
            if s <= eps2:
                _union(parent, i, j)
    owner = np.full(n, -1, np.int64)
    for i in range(n):
        if core[i]:
            owner[i] = _find(parent, i)
            continue
        for j in range(n):
            if not core[j]:
                continue
            s = 0.0
            for k in range(d):
                t = points[i, k] - points[j, k]
                s += t * t
            if s <= eps2:
                owner[i] = _find(parent, j)
                break
    remap = np.full(n, -1, np.int64)
    labels = np.full(n, -1, np.int64)
    nclus = 0
    for i in range(n):
        o = owner[i]
        if o < 0:
            continue
        if remap[o] < 0:
            remap[o] = nclus
            nclus += 1
        labels[i] = remap[o]
    return labels, core
