"""Pure numpy/scipy twins of :mod:`._numba`."""
import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


def label_components(mask, offsets):
    full = len(offsets) == 13
    structure = ndimage.generate_binary_structure(3, 3 if full else 1)
    raw, count = ndimage.label(mask, structure=structure)
    raw = raw.astype(np.int32, copy=False)
    if count == 0:
        return raw, 0
    flat = raw.ravel()
    idx = np.flatnonzero(flat)
    _, first = np.unique(flat[idx], return_index=True)
    # scipy numbers components in its own order; renumber by first voxel
    order = np.argsort(first, kind="stable")
    remap = np.zeros(count + 1, np.int32)
    remap[order + 1] = np.arange(1, count + 1, dtype=np.int32)
    return remap[raw], count


def component_stats(labels, n):
    z, y, x = np.nonzero(labels)
    lab = labels[z, y, x]
    counts = np.bincount(lab, minlength=n + 1).astype(np.int64)
    sums = np.stack([np.bincount(lab, weights=c.astype(np.float64), minlength=n + 1)
                     for c in (z, y, x)], axis=1)
    lo = np.full((n + 1, 3), np.iinfo(np.int64).max, np.int64)
    hi = np.full((n + 1, 3), -1, np.int64)
    for i, sl in enumerate(ndimage.find_objects(labels, max_label=n), start=1):
        if sl is None:
            continue
        lo[i] = [s.start for s in sl]
        hi[i] = [s.stop - 1 for s in sl]
    return counts, sums, lo, hi


def count_in_mask(labels, n, mask):
    return np.bincount(labels[mask & (labels > 0)], minlength=n + 1).astype(np.int64)


def block_sums(mask, w):
    nz, ny, nx = mask.shape
    g = [(s + w - 1) // w for s in mask.shape]
    pad = [(0, gi * w - s) for gi, s in zip(g, mask.shape)]
    m = np.pad(mask.astype(np.int64), pad)
    sums = m.reshape(g[0], w, g[1], w, g[2], w).sum(axis=(1, 3, 5))
    ones = np.pad(np.ones(mask.shape, np.int64), pad)
    sizes = ones.reshape(g[0], w, g[1], w, g[2], w).sum(axis=(1, 3, 5))
    return sums, sizes


def _within(points, rows, eps2):
    d2 = np.zeros((len(rows), len(points)))
    for k in range(points.shape[1]):
        t = points[rows, k][:, None] - points[None, :, k]
        d2 += t * t
    return d2 <= eps2


def dbscan_labels(points, eps, min_pts, chunk=512):
    n = len(points)
    eps2 = eps * eps
    nbr = np.zeros(n, np.int64)
    ii, jj = [], []
    for start in range(0, n, chunk):
        rows = np.arange(start, min(n, start + chunk))
        hit = _within(points, rows, eps2)
        nbr[rows] = hit.sum(axis=1)
        r, c = np.nonzero(hit)
        ii.append(rows[r])
        jj.append(c)
    core = nbr >= min_pts
    ii = np.concatenate(ii) if ii else np.zeros(0, np.int64)
    jj = np.concatenate(jj) if jj else np.zeros(0, np.int64)
    both = core[ii] & core[jj]
    graph = coo_matrix((np.ones(both.sum()), (ii[both], jj[both])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    owner = np.full(n, -1, np.int64)
    owner[core] = comp[core]
    # border: component of the lowest-index core neighbour (pairs are row-major sorted)
    border = ~core[ii] & core[jj]
    bi, bj = ii[border], jj[border]
    first = np.unique(bi, return_index=True)
    owner[first[0]] = comp[bj[first[1]]]
    labels = np.full(n, -1, np.int64)
    seen = {}
    for i in np.flatnonzero(owner >= 0):
        labels[i] = seen.setdefault(owner[i], len(seen))
    return labels, core
