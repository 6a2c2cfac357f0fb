"""Synthetic vessel-wall phantoms with planted ground truth.

Geometry is specified in micrometres. A phantom is an annular tube of tissue
along z holding ellipsoidal lipid pools and calcifications (spherical
micros, macros built from a dense core plus thin spikes and an optional
porous shell). CT-like artifacts are added after rendering: concentric ring
modulation, streak rays from macro centres, Gaussian noise, and a sample
holder bar touching the tissue.

The truth report is computed from the geometry in closed form, never from the
rendered voxels.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import erfc

from .volgrid import BinaryMask, SliceAnnotation, VoxelVolume

BACKGROUND = 0.05
TISSUE = 0.45
LIPID = 0.30
CALCIFICATION = 0.95
HOLDER = 0.45


class PhantomError(ValueError):
    pass


@dataclass
class Tube:
    center_um: tuple = (1280.0, 1280.0)  # (x, y) of the axis at z = 0
    drift_um: tuple = (0.0, 0.0)  # axis displacement accumulated over the full depth
    r_inner_um: float = 400.0
    r_outer_um: float = 1100.0


@dataclass
class LipidPool:
    center_um: tuple  # (x, y, z)
    semi_axes_um: tuple  # (radial, tangential, z)
    angle_rad: float = 0.0  # direction of the radial axis in the xy plane
    blur_um: float = 15.0


@dataclass
class Micro:
    center_um: tuple
    radius_um: float
    cluster: int | None = None


@dataclass
class Spike:
    direction: tuple  # unit-normalised on use
    length_um: float  # beyond the core surface
    radius_um: float


@dataclass
class Shell:
    r_inner_um: float
    r_outer_um: float
    hole_half_angle_deg: float = 0.0  # one conical hole per cube diagonal (8 holes)


@dataclass
class Macro:
    center_um: tuple
    core_radius_um: float
    spikes: list = field(default_factory=list)
    shell: Shell | None = None


@dataclass
class Artifacts:
    noise_sigma: float = 0.0
    ring_amplitude: float = 0.0
    ring_center_um: tuple | None = None  # default: tube axis at z = 0
    ring_period_um: float = 50.0
    streak_count: int = 0
    streak_amplitude: float = 0.0
    streak_width_um: float = 15.0
    holder: bool = False
    holder_width_um: float = 200.0


@dataclass
class PhantomSpec:
    dims: tuple = (128, 128, 128)  # (nx, ny, nz)
    spacing_um: float = 20.0
    tube: Tube = field(default_factory=Tube)
    lipids: list = field(default_factory=list)
    micros: list = field(default_factory=list)
    macros: list = field(default_factory=list)
    artifacts: Artifacts = field(default_factory=Artifacts)
    seed: int = 0

    @property
    def shape(self):
        nx, ny, nz = self.dims
        return (nz, ny, nx)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        art = d.get("artifacts", {})
        return cls(
            dims=tuple(d.get("dims", (128, 128, 128))),
            spacing_um=float(d.get("spacing_um", 20.0)),
            tube=Tube(**d.get("tube", {})),
            lipids=[LipidPool(**l) for l in d.get("lipids", [])],
            micros=[Micro(**m) for m in d.get("micros", [])],
            macros=[Macro(m["center_um"], m["core_radius_um"],
                          [Spike(**s) for s in m.get("spikes", [])],
                          Shell(**m["shell"]) if m.get("shell") else None)
                    for m in d.get("macros", [])],
            artifacts=Artifacts(**art) if isinstance(art, dict) else art,
            seed=int(d.get("seed", 0)),
        )


# ---------------------------------------------------------------- geometry

def _axis(spec, z_um):
    t = spec.tube
    depth = spec.dims[2] * spec.spacing_um
    f = z_um / depth
    return t.center_um[0] + f * t.drift_um[0], t.center_um[1] + f * t.drift_um[1]


def _pool_rho(pool, x, y, z):
    """Normalised ellipsoid radius (1 on the surface)."""
    c, s = math.cos(pool.angle_rad), math.sin(pool.angle_rad)
    dx, dy, dz = x - pool.center_um[0], y - pool.center_um[1], z - pool.center_um[2]
    u = c * dx + s * dy
    v = -s * dx + c * dy
    a, b, h = pool.semi_axes_um
    return np.sqrt((u / a) ** 2 + (v / b) ** 2 + (dz / h) ** 2)


_DIAGONALS = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                      dtype=np.float64) / math.sqrt(3.0)


def _macro_extent(m):
    r = m.core_radius_um
    for sp in m.spikes:
        r = max(r, m.core_radius_um + sp.length_um + sp.radius_um)
    if m.shell is not None:
        r = max(r, m.shell.r_outer_um)
    return r


def _macro_inside(m, dx, dy, dz):
    d2 = dx * dx + dy * dy + dz * dz
    inside = d2 <= m.core_radius_um ** 2
    for sp in m.spikes:
        u = np.asarray(sp.direction, dtype=np.float64)
        u = u / np.linalg.norm(u)
        t = dx * u[0] + dy * u[1] + dz * u[2]
        perp2 = d2 - t * t
        inside |= (t >= 0) & (t <= m.core_radius_um + sp.length_um) & (perp2 <= sp.radius_um ** 2)
    if m.shell is not None:
        sh = m.shell
        ring = (d2 >= sh.r_inner_um ** 2) & (d2 <= sh.r_outer_um ** 2)
        if sh.hole_half_angle_deg > 0:
            cosa = math.cos(math.radians(sh.hole_half_angle_deg))
            r = np.sqrt(np.maximum(d2, 1e-12))
            for u in _DIAGONALS:
                ring &= (dx * u[0] + dy * u[1] + dz * u[2]) / r < cosa
        inside |= ring
    return inside


def macro_truth_volumes(m):
    """Closed-form (dense, sparse) volumes in um^3; dense is the core ball."""
    dense = 4.0 / 3.0 * math.pi * m.core_radius_um ** 3
    sparse = 0.0
    reach = m.shell.r_inner_um if m.shell is not None else None
    for sp in m.spikes:
        end = m.core_radius_um + sp.length_um
        if reach is not None:
            end = min(end, reach)
        sparse += math.pi * sp.radius_um ** 2 * max(0.0, end - m.core_radius_um)
    if m.shell is not None:
        sh = m.shell
        holes = 0.0
        if sh.hole_half_angle_deg > 0:
            holes = len(_DIAGONALS) * (1 - math.cos(math.radians(sh.hole_half_angle_deg))) / 2
        sparse += 4.0 / 3.0 * math.pi * (sh.r_outer_um ** 3 - sh.r_inner_um ** 3) * (1 - holes)
    return dense, sparse


def _athero(spec, center, radius):
    """Whether a structure lies in a pool; a structure straddling a pool boundary is an error."""
    for pool in spec.lipids:
        rho = float(_pool_rho(pool, *center))
        margin = radius / min(pool.semi_axes_um)
        if rho + margin <= 1.0:
            return True
        if rho - margin < 1.0:
            raise PhantomError(f"structure at {center} straddles a lipid pool boundary")
    return False


def _macro_points(m, n=41):
    ext = _macro_extent(m)
    g = np.linspace(-ext, ext, n)
    dx, dy, dz = np.meshgrid(g, g, g, indexing="ij")
    ins = _macro_inside(m, dx, dy, dz)
    return m.center_um[0] + dx[ins], m.center_um[1] + dy[ins], m.center_um[2] + dz[ins]


def _macro_athero(spec, m):
    px, py, pz = _macro_points(m)
    for pool in spec.lipids:
        inside = _pool_rho(pool, px, py, pz) <= 1.0
        if inside.all():
            return True
        if inside.any():
            raise PhantomError(f"structure at {m.center_um} straddles a lipid pool boundary")
    return False


def validate(spec):
    """Check that planted structures sit inside the tissue wall and pools inside tissue."""
    t = spec.tube
    nx, ny, nz = spec.dims
    s = spec.spacing_um
    if min(nx, ny, nz) <= 0 or s <= 0:
        raise PhantomError("degenerate phantom grid")

    def in_wall(c, r):
        ax, ay = _axis(spec, c[2])
        rad = math.hypot(c[0] - ax, c[1] - ay)
        return (rad - r >= t.r_inner_um and rad + r <= t.r_outer_um
                and r <= c[2] <= nz * s - r)

    for m in spec.micros:
        if not in_wall(m.center_um, m.radius_um):
            raise PhantomError(f"planted structure outside tissue: micro at {m.center_um}")
        if 2 * m.radius_um >= 500.0:
            raise PhantomError("a planted micro must have equivalent diameter below 500 um")
    for m in spec.macros:
        # sample the macro's bounding sphere finely enough to catch spikes/shell
        px, py, pz = _macro_points(m)
        ax = np.array([_axis(spec, z) for z in pz]) if len(pz) else np.zeros((0, 2))
        rad = np.hypot(px - ax[:, 0], py - ax[:, 1])
        if np.any(rad < t.r_inner_um) or np.any(rad > t.r_outer_um) or np.any(pz < 0) or \
                np.any(pz > nz * s):
            raise PhantomError(f"planted structure outside tissue: macro at {m.center_um}")
        d, sp = macro_truth_volumes(m)
        if (6 * (d + sp) / math.pi) ** (1 / 3) < 500.0:
            raise PhantomError("a planted macro must have equivalent diameter of at least 500 um")
    for pool in spec.lipids:
        a, b, h = pool.semi_axes_um
        th = np.linspace(0, math.pi, 13)
        ph = np.linspace(0, 2 * math.pi, 25)
        T, P = np.meshgrid(th, ph)
        u, v, w = a * np.sin(T) * np.cos(P), b * np.sin(T) * np.sin(P), h * np.cos(T)
        c, s_ = math.cos(pool.angle_rad), math.sin(pool.angle_rad)
        px = pool.center_um[0] + c * u - s_ * v
        py = pool.center_um[1] + s_ * u + c * v
        pz = pool.center_um[2] + w
        for x, y, z in zip(px.ravel(), py.ravel(), pz.ravel()):
            ax, ay = _axis(spec, z)
            rad = math.hypot(x - ax, y - ay)
            if rad < t.r_inner_um or rad > t.r_outer_um or z < 0 or z > nz * s:
                raise PhantomError(f"planted structure outside tissue: lipid pool at {pool.center_um}")
    for m in spec.micros:
        _athero(spec, m.center_um, m.radius_um)
    for m in spec.macros:
        _macro_athero(spec, m)


# ---------------------------------------------------------------- rendering

@dataclass
class Phantom:
    spec: PhantomSpec
    volume: VoxelVolume
    sample: BinaryMask
    lipid: BinaryMask
    calcification: BinaryMask
    truth: dict

    def annotations(self, zs):
        """Perfect expert markings of the listed slices."""
        return [SliceAnnotation(int(z), self.sample.bits[z], self.lipid.bits[z]) for z in zs]


def annotated_slices(nz, n=25):
    """``n`` uniformly spread slice indices (bin centres)."""
    return [int((k + 0.5) * nz / n) for k in range(n)]


def _render_slice(spec, z, X, Y):
    s = spec.spacing_um
    zc = (z + 0.5) * s
    ax, ay = _axis(spec, zc)
    r = np.hypot(X - ax, Y - ay)
    tissue = (r >= spec.tube.r_inner_um) & (r <= spec.tube.r_outer_um)

    lipid = np.zeros_like(tissue)
    wl = np.zeros(X.shape)
    for pool in spec.lipids:
        if abs(zc - pool.center_um[2]) > pool.semi_axes_um[2] + 4 * pool.blur_um:
            continue
        rho = _pool_rho(pool, X, Y, zc)
        lipid |= rho <= 1.0
        signed = (rho - 1.0) * min(pool.semi_axes_um)
        w = 0.5 * erfc(signed / (max(pool.blur_um, 1e-9) * math.sqrt(2)))
        wl = np.maximum(wl, w)
    lipid &= tissue

    calc = np.zeros_like(tissue)
    for m in spec.micros:
        dz = zc - m.center_um[2]
        if abs(dz) <= m.radius_um:
            calc |= (X - m.center_um[0]) ** 2 + (Y - m.center_um[1]) ** 2 + dz * dz <= m.radius_um ** 2
    for m in spec.macros:
        dz = zc - m.center_um[2]
        if abs(dz) <= _macro_extent(m):
            calc |= _macro_inside(m, X - m.center_um[0], Y - m.center_um[1], np.full(X.shape, dz))
    calc &= tissue

    img = np.full(X.shape, BACKGROUND)
    img[tissue] = TISSUE + (LIPID - TISSUE) * wl[tissue]
    art = spec.artifacts
    if art.holder:
        hx0 = ax + spec.tube.r_outer_um - s
        holder = (X >= hx0) & (np.abs(Y - ay) <= art.holder_width_um / 2) & ~tissue
        img[holder] = HOLDER
    img[calc] = CALCIFICATION
    return img, tissue, lipid, calc


def _artifacts(spec, z, X, Y, img):
    art = spec.artifacts
    zc = (z + 0.5) * spec.spacing_um
    rng = np.random.default_rng([spec.seed, z])
    if art.ring_amplitude:
        cx, cy = art.ring_center_um or spec.tube.center_um
        rr = np.hypot(X - cx, Y - cy)
        img = img + art.ring_amplitude * np.sin(2 * math.pi * rr / art.ring_period_um)
    if art.streak_count and art.streak_amplitude:
        srng = np.random.default_rng([spec.seed, 7919])
        for m in spec.macros:
            ext = _macro_extent(m)
            angles = srng.uniform(0, 2 * math.pi, art.streak_count)
            if abs(zc - m.center_um[2]) > m.core_radius_um:
                continue
            dx, dy = X - m.center_um[0], Y - m.center_um[1]
            for k, a in enumerate(angles):
                ux, uy = math.cos(a), math.sin(a)
                t = dx * ux + dy * uy
                perp = -dx * uy + dy * ux
                sign = 1.0 if k % 2 == 0 else -1.0
                img = img + np.where(t > ext, sign * art.streak_amplitude
                                     * np.exp(-perp ** 2 / (2 * art.streak_width_um ** 2)), 0.0)
    if art.noise_sigma:
        img = img + rng.normal(0.0, art.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


def truth_report(spec):
    """Planted volumes, ratios and phenotype counts from closed-form geometry."""
    t = spec.tube
    depth = spec.dims[2] * spec.spacing_um
    tissue = math.pi * (t.r_outer_um ** 2 - t.r_inner_um ** 2) * depth
    lipid = sum(4.0 / 3.0 * math.pi * np.prod(p.semi_axes_um) for p in spec.lipids)
    counts = {}
    calc = ath = macro = clustered = 0.0
    macros = []

    def bump(key):
        counts[key] = counts.get(key, 0) + 1

    for m in spec.micros:
        v = 4.0 / 3.0 * math.pi * m.radius_um ** 3
        a = _athero(spec, m.center_um, m.radius_um)
        calc += v
        ath += v if a else 0.0
        clustered += v if m.cluster is not None else 0.0
        bump(f"{'athero' if a else 'non-athero'}-{'clustered' if m.cluster is not None else 'isolated'}-micro")
    for m in spec.macros:
        d, sp = macro_truth_volumes(m)
        v = d + sp
        a = _macro_athero(spec, m)
        calc += v
        macro += v
        ath += v if a else 0.0
        macros.append({"center_um": list(m.center_um), "dense_fraction": d / v,
                       "sparse_fraction": sp / v, "athero": a, "d_eq_um": (6 * v / math.pi) ** (1 / 3)})
        bump(f"{'athero' if a else 'non-athero'}-{'sparse' if sp > d else 'dense'}-macro")
    clusters = sorted({m.cluster for m in spec.micros if m.cluster is not None})
    return {
        "volumes_um3": {"tissue": tissue, "lipid": lipid, "calcification": calc},
        "ratios": {"lipid_to_tissue": lipid / tissue, "calc_to_tissue": calc / tissue,
                   "athero_calc_to_calc": ath / calc if calc else 0.0,
                   "macro_to_calc": macro / calc if calc else 0.0,
                   "clustered_micro_to_calc": clustered / calc if calc else 0.0},
        "phenotype_counts": counts,
        "n_particles": len(spec.micros) + len(spec.macros),
        "n_clusters": len(clusters),
        "n_micros": len(spec.micros),
        "n_macros": len(spec.macros),
        "macros": macros,
    }


def generate(spec):
    """Render the phantom volume and its truth masks; deterministic for a seed."""
    validate(spec)
    nz, ny, nx = spec.shape
    s = spec.spacing_um
    X, Y = np.meshgrid((np.arange(nx) + 0.5) * s, (np.arange(ny) + 0.5) * s)
    vol = np.empty((nz, ny, nx), np.float32)
    sample = np.empty((nz, ny, nx), np.bool_)
    lipid = np.empty_like(sample)
    calc = np.empty_like(sample)
    for z in range(nz):
        img, sample[z], lipid[z], calc[z] = _render_slice(spec, z, X, Y)
        vol[z] = _artifacts(spec, z, X, Y, img)
    return Phantom(spec, VoxelVolume(vol, s), BinaryMask(sample, s), BinaryMask(lipid, s),
                   BinaryMask(calc, s), truth_report(spec))


# ---------------------------------------------------------------- standard layouts

FIELD_UM = 2560.0


def _cyl(angle_deg, radius_um, z_um, tube=Tube()):
    a = math.radians(angle_deg)
    return (tube.center_um[0] + radius_um * math.cos(a),
            tube.center_um[1] + radius_um * math.sin(a), z_um)


def _tangent_frame(angle_deg):
    a = math.radians(angle_deg)
    radial = np.array([math.cos(a), math.sin(a), 0.0])
    tangent = np.array([-math.sin(a), math.cos(a), 0.0])
    return radial, tangent, np.array([0.0, 0.0, 1.0])


def _cluster(center, radial, tangent, zhat, spacing_um, radius_um, cid):
    """Five micros: one centre plus four on a square in the wall's tangent plane."""
    c = np.asarray(center)
    pts = [c] + [c + spacing_um * d for d in (tangent, -tangent, zhat, -zhat)]
    return [Micro(tuple(float(v) for v in p), radius_um, cid) for p in pts]


def standard_spec(size=256, seed=0, artifacts=True):
    """The reference phantom: two pools, two macros (core + sparse parts), seven clusters.

    The physical layout is fixed (2560 um field of view); ``size`` only sets the
    voxel grid, so spacing is ``2560 / size`` um.
    """
    s = FIELD_UM / size
    tube = Tube()
    lipids = [
        LipidPool(_cyl(0, 750, 700), (330, 600, 600), math.radians(0), blur_um=20.0),
        LipidPool(_cyl(120, 750, 1750), (330, 500, 480), math.radians(120), blur_um=20.0),
    ]
    rA, tA, zA = _tangent_frame(0)
    macro_a = Macro(_cyl(0, 750, 700), 270.0,
                    [Spike(tuple(d), 230.0, 30.0) for d in (tA, -tA, zA, -zA)])
    macro_b = Macro(_cyl(240, 750, 1850), 180.0,
                    [Spike(tuple(d), 110.0, 20.0) for d in np.vstack([np.eye(3), -np.eye(3)])],
                    Shell(280.0, 330.0, 18.2))
    micros = []
    mr = 35.0
    gap = 120.0
    cid = 0
    # three clusters and two isolated micros inside pool B (athero)
    rB, tB, zB = _tangent_frame(120)
    for dt, dz in ((-230, -170), (0, 170), (240, -160)):
        c = np.array(_cyl(120, 750, 1750)) + dt * tB + dz * zB
        micros += _cluster(c, rB, tB, zB, gap, mr, cid)
        cid += 1
    for dt, dz, dr in ((-280, 170, 100), (280, 200, -100)):
        # off the clusters' tangent plane, > eps from every cluster member
        c = np.array(_cyl(120, 750, 1750)) + dt * tB + dz * zB + dr * rB
        micros.append(Micro(tuple(float(v) for v in c), mr, None))
    # four clusters outside pools (non-athero)
    for ang, z in ((60, 300), (180, 900), (300, 1300), (60, 2250)):
        r_, t_, z_ = _tangent_frame(ang)
        micros += _cluster(_cyl(ang, 750, z), r_, t_, z_, gap, mr, cid)
        cid += 1
    # isolated non-athero micros
    for ang, z in ((180, 300), (300, 600), (180, 2200), (300, 2300)):
        micros.append(Micro(_cyl(ang, 750, z), mr, None))
    art = Artifacts()
    if artifacts:
        art = Artifacts(noise_sigma=0.03, ring_amplitude=0.06, ring_period_um=50.0,
                        streak_count=6, streak_amplitude=0.08, streak_width_um=15.0,
                        holder=True, holder_width_um=200.0)
    return PhantomSpec(dims=(size, size, size), spacing_um=s, tube=tube, lipids=lipids,
                       micros=micros, macros=[macro_a, macro_b], artifacts=art, seed=seed)


@dataclass
class CollagenPhantom:
    collagen: BinaryMask
    calcification: BinaryMask
    planted_c: list  # (center_um, "C1"|"C2", clustered)
    window_um: float


def collagen_phantom(size=120, spacing_um=5.0, window_um=60.0, low_fraction=0.1,
                     high_fraction=0.6, micro_radius_um=10.0, seed=0):
    """Collagen field (low density for x below half the width) with micros planted so
    that dense micro clusters sit only in low-collagen space and isolated micros
    only in high-collagen space."""
    rng = np.random.default_rng(seed)
    n = size
    L = n * spacing_um
    half = L / 2
    x = (np.arange(n) + 0.5) * spacing_um
    frac = np.where(x < half, low_fraction, high_fraction)
    collagen = rng.random((n, n, n)) < frac[None, None, :]
    centers = []
    # clusters in the low half: 4 clusters of 6 micros spaced 40 um apart
    for cy, cz in ((150, 150), (150, 450), (450, 150), (450, 450)):
        base = np.array([half / 2, cy, cz])
        offs = [(0, 0, 0), (40, 0, 0), (-40, 0, 0), (0, 40, 0), (0, -40, 0), (0, 0, 40)]
        centers += [(tuple(base + o), "C1", True) for o in offs]
    # isolated micros in the high half on a 150 um lattice
    for ix in (half + 75, half + 225):
        for iy in (75, 225, 375, 525):
            for iz in (75, 225, 375, 525):
                if len([c for c in centers if not c[2]]) >= 24:
                    break
                centers.append(((ix, iy, iz), "C2", False))
    zz, yy, xx = np.meshgrid((np.arange(n) + 0.5) * spacing_um, (np.arange(n) + 0.5) * spacing_um,
                             (np.arange(n) + 0.5) * spacing_um, indexing="ij", sparse=True)
    calc = np.zeros((n, n, n), np.bool_)
    for (cx, cy, cz), _, _ in centers:
        calc |= (xx - cx) ** 2 + (yy - cy) ** 2 + (zz - cz) ** 2 <= micro_radius_um ** 2
    return CollagenPhantom(BinaryMask(collagen, spacing_um), BinaryMask(calc, spacing_um),
                           centers, window_um)
