"""Voxel volumes, binary masks and their on-disk form.

Arrays are held as ``(nz, ny, nx)`` C-ordered numpy arrays, so the flat
memory order is x fastest, then y, then z, matching the raw file layout.
A raw file ``foo.raw`` is always paired with a JSON sidecar ``foo.json``::

    {"nx": 64, "ny": 64, "nz": 32, "dtype": "uint8", "spacing_um": 3.0}
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_SPACING_UM = 3.0
SIDECAR_FIELDS = ("nx", "ny", "nz", "dtype", "spacing_um")
_RAW_DTYPES = {"uint8": "<u1", "uint16": "<u2", "float32": "<f4", "float64": "<f8"}
_IMAGE_SUFFIXES = {".png", ".tif", ".tiff", ".bmp", ".pgm"}


class VolumeFormatError(ValueError):
    """Raised for malformed stacks, sidecars or mask files."""


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class VoxelVolume:
    """Grayscale stack with intensities in [0, 1] and isotropic spacing."""

    intensities: np.ndarray
    spacing_um: float = DEFAULT_SPACING_UM
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        a = np.asarray(self.intensities)
        if a.ndim != 3 or min(a.shape) <= 0:
            raise VolumeFormatError(f"degenerate dimensions {a.shape}")
        if not np.issubdtype(a.dtype, np.floating):
            a = a.astype(np.float32)
        if not np.all(np.isfinite(a)) or a.min() < 0 or a.max() > 1:
            raise VolumeFormatError("intensities must be finite and lie in [0, 1]")
        if not self.spacing_um > 0:
            raise VolumeFormatError(f"spacing_um must be positive, got {self.spacing_um}")
        object.__setattr__(self, "intensities", _frozen(a))
        object.__setattr__(self, "spacing_um", float(self.spacing_um))

    @property
    def shape(self):
        return self.intensities.shape

    @property
    def nz(self):
        return self.shape[0]

    @property
    def ny(self):
        return self.shape[1]

    @property
    def nx(self):
        return self.shape[2]

    def slice(self, z):
        return self.intensities[z]


@dataclass(frozen=True)
class BinaryMask:
    """Per-voxel boolean labelling on a volume grid."""

    bits: np.ndarray
    spacing_um: float = DEFAULT_SPACING_UM

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 3 or min(b.shape) <= 0:
            raise VolumeFormatError(f"degenerate dimensions {b.shape}")
        object.__setattr__(self, "bits", _frozen(b.astype(np.bool_, copy=False)))
        object.__setattr__(self, "spacing_um", float(self.spacing_um))

    @property
    def shape(self):
        return self.bits.shape

    def count(self):
        return int(np.count_nonzero(self.bits))

    def matches(self, other):
        return self.shape == other.shape

    @classmethod
    def like(cls, volume, bits=None):
        if bits is None:
            bits = np.zeros(volume.shape, np.bool_)
        bits = np.asarray(bits)
        if bits.shape != volume.shape:
            raise VolumeFormatError(f"mask shape {bits.shape} != volume shape {volume.shape}")
        return cls(bits, volume.spacing_um)


@dataclass(frozen=True)
class SliceAnnotation:
    """Expert marking of one slice: sample region and the lipid pool inside it."""

    z: int
    sample_mask: np.ndarray
    lipid_mask: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sample_mask, dtype=np.bool_)
        l = np.asarray(self.lipid_mask, dtype=np.bool_)
        if s.shape != l.shape or s.ndim != 2:
            raise VolumeFormatError("sample and lipid masks must be 2D with equal shape")
        if np.any(l & ~s):
            raise VolumeFormatError(f"slice {self.z}: lipid pixels outside the sample")
        object.__setattr__(self, "sample_mask", _frozen(s))
        object.__setattr__(self, "lipid_mask", _frozen(l))

    def check_against(self, volume):
        if not 0 <= self.z < volume.nz:
            raise VolumeFormatError(f"annotation z={self.z} outside [0, {volume.nz})")
        if self.sample_mask.shape != (volume.ny, volume.nx):
            raise VolumeFormatError(
                f"annotation z={self.z} has shape {self.sample_mask.shape}, "
                f"expected {(volume.ny, volume.nx)}")


def normalize(raw):
    """Global min-max scaling to [0, 1]; a constant stack maps to all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros(raw.shape, np.float32)
    return ((raw - lo) / (hi - lo)).astype(np.float32)


def sidecar_path(path):
    return Path(path).with_suffix(".json")


def read_sidecar(path):
    path = Path(path)
    if not path.exists():
        raise VolumeFormatError(f"missing sidecar {path}")
    meta = json.loads(path.read_text())
    missing = [k for k in SIDECAR_FIELDS if k not in meta]
    if missing:
        raise VolumeFormatError(f"sidecar {path} lacks fields: {', '.join(missing)}")
    if "spacing_um_xyz" in meta:
        sx, sy, sz = meta["spacing_um_xyz"]
        if not (sx == sy == sz):
            raise VolumeFormatError("anisotropic spacing is not supported")
    if meta["dtype"] not in _RAW_DTYPES:
        raise VolumeFormatError(f"unsupported dtype {meta['dtype']!r}")
    return meta


def write_sidecar(path, shape, dtype, spacing_um, **extra):
    nz, ny, nx = shape
    meta = {"nx": nx, "ny": ny, "nz": nz, "dtype": dtype, "spacing_um": float(spacing_um)}
    meta.update(extra)
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return meta


def read_raw(path, meta=None):
    """Read a raw volume verbatim (no normalization) as an (nz, ny, nx) array."""
    path = Path(path)
    meta = meta if meta is not None else read_sidecar(sidecar_path(path))
    dt = np.dtype(_RAW_DTYPES[meta["dtype"]])
    shape = (int(meta["nz"]), int(meta["ny"]), int(meta["nx"]))
    if min(shape) <= 0:
        raise VolumeFormatError(f"degenerate dimensions {shape}")
    data = np.fromfile(path, dtype=dt)
    if data.size != np.prod(shape):
        raise VolumeFormatError(
            f"voxel count mismatch: sidecar declares {np.prod(shape)}, file holds {data.size}")
    return data.reshape(shape), meta


def _load_image_dir(path):
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not files:
        raise VolumeFormatError(f"no slice images in {path}")
    from PIL import Image

    slices = []
    for f in files:
        a = np.asarray(Image.open(f))
        if a.ndim != 2:
            raise VolumeFormatError(f"{f.name}: expected a single-channel image")
        if slices and a.shape != slices[0].shape:
            raise VolumeFormatError(
                f"slice-dimension mismatch: {f.name} is {a.shape}, expected {slices[0].shape}")
        slices.append(a)
    return np.stack(slices)


def load_stack(path, meta=None):
    """Load a grayscale stack and normalise it globally to [0, 1].

    Parameters
    ----------
    path : str or Path
        Either a directory of equally sized 8/16-bit slice images (z order is
        the lexicographic filename order) or a raw little-endian volume.
    meta : dict or str or Path, optional
        Sidecar descriptor, or the path to one. Defaults to ``path`` with a
        ``.json`` suffix for raw files. For image directories it is optional
        and only supplies ``spacing_um``.
    """
    path = Path(path)
    if isinstance(meta, (str, os.PathLike)):
        meta = read_sidecar(meta)
    if path.is_dir():
        raw = _load_image_dir(path)
        if meta is None and sidecar_path(path).exists():
            meta = read_sidecar(sidecar_path(path))
        spacing = float(meta["spacing_um"]) if meta else DEFAULT_SPACING_UM
    else:
        if meta is None:
            meta = read_sidecar(sidecar_path(path))
        else:
            missing = [k for k in SIDECAR_FIELDS if k not in meta]
            if missing:
                raise VolumeFormatError(f"sidecar lacks fields: {', '.join(missing)}")
        raw, meta = read_raw(path, meta)
        spacing = float(meta["spacing_um"])
        if meta.get("kind") == "mask":
            return VoxelVolume((raw != 0).astype(np.float32), spacing, meta=dict(meta))
        if meta.get("normalized"):
            return VoxelVolume(raw.astype(np.float32), spacing, meta=dict(meta))
    return VoxelVolume(normalize(raw), spacing, meta=dict(meta or {}))


def save_volume(volume, path, dtype="float32"):
    """Write intensities as raw samples plus sidecar.

    ``float32`` files are flagged as already normalised so that
    :func:`load_stack` returns the same values; integer dtypes are rescaled
    and renormalised on load.
    """
    a = np.asarray(volume.intensities, dtype=np.float64)
    if dtype == "uint8":
        a = np.round(a * 255)
    elif dtype == "uint16":
        a = np.round(a * 65535)
    path = Path(path)
    a.astype(_RAW_DTYPES[dtype]).tofile(path)
    extra = {"normalized": True} if dtype in ("float32", "float64") else {}
    write_sidecar(sidecar_path(path), volume.shape, dtype, volume.spacing_um, **extra)


def save_mask(mask, path, **extra):
    """Write a mask as one 0/255 byte per voxel plus its sidecar."""
    bits = np.asarray(mask.bits)
    if bits.ndim != 3 or min(bits.shape) <= 0:
        raise VolumeFormatError(f"degenerate dimensions {bits.shape}")
    path = Path(path)
    try:
        (bits.astype(np.uint8) * 255).tofile(path)
    except OSError as exc:
        raise OSError(f"cannot write mask to {path}: {exc}") from exc
    write_sidecar(sidecar_path(path), bits.shape, "uint8", mask.spacing_um, kind="mask", **extra)


def load_mask(path):
    """Inverse of :func:`save_mask`; any nonzero byte is a set voxel."""
    raw, meta = read_raw(path)
    return BinaryMask(raw != 0, float(meta["spacing_um"]))


def save_annotations(annotations, outdir, spacing_um=DEFAULT_SPACING_UM):
    """Write one PNG pair per annotated slice and a ``manifest.json`` indexing them."""
    from PIL import Image

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for a in sorted(annotations, key=lambda a: a.z):
        names = {}
        for kind, m in (("sample", a.sample_mask), ("lipid", a.lipid_mask)):
            names[kind] = f"{kind}_{a.z:05d}.png"
            Image.fromarray(m.astype(np.uint8) * 255).save(out / names[kind])
        entries.append({"z": int(a.z), **names})
    manifest = {"spacing_um": float(spacing_um), "slices": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _read_mask2d(path, shape):
    if path.suffix.lower() == ".raw":
        if shape is None:
            raise VolumeFormatError(f"{path.name}: raw masks need 'shape' in the manifest")
        data = np.fromfile(path, np.uint8)
        if data.size != shape[0] * shape[1]:
            raise VolumeFormatError(f"{path.name}: voxel count mismatch")
        return data.reshape(shape) != 0
    from PIL import Image

    a = np.asarray(Image.open(path))
    if a.ndim != 2:
        raise VolumeFormatError(f"{path.name}: expected a single-channel mask")
    return a != 0


def load_annotations(manifest_path):
    """Read the annotation set indexed by a manifest written by :func:`save_annotations`.

    Manifest entries are ``{"z": int, "sample": file, "lipid": file}`` with files
    relative to the manifest; PNG or 2D raw bytes (then ``"shape": [ny, nx]``
    is required at the top level).
    """
    path = Path(manifest_path)
    if not path.is_file():
        raise VolumeFormatError(f"annotation manifest {path} not found")
    try:
        manifest = json.loads(path.read_text())
        entries = manifest["slices"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise VolumeFormatError(f"malformed annotation manifest {path}: {exc}") from exc
    shape = tuple(manifest["shape"]) if "shape" in manifest else None
    anns = []
    for e in entries:
        s = _read_mask2d(path.parent / e["sample"], shape)
        l = _read_mask2d(path.parent / e["lipid"], shape)
        anns.append(SliceAnnotation(int(e["z"]), s, l))
    return anns
