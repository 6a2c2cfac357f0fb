"""Two-stage semi-automatic segmentation of sample and lipid pool.

Stage one (sample) separates tissue from background; its prediction is the
foreground-pass filter for stage two (lipid), which only ever sees pixels
predicted as sample. Each stage has its own conv extractor and MLP. The MLP
inputs per pixel are::

    [conv_prob, thresh_bit, x/nx, y/ny, z/nz, intensity]
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from ..optim import (LbfgsConfig, MlpParams, TrainingBatch, lbfgs_minimize, mlp_forward,
                     mlp_loss_grad)
from ..volgrid import BinaryMask, VolumeFormatError
from .convnet import ConvExtractor, train_extractor

log = logging.getLogger(__name__)

SAMPLE, LIPID = "sample", "lipid"
N_FEATURES = 6
FEATURE_NAMES = ("conv_prob", "thresh_bit", "x_norm", "y_norm", "z_norm", "intensity")


class SegmentationError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    annotated: list
    patience_sample: int = 45
    patience_lipid: int = 15
    pixel_cap: int = 200_000
    val_pixel_cap: int | None = None
    sample_feature_threshold: float | None = None
    lipid_feature_threshold: float | None = None
    seed: int = 0
    hidden: int = 500
    max_epochs: int = 300
    extractor_iters: int = 40
    history_m: int = 10
    min_component_fraction: float = 0.001
    fill_lipid_holes: bool = True
    bright_cutoff: float | None = 0.7
    lipid_min_fraction: float = 2e-4
    threads: int = 1

    def __post_init__(self):
        self.annotated = sorted(self.annotated, key=lambda a: a.z)
        if len(self.annotated) < 2:
            raise ValueError("need at least two annotated slices")
        zs = [a.z for a in self.annotated]
        if len(set(zs)) != len(zs):
            raise ValueError("duplicate annotated slice indices")

    def patience(self, stage):
        return self.patience_sample if stage == SAMPLE else self.patience_lipid


def split_train_val(annotated):
    """Alternate slices in z order: 1st to training, 2nd to validation, and so on."""
    ann = sorted(annotated, key=lambda a: a.z)
    if len(ann) < 2:
        raise ValueError("need at least two annotated slices to split")
    return ann[0::2], ann[1::2]


def uniform_subset(annotated, n):
    """``n`` slices spread evenly (by rank) over the annotated set, ends included."""
    ann = sorted(annotated, key=lambda a: a.z)
    if not 2 <= n <= len(ann):
        raise ValueError(f"cannot pick {n} of {len(ann)} slices")
    idx = np.round(np.linspace(0, len(ann) - 1, n)).astype(int)
    return [ann[i] for i in idx]


def _otsu(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0 or values.min() == values.max():
        return float(values.mean()) if values.size else 0.5
    return float(threshold_otsu(values))


def extract_features(volume, extractor, z, restrict=None, threshold=0.5, prob=None):
    """Feature rows for slice ``z``, one per pixel (row-major), or per restricted pixel.

    Returns an ``(n, 6)`` float64 array with columns :data:`FEATURE_NAMES`.
    """
    if not 0 <= z < volume.nz:
        raise IndexError(f"slice {z} outside [0, {volume.nz})")
    img = np.asarray(volume.slice(z), dtype=np.float64)
    if restrict is not None:
        restrict = np.asarray(restrict, dtype=np.bool_)
        if restrict.shape != img.shape:
            raise ValueError(f"restriction mask {restrict.shape} does not match slice {img.shape}")
        yy, xx = np.nonzero(restrict)
    else:
        yy, xx = np.indices(img.shape).reshape(2, -1)
    if len(yy) == 0:
        return np.zeros((0, N_FEATURES))
    if prob is None:
        prob = extractor.predict(img)
    v = img[yy, xx]
    return np.column_stack([prob[yy, xx], (v > threshold).astype(np.float64), xx / volume.nx,
                            yy / volume.ny, np.full(len(yy), z / volume.nz), v])


def apply_foreground_filter(image_slice, prediction):
    """Row/column indices of the pixels the sample prediction lets through."""
    pred = np.asarray(prediction, dtype=np.bool_)
    if pred.shape != np.shape(image_slice):
        raise ValueError("prediction and slice dimensions differ")
    return np.nonzero(pred)


def _targets(ann, stage):
    return ann.sample_mask if stage == SAMPLE else ann.lipid_mask


def _cap(rng, idx, cap):
    if cap is None or len(idx) <= cap:
        return idx
    return np.sort(rng.choice(idx, cap, replace=False))


def _stage_input(volume, z, restrict):
    img = np.asarray(volume.slice(z), dtype=np.float64)
    # the lipid stage only sees what the foreground-pass filter lets through
    return img if restrict is None else np.where(restrict, img, 0.0)


def _stage_features(volume, z, extractor, threshold, restrict):
    prob = extractor.predict(_stage_input(volume, z, restrict))
    return extract_features(volume, extractor, z, restrict, threshold, prob=prob)


def _bright(volume, z, cutoff):
    if cutoff is None:
        return np.zeros((volume.ny, volume.nx), np.bool_)
    return np.asarray(volume.slice(z)) > cutoff


def _stage_pixels(volume, anns, stage, extractor, threshold, foreground, cutoff=None):
    """Features and 0/1 labels for the annotated slices of one stage.

    In the lipid stage pixels brighter than ``cutoff`` are calcification and
    are left out: a pool's embedded calcifications carry the lipid label but
    look nothing like lipid.
    """
    X, y = [], []
    for a in anns:
        t = _targets(a, stage)
        if stage == LIPID:
            restrict = foreground[a.z]
            keep = ~_bright(volume, a.z, cutoff)[restrict]
            X.append(_stage_features(volume, a.z, extractor, threshold, restrict)[keep])
            y.append(t[restrict][keep].astype(np.int64))
        else:
            X.append(_stage_features(volume, a.z, extractor, threshold, None))
            y.append(t.ravel().astype(np.int64))
    return np.concatenate(X), np.concatenate(y)


@dataclass
class StageModel:
    stage: str
    mlp: MlpParams
    extractor: ConvExtractor
    threshold: float
    best_epoch: int = 0
    epochs_run: int = 0
    val_history: list = field(default_factory=list)
    stalled: bool = False


def _foreground_lookup(foreground, anns):
    if foreground is None:
        raise SegmentationError("lipid stage needs the sample prediction as foreground")
    if isinstance(foreground, BinaryMask):
        bits = foreground.bits
        fg = {a.z: bits[a.z] for a in anns}
    else:
        fg = {a.z: np.asarray(foreground[a.z], dtype=np.bool_) for a in anns}
    if not any(m.any() for m in fg.values()):
        raise SegmentationError("no foreground pixels")
    return fg


def train_stage(volume, cfg, stage, foreground=None, extractor=None):
    """Train the extractor (unless given) and the MLP of one stage.

    The MLP is minimised by LBFGS on the summed cross-entropy, one full-batch
    iteration per epoch. After each epoch the validation pixel accuracy is
    measured; training stops once ``patience`` epochs pass without a strict
    improvement and the best-validation parameters are returned.
    """
    if stage not in (SAMPLE, LIPID):
        raise ValueError(f"unknown stage {stage!r}")
    for a in cfg.annotated:
        a.check_against(volume)
    train, val = split_train_val(cfg.annotated)
    fg = _foreground_lookup(foreground, cfg.annotated) if stage == LIPID else None
    rng = np.random.default_rng([cfg.seed, 0 if stage == SAMPLE else 1])

    if stage == SAMPLE:
        thr = cfg.sample_feature_threshold
        if thr is None:
            thr = _otsu(np.concatenate([volume.slice(a.z).ravel() for a in train]))
    else:
        thr = cfg.lipid_feature_threshold
        if thr is None:
            thr = _otsu(np.concatenate([volume.slice(a.z)[a.sample_mask] for a in train]))

    if extractor is None:
        imgs = [_stage_input(volume, a.z, fg[a.z] if fg else None) for a in train]
        tgts = [_targets(a, stage) if fg is None
                else _targets(a, stage) & fg[a.z] & ~_bright(volume, a.z, cfg.bright_cutoff)
                for a in train]
        extractor = train_extractor(imgs, tgts, seed=cfg.seed, max_iters=cfg.extractor_iters,
                                    target_name=stage)

    cut = cfg.bright_cutoff if stage == LIPID else None
    X, y = _stage_pixels(volume, train, stage, extractor, thr, fg, cut)
    if len(y) == 0 or y.min() == y.max():
        raise SegmentationError(f"{stage} stage: a class is absent from the training pixels")
    keep = np.concatenate([_cap(rng, np.flatnonzero(y == c), cfg.pixel_cap) for c in (0, 1)])
    keep.sort()
    batch = TrainingBatch.from_labels(X[keep], y[keep])
    Xv, yv = _stage_pixels(volume, val, stage, extractor, thr, fg, cut)
    vkeep = _cap(rng, np.arange(len(yv)), cfg.val_pixel_cap)
    Xv, yv = Xv[vkeep], yv[vkeep]

    p0 = MlpParams.init(N_FEATURES, cfg.hidden, 2, seed=cfg.seed)
    state = {"best": -1.0, "best_epoch": 0, "best_x": p0.flat(), "hist": []}
    patience = cfg.patience(stage)

    def objective(v):
        loss, g = mlp_loss_grad(p0.with_flat(v), batch)
        return loss, g.flat()

    def on_epoch(epoch, v, f):
        if len(yv):
            acc = float(np.mean(np.argmax(mlp_forward(p0.with_flat(v), Xv), axis=1) == yv))
        else:
            acc = 0.0
        state["hist"].append(acc)
        if acc > state["best"]:
            state.update(best=acc, best_epoch=epoch, best_x=v.copy())
        log.debug("%s epoch %d loss %.4f val acc %.5f", stage, epoch, f, acc)
        return epoch - state["best_epoch"] >= patience

    res = lbfgs_minimize(objective, p0.flat(),
                         LbfgsConfig(history_m=cfg.history_m, max_iters=cfg.max_epochs,
                                     grad_tol=1e-9), callback=on_epoch)
    if res.n_iter == 0:
        state["best_x"] = res.x
    mlp = p0.with_flat(state["best_x"])
    return StageModel(stage, mlp, extractor, thr, state["best_epoch"], res.n_iter,
                      state["hist"], res.stalled)


def _postprocess_sample(pred, reference, min_fraction):
    """Keep components that touch the training sample region or are not tiny."""
    lab, n = ndimage.label(pred, structure=np.ones((3, 3), bool))
    if n == 0:
        return pred
    sizes = np.bincount(lab.ravel(), minlength=n + 1)
    touch = np.zeros(n + 1, bool)
    touch[np.unique(lab[reference & pred])] = True
    keep = touch | (sizes >= min_fraction * pred.size)
    keep[0] = False
    return keep[lab]


def _classify(volume, z, st, restrict=None):
    X = _stage_features(volume, z, st.extractor, st.threshold, restrict)
    if len(X) == 0:
        return np.zeros(0, bool)
    return np.argmax(mlp_forward(st.mlp, X), axis=1) == 1


@dataclass
class SegmentationModel:
    """Everything needed to segment a stack: both stages plus post-processing state."""

    sample: StageModel
    lipid: StageModel
    reference: np.ndarray  # union of training-slice sample annotations (2D)
    min_component_fraction: float = 0.001
    fill_lipid_holes: bool = True
    bright_cutoff: float | None = 0.7
    lipid_min_fraction: float = 2e-4

    def segment_sample_slice(self, volume, z):
        pred = _classify(volume, z, self.sample).reshape(volume.ny, volume.nx)
        return _postprocess_sample(pred, self.reference, self.min_component_fraction)

    def segment_lipid_slice(self, volume, z, sample2d):
        out = np.zeros_like(sample2d)
        if not sample2d.any():
            return out
        yy, xx = apply_foreground_filter(volume.slice(z), sample2d)
        out[yy, xx] = _classify(volume, z, self.lipid, sample2d)
        out &= ~_bright(volume, z, self.bright_cutoff)
        if self.fill_lipid_holes:
            # calcifications embedded in a pool are enclosed lipid, not a gap in it
            out = ndimage.binary_fill_holes(out) & sample2d
        if self.lipid_min_fraction > 0:
            # partial-volume speckle at the tissue boundary
            lab, n = ndimage.label(out)
            if n:
                sizes = np.bincount(lab.ravel(), minlength=n + 1)
                keep = sizes >= self.lipid_min_fraction * out.size
                keep[0] = False
                out = keep[lab]
        return out

    def save(self, outdir):
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {"min_component_fraction": self.min_component_fraction,
                "fill_lipid_holes": self.fill_lipid_holes,
                "bright_cutoff": self.bright_cutoff,
                "lipid_min_fraction": self.lipid_min_fraction,
                "reference_shape": list(self.reference.shape)}
        for st in (self.sample, self.lipid):
            st.mlp.save(out / f"{st.stage}_mlp.bin", stage=st.stage)
            st.extractor.save(out / f"{st.stage}_extractor.bin")
            meta[st.stage] = {"threshold": st.threshold, "best_epoch": st.best_epoch,
                              "epochs_run": st.epochs_run, "val_history": st.val_history,
                              "stalled": st.stalled}
        (self.reference.astype(np.uint8) * 255).tofile(out / "reference.raw")
        (out / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, outdir):
        out = Path(outdir)
        meta_path = out / "model.json"
        if not meta_path.exists():
            raise VolumeFormatError(f"no model.json in {out}")
        meta = json.loads(meta_path.read_text())
        stages = {}
        for name in (SAMPLE, LIPID):
            m = meta[name]
            stages[name] = StageModel(name, MlpParams.load(out / f"{name}_mlp.bin"),
                                      ConvExtractor.load(out / f"{name}_extractor.bin"),
                                      m["threshold"], m["best_epoch"], m["epochs_run"],
                                      m["val_history"], m["stalled"])
        ref = np.fromfile(out / "reference.raw", np.uint8).reshape(meta["reference_shape"]) > 0
        return cls(stages[SAMPLE], stages[LIPID], ref, meta["min_component_fraction"],
                   meta["fill_lipid_holes"], meta.get("bright_cutoff"),
                   meta.get("lipid_min_fraction", 0.0))


def train_framework(volume, cfg, timings=None):
    """Train sample stage, filter, then lipid stage.

    With ``timings`` (a :class:`~calcpheno.metrics.StageTimings`) the two
    stages are charged to ``segmentation_sample`` and ``segmentation_lipid``.
    """
    from contextlib import nullcontext

    def tick(stage):
        return timings.time(stage) if timings is not None else nullcontext()

    train, _ = split_train_val(cfg.annotated)
    with tick("segmentation_sample"):
        sample = train_stage(volume, cfg, SAMPLE)
        ref = np.zeros((volume.ny, volume.nx), np.bool_)
        for a in train:
            ref |= a.sample_mask
        model = SegmentationModel(sample, None, ref, cfg.min_component_fraction,
                                  cfg.fill_lipid_holes, cfg.bright_cutoff,
                                  cfg.lipid_min_fraction)
        fg = {a.z: model.segment_sample_slice(volume, a.z) for a in cfg.annotated}
    with tick("segmentation_lipid"):
        model.lipid = train_stage(volume, cfg, LIPID, foreground=fg)
    return model


def segment_slices(model, volume, zs, threads=1):
    """Sample and lipid masks for the listed slices, as ``{z: (sample2d, lipid2d)}``."""
    def one(z):
        s = model.segment_sample_slice(volume, z)
        return z, (s, model.segment_lipid_slice(volume, z, s))

    if threads <= 1:
        return dict(one(z) for z in zs)
    with ThreadPoolExecutor(threads) as pool:
        return dict(pool.map(one, zs))


def segment_stack(volume, model, threads=1):
    """Segment every slice; the lipid mask is always contained in the sample mask."""
    res = segment_slices(model, volume, range(volume.nz), threads)
    sample = np.stack([res[z][0] for z in range(volume.nz)])
    lipid = np.stack([res[z][1] for z in range(volume.nz)])
    return BinaryMask(sample, volume.spacing_um), BinaryMask(lipid & sample, volume.spacing_um)


def threshold_segment(volume, tau):
    """Global threshold: true exactly where intensity > tau."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    return BinaryMask(np.asarray(volume.intensities) > tau, volume.spacing_um)


@dataclass
class ThresholdBaseline:
    """Pure intensity thresholding: sample = I > t_sample, lipid = sample and I < t_lipid."""

    t_sample: float
    t_lipid: float

    def segment_slice(self, volume, z):
        img = volume.slice(z)
        s = img > self.t_sample
        return s, s & (img < self.t_lipid)


def fit_threshold_baseline(volume, annotated, grid=None):
    """Pick both thresholds by maximising mean DSC over the given annotated slices."""
    grid = np.linspace(0.0, 1.0, 101) if grid is None else np.asarray(grid)
    imgs = [np.asarray(volume.slice(a.z)) for a in annotated]

    def dice(p, t):
        d = p.sum() + t.sum()
        return 1.0 if d == 0 else 2.0 * np.sum(p & t) / d

    ts = max(grid, key=lambda t: np.mean([dice(im > t, a.sample_mask)
                                          for im, a in zip(imgs, annotated)]))
    tl = max(grid, key=lambda t: np.mean([dice((im > ts) & (im < t), a.lipid_mask)
                                          for im, a in zip(imgs, annotated)]))
    return ThresholdBaseline(float(ts), float(tl))
