"""Overlap scores, mean/std aggregation and stage timing."""
from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

STAGES = ("segmentation_sample", "segmentation_lipid", "segmentation_calcification",
          "particle_identification", "clustering", "topology", "colocalization", "report")


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int
    FP: int
    FN: int
    TN: int

    @property
    def total(self):
        return self.TP + self.FP + self.FN + self.TN


@dataclass(frozen=True)
class Score:
    """A score value; ``flagged`` marks a conventional value for a degenerate case."""

    value: float
    flagged: bool = False

    def __float__(self):
        return self.value


def _bits(m):
    return np.asarray(getattr(m, "bits", m), dtype=np.bool_)


def confusion(pred, truth):
    p, t = _bits(pred), _bits(truth)
    if p.shape != t.shape:
        raise ValueError(f"dimension mismatch {p.shape} vs {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p)) - tp
    fn = int(np.count_nonzero(t)) - tp
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def dsc(c):
    """Dice coefficient 2TP / (2TP + FP + FN); two empty masks score 1 (flagged)."""
    den = 2 * c.TP + c.FP + c.FN
    if den == 0:
        return Score(1.0, True)
    return Score(2 * c.TP / den)


def jsc(c):
    """Jaccard coefficient TP / (TP + FP + FN); two empty masks score 1 (flagged)."""
    den = c.TP + c.FP + c.FN
    if den == 0:
        return Score(1.0, True)
    return Score(c.TP / den)


def aggregate_scores(scores):
    """Mean and sample standard deviation (n - 1); a single score has std 0, flagged."""
    v = np.array([float(s) for s in scores], dtype=np.float64)
    if v.size == 0:
        raise ValueError("no scores to aggregate")
    if v.size == 1:
        return float(v[0]), Score(0.0, True)
    return float(v.mean()), Score(float(v.std(ddof=1)))


def slice_scores(pred, truth, zs):
    """Per-slice (z, dsc, jsc) rows for the listed slices of two volumes."""
    p, t = _bits(pred), _bits(truth)
    rows = []
    for z in zs:
        c = confusion(p[z], t[z])
        rows.append((int(z), dsc(c).value, jsc(c).value))
    return rows


@dataclass
class StageTimings:
    """Wall-clock seconds per pipeline stage (monotonic clock)."""

    seconds: dict = field(default_factory=dict)

    def add(self, stage, dt):
        if dt < 0:
            raise ValueError("negative duration")
        self.seconds[stage] = self.seconds.get(stage, 0.0) + float(dt)

    @contextmanager
    def time(self, stage):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.add(stage, time.perf_counter() - t0)

    @property
    def total(self):
        return float(sum(self.seconds.values()))

    def percentages(self):
        tot = self.total
        return {k: (100.0 * v / tot if tot > 0 else 0.0) for k, v in self.seconds.items()}

    def to_dict(self):
        pct = self.percentages()
        return {"stages": {k: {"seconds": v, "percent": pct[k]} for k, v in self.seconds.items()},
                "total_seconds": self.total}


def report_timings(timings):
    """Render a timing table and return ``(table_text, json_dict)``."""
    d = timings.to_dict()
    width = max([len(k) for k in d["stages"]] + [5])
    lines = [f"{'stage':<{width}}  {'seconds':>10}  {'share':>7}"]
    for k, v in d["stages"].items():
        lines.append(f"{k:<{width}}  {v['seconds']:>10.3f}  {v['percent']:>6.1f}%")
    lines.append(f"{'total':<{width}}  {d['total_seconds']:>10.3f}  {100.0 if d['stages'] else 0.0:>6.1f}%")
    return "\n".join(lines), d
