"""Shallow encoder-decoder producing a per-pixel probability map for one slice.

    conv3x3(1->8) relu  maxpool2  conv3x3(8->16) relu  upsample2
    conv3x3(16->8) relu  conv1x1(8->1)  sigmoid

Forward and backward passes are plain numpy (im2col over the nine 3x3
offsets); parameters are a flat float64 vector so LBFGS can train them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..optim import LbfgsConfig, lbfgs_minimize

# (name, out_channels, in_channels, kernel)
LAYERS = (("c1", 8, 1, 3), ("c2", 16, 8, 3), ("c3", 8, 16, 3), ("c4", 1, 8, 1))
_OFFSETS = [(dy, dx) for dy in (0, 1, 2) for dx in (0, 1, 2)]


def _sizes():
    out = []
    for _, o, i, k in LAYERS:
        out += [o * i * k * k, o]
    return out


N_PARAMS = sum(_sizes())


def _unpack(theta):
    parts = np.split(theta, np.cumsum(_sizes())[:-1])
    out = {}
    for j, (name, o, i, k) in enumerate(LAYERS):
        out[name] = (parts[2 * j].reshape(o, i * k * k), parts[2 * j + 1])
    return out


def _im2col(x):
    """(C, H, W) -> (C*9, H*W) with zero 'same' padding; row order c-major then offset."""
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 9, h, w))
    for k, (dy, dx) in enumerate(_OFFSETS):
        cols[:, k] = xp[:, dy:dy + h, dx:dx + w]
    return cols.reshape(c * 9, h * w)


def _col2im(dcols, c, h, w):
    d = dcols.reshape(c, 9, h, w)
    dxp = np.zeros((c, h + 2, w + 2))
    for k, (dy, dx) in enumerate(_OFFSETS):
        dxp[:, dy:dy + h, dx:dx + w] += d[:, k]
    return dxp[:, 1:-1, 1:-1]


def _pad_even(img):
    h, w = img.shape
    return np.pad(img, ((0, h % 2), (0, w % 2)), mode="edge")


def _forward(p, img, keep=False):
    h0, w0 = img.shape
    x = _pad_even(np.asarray(img, dtype=np.float64))[None]
    _, h, w = x.shape
    W1, b1 = p["c1"]
    col1 = _im2col(x)
    a1 = (W1 @ col1 + b1[:, None]).reshape(8, h, w)
    r1 = np.maximum(a1, 0.0)
    blocks = r1.reshape(8, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(8, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    p1 = np.take_along_axis(blocks, arg[..., None], -1)[..., 0]
    W2, b2 = p["c2"]
    col2 = _im2col(p1)
    a2 = (W2 @ col2 + b2[:, None]).reshape(16, h // 2, w // 2)
    r2 = np.maximum(a2, 0.0)
    u = r2.repeat(2, axis=1).repeat(2, axis=2)
    W3, b3 = p["c3"]
    col3 = _im2col(u)
    a3 = (W3 @ col3 + b3[:, None]).reshape(8, h, w)
    r3 = np.maximum(a3, 0.0)
    W4, b4 = p["c4"]
    z = (W4 @ r3.reshape(8, -1) + b4[:, None]).reshape(h, w)
    if not keep:
        return z[:h0, :w0]
    cache = dict(h=h, w=w, h0=h0, w0=w0, col1=col1, a1=a1, arg=arg, col2=col2, a2=a2,
                 col3=col3, a3=a3, r3=r3)
    return z[:h0, :w0], cache


def _backward(p, cache, dz_crop):
    h, w = cache["h"], cache["w"]
    dz = np.zeros((h, w))
    dz[:cache["h0"], :cache["w0"]] = dz_crop
    g = {}
    W4, _ = p["c4"]
    dzf = dz.reshape(1, -1)
    g["c4"] = (dzf @ cache["r3"].reshape(8, -1).T, dzf.sum(axis=1))
    da3 = (W4.T @ dzf).reshape(8, h, w)
    da3[cache["a3"] <= 0] = 0.0
    da3f = da3.reshape(8, -1)
    W3, _ = p["c3"]
    g["c3"] = (da3f @ cache["col3"].T, da3f.sum(axis=1))
    du = _col2im(W3.T @ da3f, 16, h, w)
    dr2 = du.reshape(16, h // 2, 2, w // 2, 2).sum(axis=(2, 4))
    da2 = dr2
    da2[cache["a2"] <= 0] = 0.0
    da2f = da2.reshape(16, -1)
    W2, _ = p["c2"]
    g["c2"] = (da2f @ cache["col2"].T, da2f.sum(axis=1))
    dp1 = _col2im(W2.T @ da2f, 8, h // 2, w // 2)
    onehot = np.zeros(cache["arg"].shape + (4,))
    np.put_along_axis(onehot, cache["arg"][..., None], 1.0, -1)
    dblocks = onehot * dp1[..., None]
    dr1 = dblocks.reshape(8, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(8, h, w)
    da1 = dr1
    da1[cache["a1"] <= 0] = 0.0
    da1f = da1.reshape(8, -1)
    g["c1"] = (da1f @ cache["col1"].T, da1f.sum(axis=1))
    flat = []
    for name, *_ in LAYERS:
        flat += [g[name][0].ravel(), g[name][1]]
    return np.concatenate(flat)


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class ConvExtractor:
    theta: np.ndarray
    seed: int | None = None
    target: str = ""

    @classmethod
    def init(cls, seed=0, prior=0.5, target=""):
        """He-uniform kernels; output bias set to the logit of the class prior."""
        rng = np.random.default_rng(seed)
        parts = []
        for _, o, i, k in LAYERS:
            lim = np.sqrt(6.0 / (i * k * k))
            parts += [rng.uniform(-lim, lim, o * i * k * k), np.zeros(o)]
        prior = min(max(prior, 1e-4), 1 - 1e-4)
        parts[-1][:] = np.log(prior / (1 - prior))
        return cls(np.concatenate(parts), seed, target)

    def logits(self, img):
        return _forward(_unpack(self.theta), img)

    def predict(self, img):
        """Per-pixel probability map in (0, 1), same shape as ``img``."""
        return _sigmoid(self.logits(img))

    def save(self, path):
        path = Path(path)
        self.theta.astype("<f8").tofile(path)
        path.with_suffix(".json").write_text(json.dumps(
            {"layers": [list(l) for l in LAYERS], "n_params": N_PARAMS, "seed": self.seed,
             "target": self.target}, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        theta = np.fromfile(path, dtype="<f8")
        if theta.size != N_PARAMS:
            raise ValueError(f"{path}: expected {N_PARAMS} parameters, found {theta.size}")
        return cls(theta, meta.get("seed"), meta.get("target", ""))


def bce_loss_grad(theta, images, targets, weights):
    """Weighted binary cross-entropy summed over pixels of all images, with gradient."""
    p = _unpack(theta)
    loss = 0.0
    grad = np.zeros_like(theta)
    for img, t, wt in zip(images, targets, weights):
        z, cache = _forward(p, img, keep=True)
        loss -= float(np.sum(wt * (t * _log_sigmoid(z) + (1 - t) * _log_sigmoid(-z))))
        grad += _backward(p, cache, wt * (_sigmoid(z) - t))
    return loss, grad


def train_extractor(images, targets, seed=0, max_iters=60, target_name="", lbfgs=None):
    """Fit an extractor to binary per-pixel targets on whole slices.

    Both classes receive equal total weight, so a small foreground class is
    not swamped by background pixels.
    """
    if len(images) == 0:
        raise ValueError("no training slices for the feature extractor")
    targets = [np.asarray(t, dtype=np.float64) for t in targets]
    n_pos = sum(t.sum() for t in targets)
    n_all = sum(t.size for t in targets)
    n_neg = n_all - n_pos
    if n_pos == 0 or n_neg == 0:
        # single-class data: a balanced weight is undefined, plain mean weighting
        weights = [np.full(t.shape, 1.0 / n_all) for t in targets]
    else:
        weights = [np.where(t > 0.5, 0.5 / n_pos, 0.5 / n_neg) for t in targets]
    model = ConvExtractor.init(seed, prior=n_pos / n_all, target=target_name)
    cfg = lbfgs or LbfgsConfig(max_iters=max_iters, grad_tol=1e-7)
    res = lbfgs_minimize(lambda th: bce_loss_grad(th, images, targets, weights), model.theta, cfg)
    model.theta = res.x
    model.train_trace = res.trace
    model.stalled = res.stalled
    return model
