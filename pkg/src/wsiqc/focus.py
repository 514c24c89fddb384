"""FocusAttNet: one strided convolution followed by min/max pooling (q2).

For a window X (H x W x 3) the network computes, per filter n,

    r_n = sum_c phi[n, c] (x) X[..., c] + b[n]      7x7 kernels, stride 5, no padding
    y   = sum_n (w1[n] * min(r_n) + w2[n] * max(r_n)) + w3

where (x) is cross-correlation, the deep-learning convention. Scores are on a
0 (blurred) .. 12 (sharp) scale; a slide's q2 is the mean patch score / 12.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateTargets, NoContentPatches, WindowTooSmall
from .imaging import PATCH

KERNEL = 7
STRIDE = 5
SCORE_MAX = 12.0
WINDOW = 64
WINDOW_STRIDE = 128
MAGIC = b"FOCUSATTNETv1\0\0\0"
assert len(MAGIC) == 16


@dataclass
class FocusNetWeights:
    kernel: np.ndarray  # (N, 3, 7, 7)
    bias: np.ndarray  # (N,)
    w1: np.ndarray  # (N,)
    w2: np.ndarray  # (N,)
    w3: float = 0.0

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        self.w1 = np.asarray(self.w1, dtype=np.float64).reshape(-1)
        self.w2 = np.asarray(self.w2, dtype=np.float64).reshape(-1)
        self.w3 = float(self.w3)
        n = self.kernel.shape[0]
        if self.kernel.shape != (n, 3, KERNEL, KERNEL):
            raise ValueError(f"kernel must be (N, 3, 7, 7), got {self.kernel.shape}")
        if not (self.bias.shape == self.w1.shape == self.w2.shape == (n,)):
            raise ValueError("bias, w1 and w2 must have length N")
        if not all(np.all(np.isfinite(a)) for a in (self.kernel, self.bias, self.w1, self.w2)) or not np.isfinite(self.w3):
            raise ValueError("weights must be finite")

    @property
    def n_filters(self) -> int:
        return self.kernel.shape[0]

    def copy(self) -> "FocusNetWeights":
        return FocusNetWeights(self.kernel.copy(), self.bias.copy(), self.w1.copy(), self.w2.copy(), self.w3)

    @classmethod
    def random(cls, n_filters: int = 2, seed: int = 0, scale: float = 0.01) -> "FocusNetWeights":
        rng = np.random.default_rng(seed)
        k = rng.normal(0.0, scale, (n_filters, 3, KERNEL, KERNEL))
        return cls(k, rng.normal(0, scale, n_filters), rng.normal(0, 1, n_filters), rng.normal(0, 1, n_filters), 0.0)

    # parameter vector view, used by the optimiser and the gradient checks
    def flat(self) -> np.ndarray:
        return np.concatenate([self.kernel.ravel(), self.bias, self.w1, self.w2, [self.w3]])

    @classmethod
    def from_flat(cls, vec: np.ndarray, n_filters: int) -> "FocusNetWeights":
        n = n_filters
        nk = n * 3 * KERNEL * KERNEL
        k = vec[:nk].reshape(n, 3, KERNEL, KERNEL)
        b = vec[nk : nk + n]
        w1 = vec[nk + n : nk + 2 * n]
        w2 = vec[nk + 2 * n : nk + 3 * n]
        return cls(k, b, w1, w2, vec[nk + 3 * n])

    def to_dict(self) -> dict:
        return {
            "n_filters": self.n_filters,
            "kernel": self.kernel.tolist(),
            "bias": self.bias.tolist(),
            "w1": self.w1.tolist(),
            "w2": self.w2.tolist(),
            "w3": self.w3,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FocusNetWeights":
        w = cls(np.array(d["kernel"]), d["bias"], d["w1"], d["w2"], d["w3"])
        if w.n_filters != int(d.get("n_filters", w.n_filters)):
            raise ValueError("n_filters disagrees with kernel shape")
        return w

    def save(self, path) -> None:
        path = Path(path)
        if path.suffix == ".json":
            path.write_text(json.dumps(self.to_dict()))
        else:
            path.write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FocusNetWeights":
        data = Path(path).read_bytes()
        if data[:16] == MAGIC:
            return cls.from_bytes(data)
        return cls.from_dict(json.loads(data))

    def to_bytes(self) -> bytes:
        """MAGIC, uint32 N, then float64 LE kernel, bias, w1, w2, w3."""
        body = self.flat().astype("<f8").tobytes()
        return MAGIC + struct.pack("<I", self.n_filters) + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "FocusNetWeights":
        if data[:16] != MAGIC:
            raise ValueError("not a FocusAttNet weight file")
        (n,) = struct.unpack("<I", data[16:20])
        vec = np.frombuffer(data[20:], dtype="<f8")
        if vec.size != n * (3 * KERNEL * KERNEL + 3) + 1:
            raise ValueError("truncated weight file")
        return cls.from_flat(vec.astype(np.float64), n)


def default_weights() -> FocusNetWeights:
    """Weights trained on the synthetic blur ladder (see ``train_default``)."""
    text = resources.files("wsiqc.data").joinpath("focus_default.json").read_text()
    return FocusNetWeights.from_dict(json.loads(text))


def _columns(windows: np.ndarray) -> np.ndarray:
    """im2col: (B, H, W, 3) -> (B, P, 147) with (channel, ky, kx) ordering."""
    x = np.asarray(windows, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1] < KERNEL or x.shape[2] < KERNEL:
        raise WindowTooSmall(f"window {x.shape[1]}x{x.shape[2]} smaller than the 7x7 kernel")
    v = sliding_window_view(x, (KERNEL, KERNEL), axis=(1, 2))[:, ::STRIDE, ::STRIDE]
    b, oh, ow = v.shape[:3]
    return v.reshape(b, oh * ow, 3 * KERNEL * KERNEL)


def responses(windows: np.ndarray, w: FocusNetWeights) -> np.ndarray:
    """Convolution responses, shape (B, P, N)."""
    cols = _columns(windows)
    return cols @ w.kernel.reshape(w.n_filters, -1).T + w.bias


def _pool(r: np.ndarray, w: FocusNetWeights):
    rmin, rmax = r.min(axis=1), r.max(axis=1)
    y = rmin @ w.w1 + rmax @ w.w2 + w.w3
    return y, rmin, rmax


def predict_batch(windows: np.ndarray, w: FocusNetWeights) -> np.ndarray:
    y, _, _ = _pool(responses(windows, w), w)
    return y


def predict_window(x: np.ndarray, w: FocusNetWeights) -> float:
    return float(predict_batch(np.asarray(x)[None], w)[0])


def window_offsets(valid_h: int, valid_w: int, window: int = WINDOW, stride: int = WINDOW_STRIDE):
    ys = range(0, valid_h - window + 1, stride)
    xs = range(0, valid_w - window + 1, stride)
    return [(y, x) for y in ys for x in xs]


def score_patch(patch: np.ndarray, w: FocusNetWeights, window: int = WINDOW, stride: int = WINDOW_STRIDE,
                valid_shape: tuple[int, int] | None = None) -> float | None:
    """Mean window score over the dense grid; windows must lie in the valid area."""
    patch = np.asarray(patch)
    vh, vw = valid_shape if valid_shape is not None else patch.shape[:2]
    offs = window_offsets(vh, vw, window, stride)
    if not offs:
        return None
    batch = np.stack([patch[y : y + window, x : x + window] for y, x in offs])
    return float(np.mean(predict_batch(batch, w)))


@dataclass
class FocusScore:
    per_patch: dict = field(default_factory=dict)
    y_mean: float | None = None
    q2: float | None = None
    sample_every: int = 1


def q2_from_patch_scores(scores: Sequence[float]) -> float:
    return min(1.0, max(0.0, float(np.mean(scores)) / SCORE_MAX))


def score_slide(slide, w: FocusNetWeights, sample_every: int = 1, mag=20, mapper: Callable = map) -> FocusScore:
    """Slide sharpness from every ``sample_every``-th content patch at ``mag``.

    ``mapper`` may be a parallel ordered map; reductions run in enumeration order.
    """
    from .pyramid import iter_patches

    if sample_every < 1:
        raise ValueError("sample_every must be >= 1")
    content = [p for p in iter_patches(slide, mag) if not p.is_white]
    sampled = content[::sample_every]
    if not sampled:
        raise NoContentPatches("no content patches to score")
    vals = list(mapper(lambda p: score_patch(p.pixels, w, valid_shape=(p.valid_h, p.valid_w)), sampled))
    per_patch = {p.key: v for p, v in zip(sampled, vals) if v is not None}
    if not per_patch:
        raise NoContentPatches("no patch large enough for a scoring window")
    scores = list(per_patch.values())
    return FocusScore(per_patch, float(np.mean(scores)), q2_from_patch_scores(scores), sample_every)


# ---------------------------------------------------------------- training

def plcc_loss_grad(y: np.ndarray, t: np.ndarray) -> tuple[float, np.ndarray]:
    """1 - Pearson(y, t) and its gradient with respect to y."""
    yc = y - y.mean()
    tc = t - t.mean()
    syy = float(yc @ yc)
    stt = float(tc @ tc)
    syt = float(yc @ tc)
    if stt == 0:
        raise DegenerateTargets("targets are constant")
    if syy == 0:
        # constant predictions: correlation undefined, push along the targets
        return 1.0, -tc / np.sqrt(stt)
    denom = np.sqrt(syy * stt)
    rho = syt / denom
    drho = tc / denom - syt * yc / (syy * denom)
    return 1.0 - rho, -drho


def loss_and_grad(w: FocusNetWeights, windows: np.ndarray, targets: np.ndarray,
                  loss: Callable = plcc_loss_grad) -> tuple[float, FocusNetWeights]:
    """Loss and analytic gradient (returned as a weights-shaped object).

    Gradients through min/max are routed to the extremal location; ties go
    to the lowest linear index.
    """
    cols = _columns(windows)
    n = w.n_filters
    r = cols @ w.kernel.reshape(n, -1).T + w.bias
    amin, amax = r.argmin(axis=1), r.argmax(axis=1)  # (B, N), first occurrence
    bidx = np.arange(r.shape[0])[:, None]
    nidx = np.arange(n)[None, :]
    rmin, rmax = r[bidx, amin, nidx], r[bidx, amax, nidx]
    y = rmin @ w.w1 + rmax @ w.w2 + w.w3
    value, gy = loss(y, np.asarray(targets, dtype=np.float64))
    g_w1 = gy @ rmin
    g_w2 = gy @ rmax
    g_w3 = float(gy.sum())
    cmin = gy[:, None] * w.w1[None, :]  # dL/dr at argmin, (B, N)
    cmax = gy[:, None] * w.w2[None, :]
    g_b = (cmin + cmax).sum(axis=0)
    xmin = cols[bidx, amin]  # (B, N, 147)
    xmax = cols[bidx, amax]
    g_k = np.einsum("bn,bnk->nk", cmin, xmin) + np.einsum("bn,bnk->nk", cmax, xmax)
    grad = FocusNetWeights(g_k.reshape(w.kernel.shape), g_b, g_w1, g_w2, g_w3)
    return value, grad


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 0.01
    batch_size: int = 128
    n_filters: int = 2
    seed: int = 0
    init_scale: float = 0.01


class Adam:
    def __init__(self, size: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def calibrate_output(w: FocusNetWeights, windows: np.ndarray, targets: np.ndarray) -> FocusNetWeights:
    """Least-squares affine rescale of the pooled output onto the target scale.

    PLCC training fixes predictions only up to an affine map; this folds the
    map into w1, w2, w3 so raw outputs live on the 0..12 label scale.
    """
    y = predict_batch(windows, w)
    a, c = np.polyfit(y, targets, 1) if np.ptp(y) > 0 else (0.0, float(np.mean(targets)))
    return FocusNetWeights(w.kernel.copy(), w.bias.copy(), a * w.w1, a * w.w2, a * w.w3 + c)


def train_focus(dataset: Sequence[tuple[np.ndarray, float]], config: TrainConfig = TrainConfig(),
                init: FocusNetWeights | None = None, log: Callable[[str], None] | None = None) -> FocusNetWeights:
    """Fit weights maximising Pearson correlation with the targets (Adam)."""
    windows = np.stack([np.asarray(x, dtype=np.float64) for x, _ in dataset])
    targets = np.asarray([t for _, t in dataset], dtype=np.float64)
    if np.unique(targets).size < 2:
        raise DegenerateTargets("need at least two distinct targets")
    w = init.copy() if init is not None else FocusNetWeights.random(config.n_filters, config.seed, config.init_scale)
    rng = np.random.default_rng(config.seed)
    params = w.flat()
    opt = Adam(params.size, config.learning_rate)
    n = len(targets)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, config.batch_size):
            idx = order[s : s + config.batch_size]
            if np.unique(targets[idx]).size < 2:
                continue
            cur = FocusNetWeights.from_flat(params, w.n_filters)
            value, grad = loss_and_grad(cur, windows[idx], targets[idx])
            params = opt.step(params, grad.flat())
            losses.append(value)
        if log and (epoch % 10 == 0 or epoch == config.epochs - 1):
            log(f"epoch {epoch}: 1-PLCC {np.mean(losses):.4f}")
    return calibrate_output(FocusNetWeights.from_flat(params, w.n_filters), windows, targets)
