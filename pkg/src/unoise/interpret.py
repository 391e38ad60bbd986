"""Importance maps: learned noise masks, occlusion sensitivity and Grad-CAM.

Every map follows the same orientation: higher value = more important pixel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from . import tensor as T
from .metrics import dice
from .tensor import Tensor
from .unet import SINGLE_LOGIT, ModelParams, decode, encode, forward

METHODS = ("unoise", "occlusion", "gradcam")


@dataclass
class NoiseMask:
    logits: np.ndarray  # H×W, pre-sigmoid
    B: np.ndarray  # H×W in (0, 1)

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "NoiseMask":
        with T.no_grad():
            b = T.sigmoid(Tensor(logits)).data
        return cls(np.asarray(logits), b)


@dataclass
class ImportanceMap:
    values: np.ndarray
    method: str
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"importance map must be H×W, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("importance map contains non-finite values")


def _rescale(v: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; constant maps become all zeros."""
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return np.zeros_like(v, dtype=np.float64)
    return (v - lo) / (hi - lo)


def _single(x) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ValueError("pass one image at a time (C×H×W or 1×C×H×W)")
        x = x[0]
    if x.ndim != 3:
        raise ValueError(f"expected a C×H×W image, got shape {x.shape}")
    return x


# ---------------------------------------------------------------- U-Noise

def unoise_map(noise_model: ModelParams, x) -> tuple[NoiseMask, ImportanceMap]:
    """Importance = positive part of the negated pre-sigmoid logits, rescaled per image.

    Low B means little noise was tolerated, hence high importance.
    """
    if noise_model.config.head != SINGLE_LOGIT:
        raise ValueError("unoise_map needs a model with a single-channel-logit head")
    img = _single(x)
    with T.no_grad():
        logits = forward(noise_model, Tensor(img[None])).data[0]
    return NoiseMask.from_logits(logits), importance_from_logits(logits)


def importance_from_logits(logits: np.ndarray) -> ImportanceMap:
    return ImportanceMap(_rescale(np.maximum(-np.asarray(logits, dtype=np.float64), 0.0)), "unoise")


# ---------------------------------------------------------------- occlusion

def _predictor(utility) -> Callable[[np.ndarray], np.ndarray]:
    """Map N×C×H×W arrays to N×H×W argmax predictions."""
    if isinstance(utility, ModelParams):
        def predict(batch):
            with T.no_grad():
                return forward(utility, Tensor(batch)).data.argmax(axis=1)
        return predict
    return lambda batch: np.asarray(utility(batch)).argmax(axis=1)


def window_positions(size: int, window: int, stride: int) -> list[int]:
    return list(range(0, size - window + 1, stride))


def occlusion_sensitivity(utility, x, window: int = 15, stride: int = 2,
                          fill: Union[float, np.ndarray] = 0.0, target_class: int = 1,
                          batch_size: int = 32) -> ImportanceMap:
    """Slide an occluding window and score each position by 1 − dice(occluded, unoccluded).

    The dice is taken between the utility model's target-class predictions on the
    occluded and the original image.  A pixel's importance is the mean score over
    every window covering it; pixels no window reaches (when ``stride`` does not
    divide ``H − window``) stay at 0.  ``fill`` may be a scalar or an array
    shaped like the image.  ``utility`` is a ModelParams or a callable returning
    N×K×H×W logits.
    """
    if stride <= 0:
        raise ValueError("stride must be positive")
    img = _single(x)
    c, h, w = img.shape
    if window > min(h, w) or window < 1:
        raise ValueError(f"window {window} must be in [1, min(H, W)={min(h, w)}]")
    fill_arr = np.broadcast_to(np.asarray(fill, dtype=img.dtype), img.shape)
    predict = _predictor(utility)
    ref = predict(img[None])[0] == target_class

    positions = [(py, px) for py in window_positions(h, window, stride)
                 for px in window_positions(w, window, stride)]
    total = np.zeros((h, w))
    count = np.zeros((h, w))
    for i in range(0, len(positions), batch_size):
        chunk = positions[i:i + batch_size]
        batch = np.repeat(img[None], len(chunk), axis=0)
        for b, (py, px) in enumerate(chunk):
            batch[b, :, py:py + window, px:px + window] = fill_arr[:, py:py + window, px:px + window]
        preds = predict(batch) == target_class
        for b, (py, px) in enumerate(chunk):
            score = 1.0 - dice(preds[b], ref)
            total[py:py + window, px:px + window] += score
            count[py:py + window, px:px + window] += 1
    values = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return ImportanceMap(values, "occlusion",
                         {"window": window, "stride": stride, "positions": len(positions)})


# ---------------------------------------------------------------- Grad-CAM

def grad_cam(utility, x, target_class: int = 1) -> ImportanceMap:
    """Grad-CAM at the bottleneck for a segmentation model.

    Score = sum of the target-class logit over pixels predicted as that class.
    Channel weights are the spatial mean of d(score)/d(bottleneck); the map is
    relu(sum_k w_k A_k), bilinearly upsampled to the input size and divided by
    its maximum.  ``utility`` is a ModelParams or any object with
    ``encode(x) -> (A, ctx)`` and ``decode(A, ctx) -> logits``.
    """
    img = _single(x)
    h, w = img.shape[1:]
    if isinstance(utility, ModelParams):
        enc, dec = (lambda t: encode(utility, t)), (lambda a, ctx: decode(utility, a, ctx))
        params = list(utility)
    else:
        enc, dec, params = utility.encode, utility.decode, []
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        with T.no_grad():
            acts, ctx = enc(Tensor(img[None]))
        A = Tensor(acts.data, requires_grad=True)
        logits = dec(A, ctx)
        region = logits.data.argmax(axis=1) == target_class
        if not region.any():
            return ImportanceMap(np.zeros((h, w)), "gradcam", {"empty_target": True})
        score = T.sum(T.mul(T.select_channel(logits, target_class), Tensor(region.astype(float))))
        T.backward(score)
        weights = A.grad[0].mean(axis=(1, 2))
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f
            p.grad = None
    cam = np.maximum(np.tensordot(weights, A.data[0], axes=1), 0.0)
    times = int(round(np.log2(h / cam.shape[0])))
    if cam.shape[0] * 2 ** times != h or cam.shape[1] * 2 ** times != w:
        raise ValueError(f"bottleneck {cam.shape} is not a power-of-two reduction of {h}x{w}")
    cam = T.upsample_bilinear(cam, times)
    peak = cam.max()
    values = cam / peak if peak > 0 else np.zeros_like(cam)
    return ImportanceMap(values, "gradcam", {"empty_target": False})


# ---------------------------------------------------------------- export

def export_pgm(imap: ImportanceMap, path) -> Path:
    """Write an 8-bit ASCII PGM (P2) plus ``<path>.json`` describing the scaling.

    Pixel = round(255 · (v − min) / (max − min)); constant maps export as 0.
    """
    path = Path(path)
    v = imap.values
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros(v.shape, dtype=np.int64) if hi <= lo else \
        np.rint(255.0 * (v - lo) / (hi - lo)).astype(np.int64)
    h, w = v.shape
    lines = ["P2", f"{w} {h}", "255"] + [" ".join(str(int(p)) for p in row) for row in scaled]
    path.write_text("\n".join(lines) + "\n")
    side = {"method": imap.method, "shape": [h, w], "scaling": {"min": lo, "max": hi, "levels": 255},
            "flags": imap.flags}
    Path(str(path) + ".json").write_text(json.dumps(side, indent=1, sort_keys=True))
    return path


def read_pgm(path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not a P2 PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return np.array(tokens[4:4 + w * h], dtype=np.int64).reshape(h, w)
