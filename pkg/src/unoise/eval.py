"""Evaluation harness: visibility sweeps, pretraining comparison, runtime benchmark."""

from __future__ import annotations

import csv
import io
import platform
import time
from dataclasses import dataclass, asdict
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset
from .metrics import dice, mean_dice
from .tensor import Tensor
from .unet import ModelParams, forward, predict

SWEEP_HEADER = ["model", "pretrained", "threshold", "percent_visible", "dice"]
BENCH_HEADER = ["method", "mean_seconds", "trials", "input_shape", "host"]

__all__ = ["dice", "mean_dice", "MetricsRecord", "threshold_visibility", "noise_masks",
           "visibility_sweep", "dice_near_visibility", "pretraining_comparison",
           "runtime_benchmark", "sweep_csv", "benchmark_csv", "benchmark_text"]


@dataclass
class MetricsRecord:
    threshold: float
    percent_visible: float
    dice: float
    model: str = ""
    pretrained: bool = False
    seconds: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.percent_visible <= 1.0:
            raise ValueError("percent_visible must be in [0, 1]")
        if not 0.0 <= self.dice <= 1.0:
            raise ValueError("dice must be in [0, 1]")


def threshold_visibility(x: np.ndarray, B: np.ndarray, t: float) -> tuple[np.ndarray, float]:
    """Keep pixels with B <= t, zero the rest in every channel.

    ``x`` is C×H×W (or N×C×H×W with B N×H×W).  Returns the thresholded image
    and the visible fraction.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("threshold must be in [0, 1]")
    keep = np.asarray(B) <= t
    out = np.where(np.expand_dims(keep, -3), x, 0).astype(np.asarray(x).dtype)
    return out, float(keep.mean())


def noise_masks(noise_model: ModelParams, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """B for every image, always in 64-bit.

    A float32 sigmoid saturates at 1 - 2^-24 for logits above ~17, which ties a
    large share of pixels and leaves visibility levels between the tie and 100%
    unreachable by any threshold.
    """
    out = []
    with T.no_grad(), T.precision(64):
        for i in range(0, len(images), batch_size):
            out.append(T.sigmoid(forward(noise_model, Tensor(images[i:i + batch_size]))).data)
    return np.concatenate(out)


def visibility_sweep(utility: ModelParams, noise_model: ModelParams, dataset: Dataset,
                     thresholds: Iterable[float], model_tag: str = "",
                     pretrained: bool = False, masks: Optional[np.ndarray] = None) -> list[MetricsRecord]:
    """Mean utility dice on thresholded images for each threshold (t = 1 always included).

    Rows come back sorted by threshold.
    """
    ts = sorted(set(float(t) for t in thresholds) | {1.0})
    images, targets = dataset.images(), dataset.masks()
    if masks is None:
        masks = noise_masks(noise_model, images)
    rows = []
    for t in ts:
        kept, _ = threshold_visibility(images, masks, t)
        visible = float((masks <= t).reshape(len(masks), -1).mean(axis=1).mean())
        d = mean_dice(predict(utility, kept), targets)
        rows.append(MetricsRecord(t, visible, d, model_tag, pretrained))
    return rows


def dice_near_visibility(utility: ModelParams, noise_model: ModelParams, dataset: Dataset,
                         target: float = 0.5, model_tag: str = "",
                         pretrained: bool = False) -> MetricsRecord:
    """Sweep row whose mean percent_visible is closest to ``target``.

    Candidates are a 0.01 grid plus the pooled ``target``-quantile of B, so a
    saturated mask distribution still offers a threshold near the target.
    """
    masks = noise_masks(noise_model, dataset.images())
    candidates = set(np.round(np.linspace(0, 1, 101), 10).tolist())
    candidates.add(float(np.quantile(masks, target)))
    rows = visibility_sweep(utility, noise_model, dataset, candidates, model_tag, pretrained, masks)
    return min(rows, key=lambda r: (abs(r.percent_visible - target), r.threshold))


def pretraining_comparison(dataset_val: Dataset, utility: ModelParams,
                           get_model: Callable[[str, bool], ModelParams],
                           sizes: Sequence[str] = ("small", "medium", "large")) -> list[MetricsRecord]:
    """Dice at ~50% visibility for each (size, pretrained) cell.

    ``get_model(size, pretrained)`` returns a trained noise model, training it on
    demand if needed.
    """
    rows = []
    for size in sizes:
        for pre in (False, True):
            model = get_model(size, pre)
            rows.append(dice_near_visibility(utility, model, dataset_val, 0.5, size, pre))
    return rows


def runtime_benchmark(methods: dict[str, Callable[[np.ndarray], object]], x: np.ndarray,
                      trials: int = 10, warmup: bool = True) -> list[dict]:
    """Mean wall-clock seconds per call for each method (one untimed warm-up call first)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    host = f"{platform.machine()} {platform.processor() or platform.system()}".strip()
    rows = []
    for name, fn in methods.items():
        if warmup:
            fn(x)
        times = []
        for _ in range(trials):
            t0 = time.perf_counter()
            fn(x)
            times.append(time.perf_counter() - t0)
        rows.append({"method": name, "mean_seconds": float(np.mean(times)), "trials": trials,
                     "input_shape": "x".join(str(s) for s in np.shape(x)), "host": host,
                     "times": times})
    return rows


def sweep_csv(rows: Sequence[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow([r.model, int(r.pretrained), f"{r.threshold:.6f}",
                    f"{r.percent_visible:.6f}", f"{r.dice:.6f}"])
    return buf.getvalue()


def benchmark_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_HEADER)
    for r in rows:
        w.writerow([r["method"], f"{r['mean_seconds']:.6f}", r["trials"], r["input_shape"], r["host"]])
    return buf.getvalue()


def benchmark_text(rows: Sequence[dict]) -> str:
    cells = [["method", "mean seconds", "trials", "input"]]
    cells += [[r["method"], f"{r['mean_seconds']:.6f}", str(r["trials"]), r["input_shape"]] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(4)]
    lines = ["  ".join(c.ljust(wd) for c, wd in zip(row, widths)).rstrip() for row in cells]
    return "\n".join(lines) + "\n"
