"""Utility-model training and noise-mask (interpretability model) training."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .data import Dataset
from .metrics import mean_dice
from .tensor import RngStream, Tensor
from .unet import (CLASS_LOGITS, SINGLE_LOGIT, ModelParams, UNetConfig, build, check_input,
                   forward, param_digest, predict, reinit_head)

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Raised when the loss stops being finite.  ``last_good`` holds the previous epoch's params."""

    def __init__(self, message: str, last_good: Optional[ModelParams], epoch: int):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch


@dataclass
class OptimizerSettings:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0


@dataclass
class NoiseTrainConfig:
    # lam picked by scripts/lambda_sweep.sh: largest value keeping noised dice >= 95% of clean
    lam: float = 0.05
    sigma_min: float = 0.05
    # 0.5 already swamps the 0.5 object contrast; larger values make the utility hallucinate
    sigma_max: float = 0.5
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 100
    seed: int = 0
    log_floor: float = 1e-6
    pretrain: bool = False
    pretrain_epochs: int = 10

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0 <= self.sigma_min < self.sigma_max:
            raise ValueError("need 0 <= sigma_min < sigma_max")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


class Adam:
    def __init__(self, params: list[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _check_finite(value: float, what: str, last_good, epoch: int) -> None:
    if not math.isfinite(value):
        raise TrainingDivergedError(
            f"{what} became non-finite in epoch {epoch}; last good params are from epoch {epoch - 1}",
            last_good, epoch)


def write_csv(path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------- utility model

def train_segmentation(model: ModelParams, train: Dataset, val: Optional[Dataset],
                       opts: OptimizerSettings,
                       on_epoch: Optional[Callable[[dict], None]] = None) -> list[dict]:
    """Cross-entropy training of a class-logits model in place; returns per-epoch history."""
    if len(train) == 0:
        raise ValueError("training set is empty")
    check_input(model.config, (1,) + train.image_shape)
    x_all, y_all = train.images(), train.masks()
    rng = np.random.default_rng(opts.seed)
    opt = Adam(list(model), opts.lr, opts.beta1, opts.beta2, opts.eps)
    history = []
    last_good = model.copy()
    for epoch in range(1, opts.epochs + 1):
        losses = []
        for idx in _batches(len(x_all), opts.batch_size, rng):
            opt.zero_grad()
            loss = T.softmax_cross_entropy(forward(model, Tensor(x_all[idx])), y_all[idx])
            _check_finite(float(loss.data), "loss", last_good, epoch)
            T.backward(loss)
            opt.step()
            losses.append(float(loss.data))
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        if val is not None and len(val):
            row["val_dice"] = mean_dice(predict(model, val.images()), val.masks())
        history.append(row)
        last_good = model.copy()
        logger.info("segmentation epoch %d: %s", epoch, row)
        if on_epoch:
            on_epoch(row)
    return history


def train_utility(train: Dataset, val: Optional[Dataset], config: UNetConfig,
                  opts: OptimizerSettings, init_seed: Optional[int] = None) -> tuple[ModelParams, list[dict]]:
    if config.head != CLASS_LOGITS:
        raise ValueError("utility model needs a class-logits head")
    model = build(config, opts.seed if init_seed is None else init_seed)
    history = train_segmentation(model, train, val, opts)
    model.provenance = "utility-checkpoint"
    if history and "val_dice" in history[-1]:
        model.meta["val_dice"] = history[-1]["val_dice"]
    model.meta["epochs"] = opts.epochs
    return model, history


# ---------------------------------------------------------------- noise objective

def apply_noise(x: Tensor, mask: Tensor, sigma_min: float, sigma_max: float, eps) -> Tensor:
    """x' = x + (sigma_min + B·(sigma_max − sigma_min))·eps, broadcast over channels.

    ``x`` is N×C×H×W, ``mask`` (B) and ``eps`` are N×H×W.  ``eps`` is a
    constant; gradients flow through ``mask`` only.
    """
    b = mask.data
    if np.any(b <= 0) or np.any(b >= 1):
        raise ValueError("noise mask values must lie strictly inside (0, 1)")
    n, c, h, w = x.shape
    if mask.shape != (n, h, w):
        raise ValueError(f"mask shape {mask.shape} does not match image {x.shape}")
    eps = Tensor(eps.data if isinstance(eps, Tensor) else eps)
    if eps.shape != (n, h, w):
        raise ValueError(f"epsilon shape {eps.shape} does not match image {x.shape}")
    sigma = T.scalar_add(T.scalar_mul(mask, sigma_max - sigma_min), sigma_min)
    delta = T.reshape(T.mul(sigma, eps), (n, 1, h, w))
    if c > 1:
        delta = T.concat_channels([delta] * c)
    return T.add(x, delta)


def noise_term(mask: Tensor, log_floor: float) -> Tensor:
    """mean(−log max(B, floor)) over all pixels."""
    return T.scalar_mul(T.mean(T.log(T.clamp_min(mask, log_floor))), -1.0)


def unoise_loss(x, y, noise_logits: Tensor, utility, cfg: NoiseTrainConfig, eps) -> tuple[Tensor, dict]:
    """Noise-mask objective: CE(U(x'), y) − λ·mean(log B).

    ``utility`` is a ModelParams (run through :func:`forward`) or any callable
    mapping a Tensor to logits.  ``eps`` is an N×H×W array or an RngStream to
    draw it from.  Returns the loss and its parts as floats.
    """
    x = T.as_tensor(x)
    mask = T.sigmoid(noise_logits)
    if isinstance(eps, RngStream):
        eps = eps.normal(mask.shape)
    noised = apply_noise(x, mask, cfg.sigma_min, cfg.sigma_max, eps)
    logits = forward(utility, noised) if isinstance(utility, ModelParams) else utility(noised)
    l_util = T.softmax_cross_entropy(logits, y)
    l_noise = noise_term(mask, cfg.log_floor)
    loss = T.add(l_util, T.scalar_mul(l_noise, cfg.lam)) if cfg.lam else l_util
    parts = {"utility_loss": float(l_util.data), "noise_term": float(l_noise.data),
             "mean_B": float(mask.data.mean())}
    return loss, parts


def noised_dice(utility: ModelParams, noise_model: ModelParams, ds: Dataset,
                cfg: NoiseTrainConfig, stream: RngStream, batch_size: int = 32) -> tuple[float, float]:
    """(mean dice of U on noised images vs ground truth, mean B) with fresh ε draws."""
    preds, means = [], []
    x_all = ds.images()
    with T.no_grad():
        for i in range(0, len(x_all), batch_size):
            x = Tensor(x_all[i:i + batch_size])
            mask = T.sigmoid(forward(noise_model, x))
            eps = stream.normal(mask.shape)
            noised = apply_noise(x, mask, cfg.sigma_min, cfg.sigma_max, eps)
            preds.append(forward(utility, noised).data.argmax(axis=1))
            means.append(mask.data.reshape(x.shape[0], -1).mean(axis=1))
    return mean_dice(np.concatenate(preds), ds.masks()), float(np.concatenate(means).mean())


def train_unoise(train: Dataset, val: Optional[Dataset], utility: ModelParams,
                 noise_config: UNetConfig, cfg: NoiseTrainConfig,
                 init: Optional[ModelParams] = None,
                 on_epoch: Optional[Callable[[dict], None]] = None) -> tuple[ModelParams, list[dict]]:
    """Train the noise model against a frozen utility model.

    ``init`` supplies starting parameters (e.g. from :func:`pretrain_noise_model`);
    otherwise a fresh model is built from ``noise_config`` with ``cfg.seed``.
    """
    if noise_config.head != SINGLE_LOGIT:
        raise ValueError("noise model needs a single-channel-logit head")
    check_input(utility.config, (1,) + train.image_shape)
    check_input(noise_config, (1,) + train.image_shape)
    model = init.copy() if init is not None else build(noise_config, cfg.seed)
    if model.config != noise_config:
        raise ValueError(f"init params have config {model.config}, expected {noise_config}")
    model.set_requires_grad(True)

    frozen_flags = [p.requires_grad for p in utility]
    utility.set_requires_grad(False)
    digest_before = param_digest(utility)

    x_all, y_all = train.images(), train.masks()
    rng = np.random.default_rng(cfg.seed)
    stream = RngStream(cfg.seed)
    val_stream = RngStream(cfg.seed).substream(1)
    opt = Adam(list(model), cfg.lr)
    history = []
    last_good = model.copy()
    try:
        for epoch in range(1, cfg.epochs + 1):
            sums = {"utility_loss": 0.0, "noise_term": 0.0, "mean_B": 0.0}
            n_seen = 0
            for idx in _batches(len(x_all), cfg.batch_size, rng):
                opt.zero_grad()
                x = Tensor(x_all[idx])
                logits = forward(model, x)
                loss, parts = unoise_loss(x, y_all[idx], logits, utility, cfg, stream)
                _check_finite(float(loss.data), "loss", last_good, epoch)
                T.backward(loss)
                opt.step()
                for k in sums:
                    sums[k] += parts[k] * len(idx)
                n_seen += len(idx)
            row = {"epoch": epoch, **{k: v / n_seen for k, v in sums.items()}}
            if val is not None and len(val):
                row["val_dice"], row["val_mean_B"] = noised_dice(utility, model, val, cfg, val_stream)
            history.append(row)
            last_good = model.copy()
            logger.info("noise epoch %d: %s", epoch, row)
            if on_epoch:
                on_epoch(row)
    finally:
        for p, flag in zip(utility, frozen_flags):
            p.requires_grad = flag
            p.grad = None
    if param_digest(utility) != digest_before:
        raise AssertionError("utility parameters changed during noise training")
    model.meta.update({"lam": cfg.lam, "sigma_min": cfg.sigma_min, "sigma_max": cfg.sigma_max,
                       "epochs": cfg.epochs, "pretrained": model.provenance == "pretrained-segmentation"})
    return model, history


def pretrain_noise_model(train: Dataset, val: Optional[Dataset], noise_config: UNetConfig,
                         opts: OptimizerSettings, n_classes: int = 2) -> tuple[ModelParams, ModelParams]:
    """Train the noise architecture on segmentation, then swap in a fresh single-logit head.

    Returns ``(noise_init, segmentation_model)``; the second is kept so callers can
    verify which parameters were carried over.
    """
    seg_config = noise_config.with_head(CLASS_LOGITS, n_classes)
    seg = build(seg_config, opts.seed)
    train_segmentation(seg, train, val, opts)
    noise = reinit_head(seg, SINGLE_LOGIT, 1, init_seed=opts.seed + 1)
    noise.provenance = "pretrained-segmentation"
    return noise, seg
