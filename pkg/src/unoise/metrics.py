"""Dice overlap for binary masks."""

import numpy as np


def _check_binary(m: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(m)
    if m.size and not np.isin(m, (0, 1)).all():
        raise ValueError(f"{name} must be binary (values in {{0, 1}})")
    return m.astype(bool)


def dice(pred_mask, target_mask) -> float:
    """2|P∩T| / (|P|+|T|); 1.0 when both masks are empty."""
    p = _check_binary(pred_mask, "pred_mask")
    t = _check_binary(target_mask, "target_mask")
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / total


def mean_dice(preds: np.ndarray, targets: np.ndarray) -> float:
    """Average per-image dice over a batch of N×H×W masks."""
    if len(preds) != len(targets):
        raise ValueError("batch sizes differ")
    return float(np.mean([dice(p, t) for p, t in zip(preds, targets)]))
