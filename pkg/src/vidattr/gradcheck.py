"""Finite-difference verification of the model's analytic gradients."""
from __future__ import annotations

import math
import warnings
from typing import Callable

import numpy as np

from .errors import NumericalError
from .model import ModelParams, forward
from .training import loss_and_grads, multitask_loss

GradientFn = Callable[[ModelParams, np.ndarray, np.ndarray], dict[str, np.ndarray]]


def _analytic(model: ModelParams, frames: np.ndarray, labels: np.ndarray) -> dict[str, np.ndarray]:
    return loss_and_grads(model, frames, labels)[2]


def _loss_value(model: ModelParams, frames: np.ndarray, labels: np.ndarray) -> float:
    loss, _ = multitask_loss(forward(model, frames).logits, labels)
    return loss.item()


def grad_check(
    model: ModelParams,
    frames: np.ndarray,
    labels: np.ndarray,
    epsilon: float = 1e-5,
    num_coords: int = 200,
    seed: int = 0,
    gradient_fn: GradientFn = _analytic,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples at least ``num_coords`` coordinates spread over every parameter
    tensor. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    The check always runs in float64.
    """
    model = model.astype(np.float64)
    frames = np.asarray(frames, dtype=np.float64)
    names = model.names()
    if not names:
        warnings.warn("model has no parameters; gradient check is vacuous", stacklevel=2)
        return 0.0
    base = _loss_value(model, frames, labels)
    if not math.isfinite(base):
        raise NumericalError(f"non-finite loss {base} in gradient check")
    analytic = gradient_fn(model, frames, labels)

    rng = np.random.default_rng(seed)
    counts = _allocate(num_coords, [model.params[n].size for n in names])
    worst = 0.0
    for name, count in zip(names, counts):
        p = model.params[name]
        flat_idx = rng.choice(p.size, size=count, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, p.shape)
            orig = p[idx]
            p[idx] = orig + epsilon
            up = _loss_value(model, frames, labels)
            p[idx] = orig - epsilon
            down = _loss_value(model, frames, labels)
            p[idx] = orig
            numeric = (up - down) / (2 * epsilon)
            a = float(analytic[name][idx])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst


def _allocate(total: int, sizes: list[int]) -> list[int]:
    """Spread ``total`` samples over tensors, at least one each, capped by size."""
    counts = [1] * len(sizes)
    remaining = total - len(sizes)
    while remaining > 0:
        open_slots = [i for i, (c, s) in enumerate(zip(counts, sizes)) if c < s]
        if not open_slots:
            break
        for i in open_slots[:remaining]:
            counts[i] += 1
        remaining -= min(remaining, len(open_slots))
    return counts
