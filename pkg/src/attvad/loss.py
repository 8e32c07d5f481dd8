"""Frame-level cross entropy and focal loss.

All functions work on plain floats/arrays and on traced values alike.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossSpec:
    kind: str = "ce"
    gamma: float = 0.0
    clamp: float = PROB_CLAMP

    def __post_init__(self):
        object.__setattr__(self, "kind", self.kind.lower())
        if self.kind not in ("ce", "fl"):
            raise ValueError(f"loss kind must be 'ce' or 'fl', got {self.kind!r}")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not 0 < self.clamp < 0.5:
            raise ValueError("probability clamp must lie in (0, 0.5)")

    @property
    def effective_gamma(self) -> float:
        return self.gamma if self.kind == "fl" else 0.0


def y_t(yhat, y):
    """Probability assigned to the true class: ``yhat`` where ``y == 1``, else ``1 - yhat``."""
    y = np.asarray(y, dtype=np.float64)
    if ad.value_of(yhat).ndim == 0 and y.ndim == 0:
        return yhat if y == 1 else ad.sub(1.0, yhat)
    if y.shape != ad.value_of(yhat).shape:
        y = y.reshape(ad.value_of(yhat).shape)
    # y*yhat + (1-y)*(1-yhat), with y a constant 0/1 mask
    return ad.add(ad.mul(yhat, y), ad.mul(ad.sub(1.0, yhat), 1.0 - y))


def _clamped_yt(yhat, y, clamp):
    return y_t(ad.clamp(yhat, clamp, 1.0 - clamp), y)


def ce_loss(yhat, y, clamp: float = PROB_CLAMP):
    """Per-frame ``-log(y_t)`` after clamping ``yhat`` into ``[clamp, 1 - clamp]``."""
    return ad.neg(ad.log(_clamped_yt(yhat, y, clamp)))


def focal_loss(yhat, y, gamma: float, clamp: float = PROB_CLAMP):
    """Per-frame ``-(1 - y_t)**gamma * log(y_t)``; identical to :func:`ce_loss` at ``gamma == 0``."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if gamma == 0:
        return ce_loss(yhat, y, clamp)
    yt = _clamped_yt(yhat, y, clamp)
    return ad.neg(ad.mul(ad.power(ad.sub(1.0, yt), gamma), ad.log(yt)))


def frame_losses(spec: LossSpec, yhat, y):
    return focal_loss(yhat, y, spec.effective_gamma, spec.clamp)


def batch_loss(spec: LossSpec, yhat, y):
    """Mean per-frame loss over every frame in the batch."""
    n = ad.value_of(yhat).size
    if n == 0:
        raise ValueError("batch_loss: empty batch")
    if np.asarray(y).size != n:
        raise ValueError(f"batch_loss: {n} predictions but {np.asarray(y).size} labels")
    return ad.mean(frame_losses(spec, yhat, y))
