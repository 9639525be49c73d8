"""The three training losses: pixel reconstruction, feature alignment, and
their weighted combination.

Both losses are means over every element of every sample, so their magnitude
is independent of image and batch size. The feature target is always treated
as a constant: no gradient ever reaches the high-resolution branch.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    """Relative strength of the two loss terms and the pixel norm choice."""
    alpha: float = 0.5
    beta: float = 1.0
    p: int = 1

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("loss weights must be nonnegative")
        if self.alpha + self.beta <= 0:
            raise ConfigurationError("at least one loss weight must be positive")
        if self.p not in (1, 2):
            raise ConfigurationError(f"p must be 1 or 2, got {self.p!r}")


def reconstruction_loss(sr: Tensor, hr: Tensor, p: int = 1) -> Tensor:
    """Mean |sr - hr|^p over all samples and elements (L1 or L2 pixel loss)."""
    if sr.shape != hr.shape:
        raise DimensionError(
            f"reconstruction_loss: shapes differ, {sr.shape} vs {hr.shape}")
    return T.mean_abs_pow(T.sub(sr, hr.detach()), p)


def feature_loss(f_sr: Tensor, f_hr: Tensor) -> Tensor:
    """Mean squared difference of feature maps; the HR features are constant."""
    if f_sr.shape != f_hr.shape:
        raise DimensionError(
            f"feature_loss: shapes differ, {f_sr.shape} vs {f_hr.shape}")
    return T.mean_abs_pow(T.sub(f_sr, f_hr.detach()), 2)


def total_loss(loss_rec: Tensor, loss_feat: Tensor, weights: LossWeights) -> Tensor:
    """alpha * reconstruction + beta * feature alignment."""
    return T.add(T.scale(loss_rec, weights.alpha), T.scale(loss_feat, weights.beta))
