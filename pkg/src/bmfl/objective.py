"""Classification loss, Pearson-correlation fusion term and their weighted sum.

The total is ``l_cls + alpha * l_fusion`` with ``alpha <= 0``, so minimising
it pushes the two fusion features towards positive correlation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from bmfl.errors import ConfigError, DegenerateInputError, DimensionError, InputError
from bmfl.numerics import Tensor, as_tensor, no_grad, pcc_rows
from bmfl.numerics import cross_entropy as _cross_entropy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = -0.4
    enabled_fusion_loss: bool = True

    def __post_init__(self):
        if not self.alpha <= 0.0:
            raise ConfigError(f"alpha must be <= 0, got {self.alpha}")

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.enabled_fusion_loss else 0.0


@dataclass(frozen=True)
class LossReport:
    l_cls: float
    l_fusion: float
    l_total: float
    alpha: float


def cross_entropy(logits, labels) -> Tensor:
    """Mean -log softmax(logits)[label], computed through log-sum-exp."""
    return _cross_entropy(as_tensor(logits), labels)


def pcc(x, y) -> float:
    """Pearson correlation of two vectors from running sums in one pass.

    r = (nΣxy - ΣxΣy) / sqrt((nΣx² - (Σx)²)(nΣy² - (Σy)²)), clamped to [-1, 1].
    """
    x = np.asarray(x, np.float64).ravel()
    y = np.asarray(y, np.float64).ravel()
    if x.shape != y.shape:
        raise DimensionError(f"pcc needs equal lengths, got {x.size} and {y.size}")
    n = x.size
    if n < 2:
        raise InputError(f"pcc needs at least 2 entries, got {n}")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateInputError("pcc undefined: an input has zero variance")
    sx, sy = x.sum(), y.sum()
    num = n * (x * y).sum() - sx * sy
    vx = n * (x * x).sum() - sx * sx
    vy = n * (y * y).sum() - sy * sy
    if vx <= 0 or vy <= 0:
        raise DegenerateInputError("pcc undefined: variance vanished in floating point")
    return float(np.clip(num / np.sqrt(vx * vy), -1.0, 1.0))


def fusion_loss(x_vb, x_bv) -> Tensor:
    """Batch mean of per-sample correlations across the feature axis.

    Zero-variance samples count as 0 and are reported in a warning.
    """
    x_vb, x_bv = as_tensor(x_vb), as_tensor(x_bv)
    if x_vb.shape != x_bv.shape:
        raise DimensionError(f"fusion features differ in shape: {x_vb.shape} vs {x_bv.shape}")
    if x_vb.ndim == 1:
        x_vb, x_bv = x_vb.reshape(1, -1), x_bv.reshape(1, -1)
    if x_vb.ndim != 2 or x_vb.shape[1] < 2:
        raise DimensionError(f"fusion features must be (B, d_f) with d_f >= 2, got {x_vb.shape}")
    r, degenerate = pcc_rows(x_vb, x_bv)
    if degenerate.any():
        log.warning("fusion loss: %d of %d samples have zero variance; counted as 0",
                    int(degenerate.sum()), degenerate.size)
    return r.mean()


def total_loss(logits, labels, x_vb, x_bv, cfg: LossConfig) -> tuple[Tensor, LossReport]:
    """Differentiable total loss and its logged decomposition.

    With the fusion term disabled (or alpha = 0) the returned tensor is the
    classification loss itself; the correlation is still measured for the log
    whenever fusion features exist.
    """
    if cfg.alpha > 0:
        raise ConfigError(f"alpha must be <= 0, got {cfg.alpha}")
    l_cls = cross_entropy(logits, labels)
    alpha = cfg.effective_alpha
    have_features = x_vb is not None and as_tensor(x_vb).shape[-1] >= 2
    if alpha != 0.0 and have_features:
        l_fus = fusion_loss(x_vb, x_bv)
        total = l_cls + l_fus * alpha
    else:
        alpha = 0.0
        total = l_cls
        if have_features:
            with no_grad():
                l_fus = fusion_loss(as_tensor(x_vb).data, as_tensor(x_bv).data)
        else:
            l_fus = Tensor(np.float64(0.0))
    c, f = float(l_cls.data), float(l_fus.data)
    return total, LossReport(c, f, c + alpha * f, alpha)
