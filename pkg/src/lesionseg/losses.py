"""Segmentation objectives with analytic gradients w.r.t. the probability map.

Binary cross-entropy and focal loss are means over all elements.  Dice and
(focal) Tversky aggregate soft sums over the whole batch into one overlap
value.  Everything is evaluated in float64; gradients are returned in the
dtype of the prediction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOSSES = ("bce", "dice", "focal", "focal_tversky")
DICE_SMOOTHING = ("denominator", "symmetric")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "bce"
    alpha: float = 0.25
    gamma_focal: float = 2.0
    beta: float = 0.7
    gamma_ftl: float = 4.0 / 3.0
    epsilon: float = 1e-7
    dice_smoothing: str = "denominator"

    def __post_init__(self):
        if self.kind not in LOSSES:
            raise ValueError(f"loss kind must be one of {LOSSES}, got {self.kind!r}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.gamma_focal < 0:
            raise ValueError(f"gamma_focal must be >= 0, got {self.gamma_focal}")
        if not 0 <= self.beta <= 1:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if not 1 <= self.gamma_ftl <= 3:
            raise ValueError(f"gamma_ftl must be in the range [1, 3], got {self.gamma_ftl}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.dice_smoothing not in DICE_SMOOTHING:
            raise ValueError(f"dice_smoothing must be one of {DICE_SMOOTHING}")


def _check(truth, pred):
    p = np.asarray(truth, dtype=np.float64)
    q = np.asarray(pred, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"truth shape {p.shape} != prediction shape {q.shape}")
    if not np.all((q >= 0) & (q <= 1)):
        raise ValueError("predictions must lie in [0, 1]")
    return p, q


def _clamp(q, eps):
    """Clamp into [eps, 1-eps]; returns the clamped value and a pass-through mask."""
    qc = np.clip(q, eps, 1 - eps)
    return qc, (q >= eps) & (q <= 1 - eps)


def bce(truth, pred, cfg: LossConfig | None = None):
    """Mean binary cross-entropy -(p log q + (1-p) log(1-q))."""
    eps = (cfg or LossConfig()).epsilon
    p, q0 = _check(truth, pred)
    q, inside = _clamp(q0, eps)
    n = p.size
    loss = -np.sum(p * np.log(q) + (1 - p) * np.log1p(-q)) / n
    grad = (-p / q + (1 - p) / (1 - q)) / n * inside
    return float(loss), grad.astype(_out_dtype(pred))


def dice_loss(truth, pred, cfg: LossConfig | None = None):
    """Soft Dice loss on global sums.

    ``denominator``: 1 - 2*S_pq / (S_p + S_q + 1)   (smoothing term in the denominator only)
    ``symmetric``:     1 - (2*S_pq + 1) / (S_p + S_q + 1)
    """
    cfg = cfg or LossConfig(kind="dice")
    p, q = _check(truth, pred)
    inter = np.sum(p * q)
    denom = np.sum(p) + np.sum(q) + 1.0
    num = 2 * inter + (1.0 if cfg.dice_smoothing == "symmetric" else 0.0)
    loss = 1 - num / denom
    grad = -(2 * p * denom - num) / denom**2
    return float(loss), grad.astype(_out_dtype(pred))


def focal_loss(truth, pred, cfg: LossConfig | None = None):
    """Mean of -(a (1-q)^g p log q + (1-a) q^g (1-p) log(1-q))."""
    cfg = cfg or LossConfig(kind="focal")
    a, g = cfg.alpha, cfg.gamma_focal
    p, q0 = _check(truth, pred)
    q, inside = _clamp(q0, cfg.epsilon)
    n = p.size
    lq, l1q = np.log(q), np.log1p(-q)
    pos = a * (1 - q) ** g * p
    neg = (1 - a) * q**g * (1 - p)
    loss = -np.sum(pos * lq + neg * l1q) / n
    # d/dq of each term
    dpos = a * p * ((1 - q) ** g / q - g * (1 - q) ** (g - 1) * lq) if g else a * p / q
    dneg = (1 - a) * (1 - p) * (g * q ** (g - 1) * l1q - q**g / (1 - q)) if g else -(1 - a) * (1 - p) / (1 - q)
    grad = -(dpos + dneg) / n * inside
    return float(loss), grad.astype(_out_dtype(pred))


def _tversky_terms(p, q, beta):
    tp = np.sum(p * q)
    fn = np.sum(p * (1 - q))
    fp = np.sum(q * (1 - p))
    return tp, fn, fp, tp + (1 - beta) * fn + beta * fp


def tversky_index(truth, pred, cfg: LossConfig | None = None) -> float:
    """TI = S_pq / (S_pq + (1-b) S_p(1-q) + b S_q(1-p)); 1 when all sums vanish."""
    beta = (cfg or LossConfig()).beta
    p, q = _check(truth, pred)
    tp, fn, fp, denom = _tversky_terms(p, q, beta)
    if denom == 0:
        return 1.0
    return float(tp / denom)


def focal_tversky_loss(truth, pred, cfg: LossConfig | None = None):
    """(1 - TI) ** (1 / gamma_ftl) for the single foreground class."""
    cfg = cfg or LossConfig(kind="focal_tversky")
    b, inv_g = cfg.beta, 1.0 / cfg.gamma_ftl
    p, q = _check(truth, pred)
    tp, fn, fp, denom = _tversky_terms(p, q, b)
    if denom == 0:
        return 0.0, np.zeros_like(q, dtype=_out_dtype(pred))
    ti = tp / denom
    base = max(1.0 - ti, 0.0)
    loss = base**inv_g
    # dTI/dq per element: d tp = p, d fn = -p, d fp = (1-p)
    ddenom = p - (1 - b) * p + b * (1 - p)
    dti = (p * denom - tp * ddenom) / denom**2
    if base > 0:
        dloss = -inv_g * base ** (inv_g - 1) * dti
    else:
        # derivative of base**(1/g) at 0 is infinite for g > 1; use the subgradient 0
        dloss = -dti if inv_g == 1 else np.zeros_like(q)
    return float(loss), dloss.astype(_out_dtype(pred))


def _out_dtype(pred):
    dt = np.asarray(pred).dtype
    return dt if np.issubdtype(dt, np.floating) else np.float64


def compute_loss(cfg: LossConfig, truth, pred):
    """Dispatch on ``cfg.kind``; returns ``(value, grad)``."""
    if cfg.kind == "bce":
        return bce(truth, pred, cfg)
    if cfg.kind == "dice":
        return dice_loss(truth, pred, cfg)
    if cfg.kind == "focal":
        return focal_loss(truth, pred, cfg)
    return focal_tversky_loss(truth, pred, cfg)
