"""Feature-Image-Motion loss: soft Dice feature term, MIND image term,
and the transform-sequence regularizer, combined with fixed weights."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, SizeError
from .geometry import TransformWindow
from .mind import MindConfig, image_loss, warp_window_slab
from .volume import MaskVolume, Volume, window_slab_slices

DICE_EPS = 1e-6


@dataclass
class LossWeights:
    lambda1: float = 0.01          # image (MIND) term
    lambda2: float = 0.001         # transform term
    trans_l2_weight: float = 0.01  # deviation-from-identity inside L_d
    trans_grad_weight: float = 0.99


@dataclass
class LossBreakdown:
    feature: float
    image: float
    transform: float
    total: float


def soft_dice(x: np.ndarray, y: np.ndarray, eps: float = DICE_EPS) -> float:
    """Mean of 2xy/(x+y) over the union support {x+y > eps}; 0 if empty."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise SizeError(f"shape mismatch {x.shape} vs {y.shape}")
    s = x + y
    support = s > eps
    if not support.any():
        return 0.0
    return float(np.mean(2.0 * x[support] * y[support] / (s[support] + eps)))


def feature_loss(m_fix_slab: Volume, m_mov: MaskVolume,
                 window: TransformWindow) -> float:
    """Minus mean per-frame Dice between fixed slab slices and the moving
    feature map warped by each frame's transform, on that frame's plane."""
    zs = window_slab_slices(m_fix_slab.dims[0], window.n_w)
    if not np.any(m_fix_slab.data[zs.start:zs.stop] > DICE_EPS):
        raise DegenerateInputError("fixed feature slab is empty on all frames")
    warped = warp_window_slab(m_mov, window, m_fix_slab.dims, m_fix_slab.center_mm)
    total = 0.0
    for i, z in enumerate(zs):
        total += soft_dice(m_fix_slab.data[z], warped[i])
    return -total / window.n_w


def transform_loss(window: TransformWindow, center,
                   w: LossWeights | None = None) -> float:
    """Weighted deviation-from-identity plus second-difference smoothness
    of the per-frame matrices (Frobenius norms)."""
    w = w or LossWeights()
    mats = [t.matrix for t in window.matrices(center)]
    n_w = window.n_w
    l2 = sum(np.linalg.norm(m - np.eye(4)) for m in mats) / n_w
    grad = 0.0
    if n_w >= 3:
        grad = sum(np.linalg.norm(mats[i + 1] + mats[i - 1] - 2 * mats[i])
                   for i in range(1, n_w - 1)) / (n_w - 2)
    return float(w.trans_l2_weight * l2 + w.trans_grad_weight * grad)


def fim_total(i_fix: Volume, i_mov: Volume, m_fix: Volume, m_mov: MaskVolume,
              window: TransformWindow, w: LossWeights | None = None,
              mind_cfg: MindConfig | None = None,
              fix_mind=None) -> LossBreakdown:
    w = w or LossWeights()
    feature = feature_loss(m_fix, m_mov, window)
    image = image_loss(i_fix, i_mov, m_mov, window, mind_cfg, fix_mind=fix_mind)
    transform = transform_loss(window, i_fix.center_mm, w)
    total = feature + w.lambda1 * image + w.lambda2 * transform
    return LossBreakdown(feature, image, transform, total)


def write_loss_log(path, rows: list[dict]) -> None:
    """CSV loss log: epoch, feature, image, transform, total."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "feature", "image",
                                                "transform", "total"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in writer.fieldnames})
