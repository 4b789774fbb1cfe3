"""Modality-independent neighbourhood descriptors and the image loss.

The descriptor at a voxel compares a small Gaussian-weighted patch with
the six axis-neighbour patches: each component is exp(-d_r / V) with d_r
the patch SSD for displacement r and V the mean of the six distances,
then the components are normalized so the largest is 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import SizeError
from .geometry import TransformWindow
from .volume import MaskVolume, Volume, warp_slice, window_slab_slices

DISPLACEMENTS = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


@dataclass
class MindConfig:
    patch_radius: int = 1
    gauss_sigma: float = 0.5
    eps_rel: float = 1e-6  # variance floor, relative to image variance

    def __post_init__(self):
        if self.patch_radius < 1 or self.gauss_sigma <= 0:
            raise SizeError("patch_radius >= 1 and gauss_sigma > 0 required")


def _shift(a: np.ndarray, disp) -> np.ndarray:
    """shifted(x) = a(x + disp), with mirror padding at the borders."""
    padded = np.pad(a, 1, mode="symmetric")
    sl = tuple(slice(1 + d, 1 + d + n) for d, n in zip(disp, a.shape))
    return padded[sl]


def patch_distances(data: np.ndarray, cfg: MindConfig) -> np.ndarray:
    """(6, D, H, W) Gaussian-weighted patch SSDs for the six displacements."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 3 or min(data.shape) < 1:
        raise SizeError("MIND expects a non-degenerate 3-D array")
    t = float(cfg.patch_radius) / cfg.gauss_sigma
    out = np.empty((len(DISPLACEMENTS),) + data.shape)
    for k, disp in enumerate(DISPLACEMENTS):
        diff2 = (data - _shift(data, disp)) ** 2
        out[k] = ndimage.gaussian_filter(diff2, cfg.gauss_sigma,
                                         mode="reflect", truncate=t)
    return out


def compute_mind(data: np.ndarray, cfg: MindConfig | None = None) -> np.ndarray:
    """(6, D, H, W) descriptor field, each voxel's max component 1."""
    cfg = cfg or MindConfig()
    d = patch_distances(data, cfg)
    eps = max(cfg.eps_rel * float(np.var(data)), 1e-12)
    v = np.maximum(d.mean(axis=0), eps)
    desc = np.exp(-d / v)
    return desc / desc.max(axis=0, keepdims=True)


def warp_window_slab(mov: Volume, window: TransformWindow, slab_dims,
                     center) -> np.ndarray:
    """(N_w, H, W): per-frame warped slices of ``mov`` at the slab planes."""
    mats = window.matrices(center)
    zs = window_slab_slices(slab_dims[0], window.n_w)
    return np.stack([warp_slice(mov, m, z) for m, z in zip(mats, zs)])


def image_loss(fix_slab: Volume, mov: Volume, mov_mask: MaskVolume,
               window: TransformWindow, cfg: MindConfig | None = None,
               fix_mind: np.ndarray | None = None) -> float:
    """Mean absolute MIND difference between the fixed slab and the
    mask-premultiplied moving image warped per-frame into the slab.

    Restricted to the N_w occupied slab slices; the zero-padded remainder
    of the slab carries no information.
    """
    if mov.dims != mov_mask.dims or mov.dims != fix_slab.dims:
        raise SizeError("fixed, moving and mask grids must agree")
    cfg = cfg or MindConfig()
    masked = Volume(mov.data * mov_mask.data, mov.spacing, mov.orientation)
    warped = warp_window_slab(masked, window, fix_slab.dims, fix_slab.center_mm)
    if fix_mind is None:
        zs = window_slab_slices(fix_slab.dims[0], window.n_w)
        fix_mind = compute_mind(fix_slab.data[zs.start:zs.stop], cfg)
    return float(np.mean(np.abs(fix_mind - compute_mind(warped, cfg))))
