"""Derivative-free direct optimization of the combined registration loss.

The search runs coarse-to-fine: a constant (shared across frames) window is
optimized first on smoothed feature maps, where the basin of attraction is
wide, then polished on the sharp maps, and finally all 6*N_w parameters are
refined jointly. The simplex method is used throughout because the loss is
non-smooth where mask boundaries cross voxel cells; a finite-difference
gradient-descent mode is kept as a cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.optimize import minimize

from .errors import ConfigurationError, DegenerateInputError
from .geometry import RigidParams, TransformWindow
from .loss import LossBreakdown, LossWeights, fim_total
from .mind import MindConfig, compute_mind
from .volume import MaskVolume, Volume, window_slab_slices

ROT_STEP_RAD = 0.05
TRANS_STEP_VOX = 2.0


@dataclass
class OptConfig:
    method: str = "nelder-mead"   # or "fd-grad"
    max_iter: int = 500
    tol: float = 1e-4
    restarts: int = 1
    seed: int = 0
    bounds: tuple | None = None    # (lo, hi) 6-vectors, tiled over frames
    coarse_sigma_vox: float = 1.5  # 0 disables the smoothed first stage
    fd_step: float = 1e-3
    fd_lr: float = 0.5

    def __post_init__(self):
        if self.tol <= 0 or self.max_iter <= 0 or self.restarts < 1:
            raise ConfigurationError("tol/iterations/restarts must be positive")
        if self.method not in ("nelder-mead", "fd-grad"):
            raise ConfigurationError(f"unknown method {self.method!r}")


def _coordinate_steps(spacing) -> np.ndarray:
    return np.concatenate([np.full(3, ROT_STEP_RAD),
                           TRANS_STEP_VOX * np.asarray(spacing, float)])


def _nelder_mead(fun, x0, steps, cfg: OptConfig, bounds=None):
    simplex = np.vstack([x0] + [x0 + steps[k] * np.eye(x0.size)[k]
                                for k in range(x0.size)])
    return minimize(fun, x0, method="Nelder-Mead", bounds=bounds,
                    options={"maxiter": cfg.max_iter, "fatol": cfg.tol * 1e-2,
                             "xatol": cfg.tol,
                             "initial_simplex": simplex})


def _fd_descent(fun, x0, steps, cfg: OptConfig) -> np.ndarray:
    """Monotone finite-difference gradient descent with step backtracking."""
    x = x0.copy()
    fx = fun(x)
    lr = cfg.fd_lr
    h = cfg.fd_step * steps
    for _ in range(cfg.max_iter):
        g = np.empty_like(x)
        for k in range(x.size):
            e = np.zeros_like(x)
            e[k] = h[k]
            g[k] = (fun(x + e) - fun(x - e)) / (2 * h[k])
        gn = np.linalg.norm(g)
        if gn == 0:
            break
        step = -lr * steps * g / gn
        fnew = fun(x + step)
        while fnew > fx and lr > 1e-4:
            lr *= 0.5
            step *= 0.5
            fnew = fun(x + step)
        if fnew >= fx - cfg.tol * 1e-3:
            break
        x = x + step
        fx = fnew
    return x


def _smooth_maps(m_fix: Volume, m_mov: MaskVolume, sigma: float):
    """In-plane smoothing for the slab, isotropic for the moving map."""
    fix = gaussian_filter(m_fix.data, (0.0, sigma, sigma)).astype(np.float32)
    mov = np.clip(gaussian_filter(m_mov.data, sigma), 0.0, 1.0)
    return (Volume(fix, m_fix.spacing, m_fix.orientation),
            MaskVolume(mov.astype(np.float32), m_mov.spacing,
                       m_mov.orientation))


def optimize_direct(i_fix: Volume, i_mov: Volume, m_fix: Volume,
                    m_mov: MaskVolume, init: TransformWindow,
                    cfg: OptConfig | None = None,
                    weights: LossWeights | None = None,
                    mind_cfg: MindConfig | None = None,
                    ) -> tuple[TransformWindow, LossBreakdown]:
    """Best-of-restarts minimization; returned loss never exceeds init's."""
    cfg = cfg or OptConfig()
    weights = weights or LossWeights()
    mind_cfg = mind_cfg or MindConfig()
    n_w = init.n_w
    zs = window_slab_slices(i_fix.dims[0], n_w)
    fix_mind = compute_mind(i_fix.data[zs.start:zs.stop], mind_cfg)

    def breakdown(vec: np.ndarray) -> LossBreakdown:
        return fim_total(i_fix, i_mov, m_fix, m_mov,
                         TransformWindow.from_vector(vec, n_w), weights,
                         mind_cfg, fix_mind=fix_mind)

    def fun(vec: np.ndarray) -> float:
        return breakdown(vec).total

    def fun6(v6: np.ndarray) -> float:
        return fun(np.tile(v6, n_w))

    x0 = init.as_vector()
    f0 = fun(x0)
    if not np.isfinite(f0):
        raise DegenerateInputError("non-finite loss at the initial window")

    steps6 = _coordinate_steps(i_fix.spacing)
    steps_full = np.tile(steps6, n_w)
    bounds6 = bounds_full = None
    if cfg.bounds is not None:
        lo = np.asarray(cfg.bounds[0], float)
        hi = np.asarray(cfg.bounds[1], float)
        bounds6 = list(zip(lo, hi))
        bounds_full = bounds6 * n_w

    coarse6 = None
    if cfg.coarse_sigma_vox > 0 and cfg.method == "nelder-mead":
        sm_fix, sm_mov = _smooth_maps(m_fix, m_mov, cfg.coarse_sigma_vox)

        def coarse6(v6):
            return fim_total(i_fix, i_mov, sm_fix, sm_mov,
                             TransformWindow.from_vector(np.tile(v6, n_w),
                                                         n_w),
                             weights, mind_cfg, fix_mind=fix_mind).total

    mean6 = np.mean(x0.reshape(n_w, 6), axis=0)
    rng = np.random.default_rng(cfg.seed)
    best_x, best_f = x0, f0
    for r in range(cfg.restarts):
        start6 = mean6 if r == 0 else mean6 + rng.uniform(-2, 2, 6) * steps6
        if cfg.method == "nelder-mead":
            if coarse6 is not None:
                start6 = _nelder_mead(coarse6, start6, steps6, cfg, bounds6).x
            x6 = _nelder_mead(fun6, start6, 0.25 * steps6, cfg, bounds6).x
            cand = _nelder_mead(fun, np.tile(x6, n_w), 0.1 * steps_full, cfg,
                                bounds_full).x
        else:
            cand = _fd_descent(fun, np.tile(start6, n_w), steps_full, cfg)
        fc = fun(cand)
        if fc < best_f:
            best_x, best_f = cand, fc
    return TransformWindow.from_vector(best_x, n_w), breakdown(best_x)
