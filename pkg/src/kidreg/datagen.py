"""Training-data generation and the synthetic breathing phantom.

Training pairs are produced by sampling rigid transforms from a
per-parameter truncated (2-sigma) Gaussian model and applying their
inverses to an aligned reference CT, keeping the U/S side untouched.
The phantom provides a CT-like textured volume, a per-frame 2D
"ultrasound" sequence with speckle, and ground-truth breathing motion.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, EmptyMaskError
from .geometry import (RigidParams, RigidTransform, TransformWindow, compose,
                       invert, params_to_matrix)
from .volume import (FrameWindow, MaskVolume, Volume, build_us_window,
                     initial_align, save_volume, load_volume, warp_slice,
                     warp_volume, window_slab_slices)

SIGMA_FLOOR = 1e-3  # rad / mm


@dataclass
class GaussianModel:
    """Per-parameter mean and std of alignment transforms, 2-sigma truncated."""

    mean: np.ndarray  # (6,)
    std: np.ndarray   # (6,), floored at SIGMA_FLOOR
    degenerate: bool = False

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mean - 2 * self.std, self.mean + 2 * self.std


def fit_gaussians(refs: list[RigidParams],
                  sigma_floor: float = SIGMA_FLOOR) -> GaussianModel:
    if len(refs) < 2:
        raise ConfigurationError("need at least 2 reference transforms")
    vecs = np.stack([r.as_vector() for r in refs])
    mean = vecs.mean(axis=0)
    std = vecs.std(axis=0, ddof=0)
    degenerate = bool(np.any(std < sigma_floor))
    return GaussianModel(mean, np.maximum(std, sigma_floor), degenerate)


def sample_transforms(model: GaussianModel, n_t: int,
                      seed: int) -> list[RigidParams]:
    """n_t independent draws, rejection-truncated to [mu-2s, mu+2s]."""
    if n_t < 1:
        raise ConfigurationError("n_t must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_t):
        v = np.empty(6)
        for k in range(6):
            while True:
                x = rng.normal(model.mean[k], model.std[k])
                if abs(x - model.mean[k]) <= 2 * model.std[k]:
                    v[k] = x
                    break
        out.append(RigidParams.from_vector(v))
    return out


def save_reference_params(path, refs: list[RigidParams]) -> None:
    doc = [{"rot_rad": list(r.rot), "trans_mm": list(r.trans)} for r in refs]
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_reference_params(path) -> list[RigidParams]:
    with open(path) as fh:
        doc = json.load(fh)
    return [RigidParams(d["rot_rad"], d["trans_mm"]) for d in doc]


# ---------------------------------------------------------------------------
# phantom


@dataclass
class PhantomConfig:
    dims: tuple[int, int, int] = (32, 56, 72)
    spacing: float = 3.2
    frames_per_cycle: int = 24
    n_cycles: int = 2
    frame_rate: float = 20.0
    # breathing amplitudes: inferior-superior / anterior-posterior mm,
    # rotation about the depth axis in degrees
    amp_is_mm: float = 8.0
    amp_ap_mm: float = 2.0
    amp_rot_deg: float = 3.0
    # kidney ellipsoid semi-axes (mm) and offset from grid center (mm)
    semi_axes_mm: tuple[float, float, float] = (28.0, 42.0, 55.0)
    offset_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    speckle: float = 1.0  # 0 disables, 1 full multiplicative speckle
    blur_vox: float = 1.0

    def __post_init__(self):
        if min(self.dims) < 8 or self.spacing <= 0 or self.frames_per_cycle < 2:
            raise ConfigurationError("degenerate phantom geometry")
        if min(self.semi_axes_mm) <= self.spacing:
            raise ConfigurationError("kidney thinner than one voxel")


@dataclass
class PhantomCase:
    ct: Volume
    ct_mask: MaskVolume
    frames: list[np.ndarray]
    frame_masks: list[np.ndarray]   # binary: segmentation targets, contours
    gt: list[RigidParams]
    cycle_frames: int
    frame_rate: float
    frame_maps: list[np.ndarray] | None = None  # soft feature maps in [0,1]

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def spacing2d(self) -> np.ndarray:
        return self.ct.spacing[1:]

    def frame_window(self, t: int, n_w: int, masks=False,
                     maps=False) -> FrameWindow:
        """Clamped window of n_w frames centered on frame t."""
        if maps:
            source = self.frame_maps if self.frame_maps is not None \
                else self.frame_masks
        elif masks:
            source = self.frame_masks
        else:
            source = self.frames
        idx = [min(max(t + k - n_w // 2, 0), self.n_frames - 1)
               for k in range(n_w)]
        return FrameWindow([source[i] for i in idx], self.spacing2d,
                           self.frame_rate)


def breathing_params(cfg: PhantomConfig, t: int) -> RigidParams:
    """Periodic ground-truth motion for frame t (identity at t = 0)."""
    phase = 2.0 * np.pi * t / cfg.frames_per_cycle
    lift = 0.5 * (1.0 - np.cos(phase))  # 0..1, smooth, period-exact
    rot = np.array([np.deg2rad(cfg.amp_rot_deg) * np.sin(phase), 0.0, 0.0])
    trans = np.array([0.0, cfg.amp_ap_mm * np.sin(phase),
                      cfg.amp_is_mm * lift])
    return RigidParams(rot, trans)


def make_phantom(cfg: PhantomConfig, seed: int) -> PhantomCase:
    """Textured ellipsoidal "kidney" CT plus a speckled slice sequence."""
    rng = np.random.default_rng(seed)
    dims = cfg.dims
    sp = np.full(3, cfg.spacing)
    idx = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"),
                   axis=-1).astype(np.float64)
    mm = idx * sp
    center = (np.array(dims) - 1.0) / 2.0 * sp + np.asarray(cfg.offset_mm)
    rel = (mm - center) / np.asarray(cfg.semi_axes_mm)
    r2 = (rel ** 2).sum(axis=-1)
    mask = (r2 <= 1.0).astype(np.float32)
    if not mask.any():
        raise ConfigurationError("kidney ellipsoid does not intersect the grid")
    # smooth internal texture + soft background so MIND has structure
    texture = 0.55 + 0.25 * np.sin(mm[..., 2] / 9.0) * np.cos(mm[..., 1] / 7.0)
    texture += 0.2 * (1.0 - r2.clip(0.0, 1.0))
    background = 0.08 + 0.05 * gaussian_filter(rng.normal(size=dims), 2.0)
    ct_data = np.clip(np.where(mask > 0, texture, background), 0.0, None)
    ct = Volume(ct_data.astype(np.float32), sp)
    ct_mask = MaskVolume(mask, sp)

    n_frames = cfg.frames_per_cycle * cfg.n_cycles
    zc = dims[0] // 2
    frames, frame_masks, frame_maps, gt = [], [], [], []
    for t in range(n_frames):
        p = breathing_params(cfg, t)
        m = params_to_matrix(p, ct.center_mm)
        img = warp_slice(ct, m, zc)
        soft = np.clip(warp_slice(ct_mask, m, zc), 0.0, 1.0).astype(np.float32)
        msk = (soft >= 0.5).astype(np.float32)
        if not msk.any():
            raise EmptyMaskError(f"phantom frame {t} has empty kidney mask")
        if cfg.speckle > 0:
            u = rng.uniform(0.0, 2.25, size=img.shape)
            mult = 1.0 + cfg.speckle * (np.sqrt(u) - 1.0)  # unit mean
            img = img * mult
        if cfg.blur_vox > 0:
            img = gaussian_filter(img, cfg.blur_vox)
        frames.append(img.astype(np.float32))
        frame_masks.append(msk)
        frame_maps.append(soft)
        gt.append(p)
    return PhantomCase(ct, ct_mask, frames, frame_masks, gt,
                       cfg.frames_per_cycle, cfg.frame_rate, frame_maps)


# ---------------------------------------------------------------------------
# training pairs


@dataclass
class ReferencePair:
    """An aligned CT / U-S window pair on the registration grid."""

    mov_img: Volume
    mov_mask: MaskVolume
    fix_img: Volume    # U/S window slab
    fix_mask: Volume   # U/S feature-map slab
    n_w: int


@dataclass
class TrainingPair:
    mov_img: Volume
    mov_mask: MaskVolume
    fix_img: Volume
    fix_mask: Volume
    recovery: RigidParams
    applied_inverse: RigidTransform


def make_reference_pair(case: PhantomCase, frame: int, n_w: int,
                        slab_dims=None) -> ReferencePair:
    """Build the aligned reference pair around ``frame`` of a phantom.

    The CT is posed at the frame's ground-truth transform, which by
    construction is the exact alignment with the frame sequence — the
    phantom stands in for a clinically verified reference plane, so the
    centroid-based initial alignment is not needed here.
    """
    slab_dims = slab_dims or case.ct.dims
    fix_img = build_us_window(case.frame_window(frame, n_w), slab_dims)
    fix_mask = build_us_window(case.frame_window(frame, n_w, maps=True),
                               slab_dims)
    gt_mat = params_to_matrix(case.gt[frame], case.ct.center_mm)
    mov_img = warp_volume(case.ct, gt_mat)
    mov_mask = MaskVolume(warp_volume(case.ct_mask, gt_mat).data,
                          case.ct_mask.spacing)
    return ReferencePair(mov_img, mov_mask, fix_img, fix_mask, n_w)


def generate_pairs(reference: ReferencePair,
                   ts: list[RigidParams]) -> list[TrainingPair]:
    """One pair per transform: CT moved away by the inverse, U/S untouched."""
    if not ts:
        raise ConfigurationError("no transforms to generate pairs from")
    center = reference.mov_img.center_mm
    pairs = []
    for p in ts:
        inv = invert(params_to_matrix(p, center))
        mov_img = warp_volume(reference.mov_img, inv)
        mov_mask = MaskVolume(warp_volume(reference.mov_mask, inv).data,
                              reference.mov_mask.spacing)
        pairs.append(TrainingPair(mov_img, mov_mask, reference.fix_img,
                                  reference.fix_mask, p, inv))
    return pairs


# ---------------------------------------------------------------------------
# phantom case directory format


def save_phantom(dirpath: str, case: PhantomCase) -> None:
    os.makedirs(dirpath, exist_ok=True)
    save_volume(os.path.join(dirpath, "ct.json"), case.ct)
    save_volume(os.path.join(dirpath, "ct_mask.json"), case.ct_mask)
    sp2 = case.spacing2d
    manifest = {
        "n_frames": case.n_frames,
        "cycle_frames": case.cycle_frames,
        "frame_rate": case.frame_rate,
        "frame_spacing_mm": list(sp2),
        "frames": [],
    }
    maps = case.frame_maps or case.frame_masks
    for t, (img, msk, smap, p) in enumerate(zip(case.frames, case.frame_masks,
                                                maps, case.gt)):
        name = f"frame_{t:04d}"
        img.astype("<f4").tofile(os.path.join(dirpath, name + ".raw"))
        msk.astype("<f4").tofile(os.path.join(dirpath, name + "_mask.raw"))
        smap.astype("<f4").tofile(os.path.join(dirpath, name + "_map.raw"))
        manifest["frames"].append({
            "image": name + ".raw", "mask": name + "_mask.raw",
            "map": name + "_map.raw",
            "dims": list(img.shape),
            "gt": {"rot_rad": list(p.rot), "trans_mm": list(p.trans)},
        })
    with open(os.path.join(dirpath, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_phantom(dirpath: str) -> PhantomCase:
    with open(os.path.join(dirpath, "manifest.json")) as fh:
        manifest = json.load(fh)
    ct = load_volume(os.path.join(dirpath, "ct.json"))
    ct_mask = load_volume(os.path.join(dirpath, "ct_mask.json"), MaskVolume)
    frames, frame_masks, frame_maps, gt = [], [], [], []
    for entry in manifest["frames"]:
        dims = tuple(entry["dims"])
        img = np.fromfile(os.path.join(dirpath, entry["image"]),
                          dtype="<f4").reshape(dims)
        msk = np.fromfile(os.path.join(dirpath, entry["mask"]),
                          dtype="<f4").reshape(dims)
        frames.append(img)
        frame_masks.append(msk)
        if "map" in entry:
            frame_maps.append(np.fromfile(os.path.join(dirpath, entry["map"]),
                                          dtype="<f4").reshape(dims))
        gt.append(RigidParams(entry["gt"]["rot_rad"], entry["gt"]["trans_mm"]))
    return PhantomCase(ct, ct_mask, frames, frame_masks, gt,
                       manifest["cycle_frames"], manifest["frame_rate"],
                       frame_maps or None)
