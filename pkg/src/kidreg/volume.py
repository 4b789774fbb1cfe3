"""3D grid data model and resampling/cropping/warping operations.

Volumes are stored as (D, H, W) float32 arrays with per-axis spacing in
mm. The canonical orientation is "RAI": axis 0 runs right -> left (and
doubles as the time axis for U/S frame slabs), axis 1 anterior ->
posterior, axis 2 inferior -> superior.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage import measure

from .errors import (
    EmptyMaskError,
    InvalidParameterError,
    SizeError,
)
from .geometry import RigidTransform, invert

CANONICAL_ORIENTATION = "RAI"
_AXIS_LETTERS = {"R": (0, +1), "L": (0, -1), "A": (1, +1), "P": (1, -1),
                 "I": (2, +1), "S": (2, -1)}


@dataclass
class Volume:
    """Scalar 3D grid. ``data`` is (D, H, W) float32, ``spacing`` mm/voxel."""

    data: np.ndarray
    spacing: np.ndarray
    orientation: str = CANONICAL_ORIENTATION

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.spacing = np.asarray(self.spacing, dtype=np.float64)
        if self.data.ndim != 3:
            raise SizeError(f"volume must be 3-D, got shape {self.data.shape}")
        if self.spacing.shape != (3,) or np.any(self.spacing <= 0):
            raise InvalidParameterError("spacing must be 3 positive values (mm)")
        if not np.all(np.isfinite(self.data)):
            raise InvalidParameterError("volume values must be finite")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def center_mm(self) -> np.ndarray:
        """Geometric center of the grid (mm), the default rotation pivot."""
        return (np.array(self.dims, dtype=np.float64) - 1.0) / 2.0 * self.spacing

    def copy(self) -> "Volume":
        return type(self)(self.data.copy(), self.spacing.copy(), self.orientation)


class MaskVolume(Volume):
    """Volume whose values live in [0, 1] (soft or binary masks)."""

    def __post_init__(self):
        super().__post_init__()
        if self.data.size and (self.data.min() < 0 or self.data.max() > 1):
            raise InvalidParameterError("mask values must lie in [0, 1]")

    def centroid_mm(self) -> np.ndarray:
        w = self.data.astype(np.float64)
        total = w.sum()
        if total <= 0:
            raise EmptyMaskError("mask has no foreground")
        idx = np.stack(np.meshgrid(*[np.arange(d) for d in self.dims],
                                   indexing="ij"), axis=-1)
        return (w[..., None] * idx).sum(axis=(0, 1, 2)) / total * self.spacing


@dataclass
class FrameWindow:
    """N_w consecutive 2D frames (H, W); the middle one is the target."""

    frames: list[np.ndarray]
    spacing: np.ndarray  # in-plane (mm, mm)
    frame_rate: float = 20.0

    def __post_init__(self):
        self.frames = [np.asarray(f, dtype=np.float32) for f in self.frames]
        self.spacing = np.asarray(self.spacing, dtype=np.float64)
        if len(self.frames) % 2 != 1:
            raise SizeError("window size must be odd")
        shape = self.frames[0].shape
        if any(f.shape != shape or f.ndim != 2 for f in self.frames):
            raise SizeError("all frames must be 2-D with identical shape")

    @property
    def n_w(self) -> int:
        return len(self.frames)

    @property
    def middle(self) -> int:
        return len(self.frames) // 2


def canonicalize(v: Volume) -> Volume:
    """Permute/flip axes so the volume is in RAI orientation."""
    code = v.orientation.upper()
    if sorted(_AXIS_LETTERS[ch][0] for ch in code) != [0, 1, 2]:
        raise InvalidParameterError(f"invalid orientation code {v.orientation!r}")
    perm = [0, 0, 0]
    flips = []
    for src_axis, ch in enumerate(code):
        tgt_axis, sign = _AXIS_LETTERS[ch]
        perm[tgt_axis] = src_axis
        if sign < 0:
            flips.append(tgt_axis)
    data = np.transpose(v.data, perm)
    if flips:
        data = np.flip(data, axis=flips)
    spacing = v.spacing[perm]
    return type(v)(np.ascontiguousarray(data), spacing, CANONICAL_ORIENTATION)


def resample_isotropic(v: Volume, target: float = 0.8) -> Volume:
    """Trilinear resample onto an isotropic grid of ``target`` mm."""
    if target <= 0:
        raise InvalidParameterError("target spacing must be positive")
    if np.allclose(v.spacing, target):
        return v.copy()
    out_dims = np.maximum(1, np.round(np.array(v.dims) * v.spacing / target)).astype(int)
    # sample at out-index * target / spacing in source index space
    coords = np.meshgrid(*[np.arange(d) * target / s
                           for d, s in zip(out_dims, v.spacing)], indexing="ij")
    data = ndimage.map_coordinates(v.data, coords, order=1, mode="nearest")
    return type(v)(data.astype(np.float32), np.full(3, target), v.orientation)


def crop_pad_about_centroid(v: Volume, m: MaskVolume,
                            out_dims: tuple[int, int, int]) -> tuple[Volume, MaskVolume]:
    """Crop/zero-pad both grids so the mask centroid sits at the output center."""
    if v.dims != m.dims:
        raise SizeError("volume and mask grids differ")
    c_idx = np.round(m.centroid_mm() / m.spacing).astype(int)
    out_dims = tuple(int(d) for d in out_dims)

    def _reframe(src):
        out = np.zeros(out_dims, dtype=np.float32)
        for_axis = []
        for ax in range(3):
            start = c_idx[ax] - out_dims[ax] // 2
            src_lo = max(0, start)
            src_hi = min(src.shape[ax], start + out_dims[ax])
            dst_lo = src_lo - start
            dst_hi = dst_lo + (src_hi - src_lo)
            for_axis.append((slice(src_lo, src_hi), slice(dst_lo, dst_hi)))
        if all(s.stop > s.start for s, _ in for_axis):
            out[tuple(d for _, d in for_axis)] = src[tuple(s for s, _ in for_axis)]
        return out

    return (Volume(_reframe(v.data), v.spacing, v.orientation),
            MaskVolume(_reframe(m.data), m.spacing, m.orientation))


def window_slab_slices(depth: int, n_w: int) -> range:
    """Depth indices holding the N_w frames of a centered window slab."""
    c = depth // 2
    return range(c - n_w // 2, c - n_w // 2 + n_w)


def build_us_window(w: FrameWindow, out_dims: tuple[int, int, int],
                    kind=Volume) -> Volume:
    """Center the frame stack as depth slices of a zero-padded volume.

    Frame i lands on depth slice c - n_w//2 + i (c = D//2), so the middle
    frame sits exactly on the central plane; the in-plane content is
    centered with zero padding.
    """
    d, h, w_out = (int(x) for x in out_dims)
    fh, fw = w.frames[0].shape
    if fh > h or fw > w_out or w.n_w > d:
        raise SizeError("frames do not fit the output dims")
    out = np.zeros((d, h, w_out), dtype=np.float32)
    oy, ox = (h - fh) // 2, (w_out - fw) // 2
    for i, z in enumerate(window_slab_slices(d, w.n_w)):
        out[z, oy:oy + fh, ox:ox + fw] = w.frames[i]
    spacing = np.array([w.spacing[0], w.spacing[0], w.spacing[1]], dtype=np.float64)
    return kind(out, spacing)


def initial_align(ct_map: MaskVolume, us_window_map: MaskVolume) -> RigidTransform:
    """Translation-only global alignment of the CT onto the U/S window slab.

    Depth and anterior-posterior components match the U/S middle-frame
    centroid; the inferior-superior component is standardized to the slab
    center regardless of where the kidney sits in the U/S field of view.
    """
    ct_c = ct_map.centroid_mm()
    us_c = us_window_map.centroid_mm()
    target = np.array([us_c[0], us_c[1], us_window_map.center_mm[2]])
    m = np.eye(4)
    m[:3, 3] = target - ct_c
    return RigidTransform(m)


def warp_volume(v: Volume, t: RigidTransform) -> Volume:
    """Pull-resample: out(x) = v(t^-1 x), trilinear, zeros outside."""
    inv = invert(t)
    idx = np.meshgrid(*[np.arange(d) for d in v.dims], indexing="ij")
    pts = np.stack(idx, axis=-1) * v.spacing
    src = inv.apply(pts.reshape(-1, 3)) / v.spacing
    data = ndimage.map_coordinates(v.data, src.T, order=1, mode="constant", cval=0.0)
    out = data.reshape(v.dims).astype(np.float32)
    if isinstance(v, MaskVolume):
        out = np.clip(out, 0.0, 1.0)
    return type(v)(out, v.spacing, v.orientation)


def warp_slice(v: Volume, t: RigidTransform, depth: int) -> np.ndarray:
    """One depth slice of warp_volume(v, t), without warping the rest."""
    inv = invert(t)
    yy, xx = np.meshgrid(np.arange(v.dims[1]), np.arange(v.dims[2]), indexing="ij")
    pts = np.stack([np.full_like(yy, depth), yy, xx], axis=-1) * v.spacing
    src = inv.apply(pts.reshape(-1, 3)) / v.spacing
    data = ndimage.map_coordinates(v.data, src.T, order=1, mode="constant", cval=0.0)
    return data.reshape(v.dims[1], v.dims[2]).astype(np.float32)


def extract_contour(slice2d: np.ndarray, spacing, iso: float = 0.5) -> np.ndarray:
    """Iso-level boundary points of a 2D field, in mm; (N, 2), may be empty."""
    f = np.asarray(slice2d, dtype=np.float64)
    if f.ndim != 2:
        raise SizeError("contour extraction expects a 2-D field")
    spacing = np.asarray(spacing, dtype=np.float64)
    segs = measure.find_contours(f, iso)
    if not segs:
        return np.zeros((0, 2))
    pts = np.concatenate(segs, axis=0)
    # closed polylines repeat their start point; contours are point sets
    pts = np.unique(pts, axis=0)
    return pts * spacing


def save_volume(path: str, v: Volume) -> None:
    """JSON header + little-endian float32 raw payload (x fastest)."""
    raw_name = os.path.splitext(os.path.basename(path))[0] + ".raw"
    header = {
        "dims": list(v.dims),
        "spacing_mm": list(v.spacing),
        "orientation": v.orientation,
        "dtype": "f32le",
        "raw": raw_name,
    }
    with open(path, "w") as fh:
        json.dump(header, fh, indent=1)
    v.data.astype("<f4").tofile(os.path.join(os.path.dirname(path) or ".", raw_name))


def load_volume(path: str, kind=Volume) -> Volume:
    with open(path) as fh:
        header = json.load(fh)
    if header.get("dtype") != "f32le":
        raise InvalidParameterError(f"unsupported dtype {header.get('dtype')!r}")
    dims = tuple(header["dims"])
    raw = os.path.join(os.path.dirname(path) or ".", header["raw"])
    data = np.fromfile(raw, dtype="<f4")
    if data.size != int(np.prod(dims)):
        raise SizeError("raw payload size does not match header dims")
    return kind(data.reshape(dims), header["spacing_mm"], header["orientation"])
