"""Rigid 3D transforms and per-frame transform windows.

Conventions used everywhere in this package:

* world coordinates are in mm, component order matches the volume's data
  axis order (axis 0 = slowest / depth, axis 2 = fastest / in-plane x);
  a voxel index ``i`` maps to the world point ``i * spacing``.
* Euler angles are extrinsic, applied axis0 -> axis1 -> axis2, so the
  rotation block is ``R2 @ R1 @ R0`` ("xyz-extrinsic" in transform files).
* rotation is about an explicit pivot ``center`` (mm), normally the
  geometric center of the fixed grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InvalidParameterError

ORTHO_TOL = 1e-6

# translation weights for the 4 regression heads, coarsest -> finest
HEAD_TRANS_WEIGHTS = (2.0, 1.0, 0.5, 0.25)


@dataclass(frozen=True)
class RigidParams:
    """6-dof rigid parameters: 3 Euler angles (rad) + 3 translations (mm)."""

    rot: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rot", np.asarray(self.rot, dtype=np.float64))
        object.__setattr__(self, "trans", np.asarray(self.trans, dtype=np.float64))
        if self.rot.shape != (3,) or self.trans.shape != (3,):
            raise InvalidParameterError("rot and trans must each have 3 components")
        if not (np.all(np.isfinite(self.rot)) and np.all(np.isfinite(self.trans))):
            raise InvalidParameterError("rigid parameters must be finite")

    @staticmethod
    def identity() -> "RigidParams":
        return RigidParams(np.zeros(3), np.zeros(3))

    @staticmethod
    def from_vector(v) -> "RigidParams":
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return RigidParams(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rot, self.trans])


@dataclass(frozen=True)
class RigidTransform:
    """4x4 homogeneous rigid transform in mm world coordinates."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise InvalidParameterError("rigid transform matrix must be 4x4")
        object.__setattr__(self, "matrix", m)
        r = m[:3, :3]
        if not np.all(np.isfinite(m)):
            raise InvalidParameterError("rigid transform must be finite")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-5 or np.linalg.det(r) < 0:
            raise InvalidParameterError("rotation block must be orthonormal with det +1")
        if np.any(m[3] != (0.0, 0.0, 0.0, 1.0)):
            raise InvalidParameterError("bottom row must be (0,0,0,1)")

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(4))

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def apply(self, points) -> np.ndarray:
        """Map (..., 3) mm points through the transform."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation


@dataclass
class TransformWindow:
    """Ordered per-frame rigid parameters for one window of N_w frames."""

    frames: list[RigidParams]

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ConfigurationError("a transform window needs at least one frame")

    @property
    def n_w(self) -> int:
        return len(self.frames)

    @staticmethod
    def identity(n_w: int) -> "TransformWindow":
        return TransformWindow([RigidParams.identity() for _ in range(n_w)])

    @staticmethod
    def from_vector(v, n_w: int) -> "TransformWindow":
        v = np.asarray(v, dtype=np.float64).reshape(n_w, 6)
        return TransformWindow([RigidParams.from_vector(row) for row in v])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([f.as_vector() for f in self.frames])

    def matrices(self, center) -> list[RigidTransform]:
        return [params_to_matrix(f, center) for f in self.frames]


def _axis_rotation(axis: int, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    r = np.eye(3)
    i, j = [(1, 2), (0, 2), (0, 1)][axis]
    r[i, i] = c
    r[j, j] = c
    r[i, j] = -s if axis != 1 else s
    r[j, i] = s if axis != 1 else -s
    return r


def euler_to_rotation(rot) -> np.ndarray:
    """Rotation block R2 @ R1 @ R0 for extrinsic axis0->axis1->axis2 angles."""
    r0, r1, r2 = np.asarray(rot, dtype=np.float64)
    return _axis_rotation(2, r2) @ _axis_rotation(1, r1) @ _axis_rotation(0, r0)


def rotation_to_euler(r: np.ndarray) -> np.ndarray:
    """Inverse of euler_to_rotation; angle about axis1 taken in [-pi/2, pi/2]."""
    r1 = np.arcsin(np.clip(-r[2, 0], -1.0, 1.0))
    if abs(abs(r[2, 0]) - 1.0) < 1e-12:
        # gimbal lock: split is not unique, put everything into axis2
        r0 = 0.0
        r2 = np.arctan2(-r[0, 1], r[1, 1])
    else:
        r0 = np.arctan2(r[2, 1], r[2, 2])
        r2 = np.arctan2(r[1, 0], r[0, 0])
    return np.array([r0, r1, r2])


def params_to_matrix(p: RigidParams, center) -> RigidTransform:
    """T(center) . T(trans) . R . T(-center) as a homogeneous matrix."""
    center = np.asarray(center, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(center)):
        raise InvalidParameterError("rotation center must be finite")
    r = euler_to_rotation(p.rot)
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = p.trans + center - r @ center
    return RigidTransform(m)


def matrix_to_params(t: RigidTransform, center) -> RigidParams:
    """Extract Euler angles + translation, inverting params_to_matrix."""
    center = np.asarray(center, dtype=np.float64).reshape(3)
    rot = rotation_to_euler(t.rotation)
    trans = t.translation - center + t.rotation @ center
    return RigidParams(rot, trans)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """The transform applying b first, then a."""
    return RigidTransform(a.matrix @ b.matrix)


def invert(t: RigidTransform) -> RigidTransform:
    r = t.rotation.T
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = -r @ t.translation
    return RigidTransform(m)


def combine_hierarchical(heads: list[TransformWindow]) -> TransformWindow:
    """Merge the 4 per-level regression windows (coarsest first).

    Rotations are averaged; translations, already expressed in finest-grid
    mm, are summed with weights 2/1/0.5/0.25 coarsest -> finest.
    """
    if len(heads) != 4:
        raise ConfigurationError(f"expected 4 heads, got {len(heads)}")
    n_w = heads[0].n_w
    if any(h.n_w != n_w for h in heads):
        raise ConfigurationError("all heads must share the same window size")
    frames = []
    for i in range(n_w):
        rot = np.mean([h.frames[i].rot for h in heads], axis=0)
        trans = sum(w * h.frames[i].trans for w, h in zip(HEAD_TRANS_WEIGHTS, heads))
        frames.append(RigidParams(rot, trans))
    return TransformWindow(frames)


def save_window(path, w: TransformWindow, center) -> None:
    doc = {
        "n_w": w.n_w,
        "frames": [
            {"rot_rad": list(f.rot), "trans_mm": list(f.trans)} for f in w.frames
        ],
        "euler": "xyz-extrinsic",
        "center_mm": list(np.asarray(center, dtype=np.float64)),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_window(path) -> tuple[TransformWindow, np.ndarray]:
    with open(path) as fh:
        doc = json.load(fh)
    frames = [RigidParams(f["rot_rad"], f["trans_mm"]) for f in doc["frames"]]
    if len(frames) != doc["n_w"]:
        raise ConfigurationError("transform file frame count does not match n_w")
    return TransformWindow(frames), np.asarray(doc["center_mm"], dtype=np.float64)
