"""Registration and segmentation evaluation: Hausdorff / mean contour
distance between kidney boundaries, Dice / Sensitivity / Specificity,
and per-sequence CT-US / CT-CT reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigurationError, EmptyContourError, SizeError
from .geometry import RigidParams, params_to_matrix
from .volume import MaskVolume, extract_contour, warp_slice


def _directed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """d(p, B) for every p in A: exact nearest-point distances."""
    d, _ = cKDTree(b).query(a)
    return d


def _check_contours(u, c):
    u = np.asarray(u, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if len(u) == 0 or len(c) == 0:
        raise EmptyContourError("contour distance needs two nonempty contours")
    return u, c


def hausdorff_mm(u, c) -> float:
    """Max of the two directed max-min contour point distances."""
    u, c = _check_contours(u, c)
    return float(max(_directed(u, c).max(), _directed(c, u).max()))


def mcd_mm(u, c) -> float:
    """Symmetric mean contour distance."""
    u, c = _check_contours(u, c)
    return float((_directed(u, c).mean() + _directed(c, u).mean()) / 2.0)


def seg_metrics(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float, float]:
    """(dice, sensitivity, specificity) with the overlap-ratio definitions
    sensitivity = |Y n Yhat| / |Yhat| and specificity = |Y n Yhat| / |Y|;
    empty denominators score 0."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise SizeError(f"grid mismatch {pred.shape} vs {gt.shape}")
    p = pred >= 0.5
    y = gt >= 0.5
    inter = float(np.logical_and(p, y).sum())
    n_p, n_y = float(p.sum()), float(y.sum())
    dice = 2 * inter / (n_p + n_y) if (n_p + n_y) > 0 else 0.0
    sens = inter / n_p if n_p > 0 else 0.0
    spec = inter / n_y if n_y > 0 else 0.0
    return dice, sens, spec


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)

    FIELDS = ("frame", "hd_ct_us_mm", "mcd_ct_us_mm", "hd_ct_ct_mm",
              "mcd_ct_ct_mm")

    def aggregates(self) -> dict[str, dict]:
        out = {}
        for key in self.FIELDS[1:]:
            vals = np.array([r[key] for r in self.rows], dtype=np.float64)
            vals = vals[np.isfinite(vals)]
            out[key] = {"mean": float(vals.mean()) if vals.size else np.nan,
                        "std": float(vals.std()) if vals.size else np.nan}
        return out

    def to_csv(self, path) -> None:
        agg = self.aggregates()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.FIELDS)
            for r in self.rows:
                writer.writerow([r[k] for k in self.FIELDS])
            writer.writerow(["MEAN"] + [agg[k]["mean"] for k in self.FIELDS[1:]])
            writer.writerow(["STD"] + [agg[k]["std"] for k in self.FIELDS[1:]])


def eval_sequence(result: list[RigidParams], reference: list[RigidParams],
                  case) -> EvalReport:
    """Per-frame contour distances on the frame plane.

    CT-US: warped-CT mask contour vs the frame's U/S mask contour.
    CT-CT: result-plane vs reference-plane CT mask contours.
    Transforms are absolute (original CT pose -> frame pose), the same
    convention as the phantom's ground truth. Frames whose contours come
    up empty record NaN rather than aborting the report.
    """
    if len(result) != len(reference):
        raise ConfigurationError("result/reference length mismatch")
    zc = case.ct.dims[0] // 2
    sp2 = case.spacing2d
    center = case.ct.center_mm
    report = EvalReport()
    for t, (p_res, p_ref) in enumerate(zip(result, reference)):
        res_slice = warp_slice(case.ct_mask, params_to_matrix(p_res, center), zc)
        ref_slice = warp_slice(case.ct_mask, params_to_matrix(p_ref, center), zc)
        c_res = extract_contour(res_slice, sp2)
        c_ref = extract_contour(ref_slice, sp2)
        c_us = extract_contour(case.frame_masks[t], sp2)
        row = {"frame": t}
        try:
            row["hd_ct_us_mm"] = hausdorff_mm(c_res, c_us)
            row["mcd_ct_us_mm"] = mcd_mm(c_res, c_us)
        except EmptyContourError:
            row["hd_ct_us_mm"] = row["mcd_ct_us_mm"] = np.nan
        try:
            row["hd_ct_ct_mm"] = hausdorff_mm(c_res, c_ref)
            row["mcd_ct_ct_mm"] = mcd_mm(c_res, c_ref)
        except EmptyContourError:
            row["hd_ct_ct_mm"] = row["mcd_ct_ct_mm"] = np.nan
        report.rows.append(row)
    return report
