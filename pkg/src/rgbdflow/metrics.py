"""End-point-error metrics for 2-D optical flow and 3-D scene flow.

All metrics consume a per-pixel end-point-error vector gathered over the
valid pixels of one sample, so every one of them is invariant to pixel
order. Conventions, fixed for determinism:

* accuracy thresholds are inclusive (``epe <= tau`` counts as accurate);
* thresholded average EPE uses a strict ``epe < t`` subset and reports an
  explicit ``None`` (serialized as ``n/a``) when the subset is empty;
* the median is the lower median for even counts;
* outlier rates support two modes: ``"or"`` flags a pixel when its error
  exceeds the absolute threshold or the relative one, ``"and"`` requires
  both. ``"or"`` is the default and is never below ``"and"``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

FL2D_ABS_PX = 3.0
FL3D_ABS_M = 0.3
FL_REL = 0.05

AEPE_2D_THRESHOLD_PX = 100.0
AEPE_3D_THRESHOLD_M = 1.0
ACC_2D_TAU_PX = 1.0
ACC_3D_TAU_NEAR_M = 0.05
ACC_3D_TAU_FAR_M = 0.10

NA = "n/a"  # serialized form of an undefined (empty-subset) metric


def _epe_map(pred, gt, mask, channels: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-valid-pixel (epe, gt magnitude), both 1-D in row-major order."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[0] != channels:
        raise ValueError(
            f"flow fields must both be ({channels}, H, W), got "
            f"{pred.shape} vs {gt.shape}"
        )
    if mask.shape != pred.shape[1:]:
        raise ValueError(f"mask extent {mask.shape} does not match {pred.shape[1:]}")
    if not mask.any():
        raise ValueError("empty validity mask: no pixels to evaluate")
    diff = (pred - gt)[:, mask]
    epe = np.sqrt((diff * diff).sum(axis=0))
    gmag = np.sqrt((gt[:, mask] ** 2).sum(axis=0))
    return epe, gmag


def epe_map_2d(pred, gt, mask) -> np.ndarray:
    """Euclidean error of each valid 2-vector, as a 1-D array."""
    return _epe_map(pred, gt, mask, channels=2)[0]


def epe_map_3d(pred, gt, mask) -> np.ndarray:
    return _epe_map(pred, gt, mask, channels=3)[0]


def aepe(epe_values, threshold: float | None = None) -> float | None:
    """Mean end-point error, optionally over the strict subset below
    ``threshold``; an empty subset yields None rather than a fake zero."""
    epe_values = np.asarray(epe_values, dtype=np.float64).ravel()
    if epe_values.size == 0:
        raise ValueError("aepe needs at least one value")
    if threshold is not None:
        epe_values = epe_values[epe_values < threshold]
        if epe_values.size == 0:
            return None
    return float(epe_values.mean())


def acc_within(epe_values, tau: float) -> float:
    """Percent of values at or below ``tau`` (inclusive boundary)."""
    epe_values = np.asarray(epe_values, dtype=np.float64).ravel()
    if epe_values.size == 0:
        raise ValueError("acc_within needs at least one value")
    return float(100.0 * (epe_values <= tau).mean())


def median_epe(epe_values) -> float:
    """Lower median: element (n-1)//2 of the sorted values."""
    epe_values = np.sort(np.asarray(epe_values, dtype=np.float64).ravel())
    if epe_values.size == 0:
        raise ValueError("median_epe needs at least one value")
    return float(epe_values[(epe_values.size - 1) // 2])


def outlier_rate(epe, gmag, abs_thresh, mode: str = "or") -> float:
    """Percent of entries whose error exceeds ``abs_thresh`` and/or
    ``FL_REL`` times the matching ground-truth magnitude."""
    epe = np.asarray(epe, dtype=np.float64).ravel()
    gmag = np.asarray(gmag, dtype=np.float64).ravel()
    if epe.shape != gmag.shape or epe.size == 0:
        raise ValueError("need matching, nonempty error and magnitude arrays")
    if mode not in ("or", "and"):
        raise ValueError(f"unknown outlier mode {mode!r}")
    over_abs = epe > abs_thresh
    over_rel = epe > FL_REL * gmag
    out = over_abs | over_rel if mode == "or" else over_abs & over_rel
    return float(100.0 * out.mean())


def fl_rate_2d(pred, gt, mask, mode: str = "or") -> float:
    """Percent of valid pixels whose error exceeds 3 px and/or 5% of the
    ground-truth magnitude, per ``mode``."""
    epe, gmag = _epe_map(pred, gt, mask, channels=2)
    return outlier_rate(epe, gmag, FL2D_ABS_PX, mode)


def fl_rate_3d(pred, gt, mask, mode: str = "or") -> float:
    """As :func:`fl_rate_2d` with thresholds 0.3 m and 5%."""
    epe, gmag = _epe_map(pred, gt, mask, channels=3)
    return outlier_rate(epe, gmag, FL3D_ABS_M, mode)


# ---------------------------------------------------------------------------
# report assembly


@dataclass(frozen=True)
class EvalReport:
    """Every headline metric for one evaluated sample (or an average).

    ``None`` marks a metric whose defining subset was empty. The 3-D
    block is ``None`` throughout when no pixel had a usable 3-D lift.
    ``n_valid`` counts the valid 2-D pixels.
    """

    aepe_all_2d: float | None
    aepe_lt100_2d: float | None
    acc_1px: float | None
    fl_2d: float | None
    median_epe_2d: float | None
    aepe_all_3d: float | None
    aepe_lt1_3d: float | None
    acc_005: float | None
    acc_010: float | None
    fl_3d: float | None
    n_valid: int


REPORT_FIELDS = tuple(f.name for f in fields(EvalReport))


def evaluate_pair(
    pred2d,
    gt2d,
    mask2d,
    pred3d=None,
    gt3d=None,
    mask3d=None,
    fl_mode: str = "or",
) -> EvalReport:
    """Compute the full metric block for one sample.

    The 2-D mask must select at least one pixel. The 3-D block is
    evaluated over ``mask3d`` (falling back to the 2-D mask) and reported
    as undefined when that mask is empty or no 3-D fields are given.
    """
    epe2, _ = _epe_map(pred2d, gt2d, mask2d, channels=2)
    report = {
        "aepe_all_2d": aepe(epe2),
        "aepe_lt100_2d": aepe(epe2, AEPE_2D_THRESHOLD_PX),
        "acc_1px": acc_within(epe2, ACC_2D_TAU_PX),
        "fl_2d": fl_rate_2d(pred2d, gt2d, mask2d, fl_mode),
        "median_epe_2d": median_epe(epe2),
        "n_valid": int(np.asarray(mask2d, dtype=bool).sum()),
    }
    three_d = dict.fromkeys(
        ("aepe_all_3d", "aepe_lt1_3d", "acc_005", "acc_010", "fl_3d")
    )
    if pred3d is not None:
        if gt3d is None:
            raise ValueError("pred3d given without gt3d")
        m3 = np.asarray(mask3d if mask3d is not None else mask2d, dtype=bool)
        if m3.any():
            epe3 = epe_map_3d(pred3d, gt3d, m3)
            three_d = {
                "aepe_all_3d": aepe(epe3),
                "aepe_lt1_3d": aepe(epe3, AEPE_3D_THRESHOLD_M),
                "acc_005": acc_within(epe3, ACC_3D_TAU_NEAR_M),
                "acc_010": acc_within(epe3, ACC_3D_TAU_FAR_M),
                "fl_3d": fl_rate_3d(pred3d, gt3d, m3, fl_mode),
            }
    return EvalReport(**report, **three_d)


def mean_report(reports) -> EvalReport:
    """Field-wise arithmetic mean across sample reports.

    Undefined entries are skipped per field (all-undefined stays
    undefined); ``n_valid`` is summed. The mean is computed in input
    order, so re-aggregating serialized rows reproduces it exactly.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("mean_report needs at least one report")
    out = {}
    for name in REPORT_FIELDS:
        values = [getattr(r, name) for r in reports]
        if name == "n_valid":
            out[name] = int(sum(values))
            continue
        defined = [v for v in values if v is not None]
        out[name] = sum(defined) / len(defined) if defined else None
    return EvalReport(**out)


def aggregate_mean(reports_by_tag: dict, tags) -> tuple[float, float]:
    """Average ``aepe_all_2d`` and ``acc_1px`` across named dataset tags.

    Raises when a requested tag is missing; this is the cross-dataset
    headline pair (mean AEPE, mean ACC).
    """
    tags = list(tags)
    if not tags:
        raise ValueError("aggregate_mean needs at least one tag")
    missing = [t for t in tags if t not in reports_by_tag]
    if missing:
        raise ValueError(f"missing dataset tags: {missing}")
    picked = [reports_by_tag[t] for t in tags]
    if any(r.aepe_all_2d is None or r.acc_1px is None for r in picked):
        raise ValueError("tagged reports must define aepe_all_2d and acc_1px")
    mean_aepe = sum(r.aepe_all_2d for r in picked) / len(picked)
    mean_acc = sum(r.acc_1px for r in picked) / len(picked)
    return float(mean_aepe), float(mean_acc)


# ---------------------------------------------------------------------------
# serialization


def format_value(value) -> str:
    """Canonical text for one metric value: full-precision float repr,
    plain int, or the ``n/a`` sentinel."""
    if value is None:
        return NA
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


def parse_value(text: str):
    if text == NA:
        return None
    return float(text)


def report_to_kv(report: EvalReport) -> dict[str, str]:
    return {name: format_value(getattr(report, name)) for name in REPORT_FIELDS}


def report_csv_cells(report: EvalReport) -> list[str]:
    return [format_value(getattr(report, name)) for name in REPORT_FIELDS]
