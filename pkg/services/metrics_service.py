"""Evaluation formulas for predicted material fields."""

from __future__ import annotations

import logging
import math
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from models import Aggregation, DerivedModuli, FieldErrorReport, MaterialTriplet, Normalizer, Property
from services import mtd_service

logger = logging.getLogger(__name__)

ALL_METRICS: Tuple[str, ...] = ("ade", "alde", "alre", "are", "mnre")
PROPERTY_METRICS: Dict[Property, Tuple[str, ...]] = {
    Property.E: ALL_METRICS,
    Property.NU: ("ade", "are", "mnre"),
    Property.RHO: ALL_METRICS,
}
PROPERTY_COLUMNS = {Property.E: 0, Property.NU: 1, Property.RHO: 2}
LOG_METRICS = {"alde", "alre"}
KL_SMOOTHING = 1e-9
# relative-error denominator floor for Poisson's ratio, which may be exactly 0
NU_DENOMINATOR_FLOOR = 1e-6


class MetricsServiceError(Exception):
    """Base error for metric evaluation."""


class NonPositiveLogInputError(MetricsServiceError):
    pass


class SingularModulusError(MetricsServiceError):
    pass


class ZeroDenominatorError(MetricsServiceError):
    pass


def _pair(pred: Sequence[float], gt: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    if len(pred) != len(gt) or len(gt) == 0:
        raise MetricsServiceError(f"Predictions ({len(pred)}) and ground truth ({len(gt)}) must be equal, non-empty.")
    return pred, gt


def per_sample_errors(
    pred: Sequence[float],
    gt: Sequence[float],
    metric: str,
    log_base: float = math.e,
    floor: float = 0.0,
) -> np.ndarray:
    """Per-sample values whose mean is the named metric.

    A positive ``floor`` bounds the ARE denominator from below instead of rejecting zero truth.
    """
    pred, gt = _pair(pred, gt)
    if metric in LOG_METRICS and (np.any(pred <= 0) or np.any(gt <= 0)):
        raise NonPositiveLogInputError(f"Metric {metric} needs strictly positive values.")
    if metric == "ade":
        return np.abs(gt - pred)
    if metric == "alde":
        return np.abs(np.log(gt) - np.log(pred)) / math.log(log_base)
    if metric == "alre":
        log_gt = np.log(gt)
        if np.any(log_gt == 0.0):
            raise ZeroDenominatorError("ALRE is undefined where the ground truth equals 1.")
        return np.abs(log_gt - np.log(pred)) / np.abs(log_gt)
    if metric == "are":
        if floor > 0.0:
            return np.abs(gt - pred) / np.maximum(np.abs(gt), floor)
        if np.any(gt == 0.0):
            raise ZeroDenominatorError("ARE is undefined where the ground truth is 0.")
        return np.abs(gt - pred) / np.abs(gt)
    if metric == "mnre":
        both_zero = (gt == 0.0) & (pred == 0.0)
        safe_gt = np.where(both_zero, 1.0, gt)
        safe_pred = np.where(both_zero, 1.0, pred)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.minimum(safe_gt / safe_pred, safe_pred / safe_gt)
        return np.nan_to_num(ratio, nan=0.0, posinf=0.0)
    raise ValueError(f"Unknown metric {metric!r}.")


def aggregate(values: np.ndarray, object_ids: Optional[Sequence] = None, aggregation: Aggregation = Aggregation.PER_OBJECT) -> float:
    values = np.asarray(values, dtype=np.float64)
    if aggregation == Aggregation.GLOBAL or object_ids is None:
        return float(np.mean(values))
    object_ids = np.asarray(object_ids)
    if len(object_ids) != len(values):
        raise MetricsServiceError("Object ids must align with the per-voxel values.")
    groups, inverse = np.unique(object_ids, return_inverse=True)
    sums = np.bincount(inverse, weights=values, minlength=len(groups))
    counts = np.bincount(inverse, minlength=len(groups))
    return float(np.mean(sums / counts))


def pointwise_errors(
    pred: Sequence[float],
    gt: Sequence[float],
    prop: Property,
    aggregation: Aggregation = Aggregation.PER_OBJECT,
    object_ids: Optional[Sequence] = None,
    log_base: float = math.e,
) -> Dict[str, float]:
    prop = Property(prop)
    floor = NU_DENOMINATOR_FLOOR if prop == Property.NU else 0.0
    return {
        metric: aggregate(per_sample_errors(pred, gt, metric, log_base, floor), object_ids, aggregation)
        for metric in PROPERTY_METRICS[prop]
    }


def field_report(
    pred: np.ndarray,
    gt: np.ndarray,
    object_ids: Optional[Sequence] = None,
    aggregation: Aggregation = Aggregation.PER_OBJECT,
    log_base: float = math.e,
) -> FieldErrorReport:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    report = FieldErrorReport(aggregation=Aggregation(aggregation))
    for prop, column in PROPERTY_COLUMNS.items():
        report.values[prop.value] = pointwise_errors(
            pred[:, column], gt[:, column], prop, aggregation, object_ids, log_base
        )
    return report


def derived_moduli_array(values: np.ndarray) -> Dict[str, np.ndarray]:
    values = np.asarray(values, dtype=np.float64).reshape(-1, 3)
    e, nu, rho = values[:, 0], values[:, 1], values[:, 2]
    if np.any(nu >= 0.5):
        raise SingularModulusError("Bulk modulus is singular for Poisson's ratio >= 0.5.")
    return {
        "shear": e / (2.0 * (1.0 + nu)),
        "bulk": e / (3.0 * (1.0 - 2.0 * nu)),
        "e_over_rho": e / rho,
        "ashby_stiff": np.sqrt(e) / rho,
        "ashby_energy": np.cbrt(e) / rho,
    }


def derived_moduli(triplet: MaterialTriplet) -> DerivedModuli:
    if triplet.nu >= 0.5:
        raise SingularModulusError(f"Bulk modulus is singular at nu = {triplet.nu}.")
    moduli = derived_moduli_array(np.array([triplet.as_tuple()]))
    return DerivedModuli(**{name: float(value[0]) for name, value in moduli.items()})


def bray_curtis(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(x < 0) or np.any(y < 0):
        raise MetricsServiceError("Bray-Curtis needs non-negative components.")
    denominator = float(np.sum(x + y))
    if denominator == 0.0:
        raise ZeroDenominatorError("Bray-Curtis is undefined for two all-zero vectors.")
    return float(np.sum(np.abs(x - y))) / denominator


def _log_relative(pred: np.ndarray, gt: np.ndarray) -> float:
    log_gt = np.log(gt)
    return float(np.mean(np.abs(np.log(pred) - log_gt) / np.maximum(np.abs(log_gt), 1e-12)))


def mechanical_relative_errors(pred: np.ndarray, gt: np.ndarray) -> Dict[str, float]:
    """Relative errors of the raw and derived mechanical quantities."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) != len(gt) or len(gt) == 0:
        raise MetricsServiceError("Predictions and ground truth must be equal, non-empty.")
    pred_moduli = derived_moduli_array(pred)
    gt_moduli = derived_moduli_array(gt)
    numerators = np.abs(pred - gt).sum(axis=1)
    denominators = (pred + gt).sum(axis=1)
    return {
        "log_e": _log_relative(pred[:, 0], gt[:, 0]),
        "nu": float(np.mean(np.abs(pred[:, 1] - gt[:, 1]) / np.maximum(np.abs(gt[:, 1]), NU_DENOMINATOR_FLOOR))),
        "rho": float(np.mean(np.abs(pred[:, 2] - gt[:, 2]) / gt[:, 2])),
        "log_e_over_rho": _log_relative(pred_moduli["e_over_rho"], gt_moduli["e_over_rho"]),
        "log_g": _log_relative(pred_moduli["shear"], gt_moduli["shear"]),
        "log_k": _log_relative(pred_moduli["bulk"], gt_moduli["bulk"]),
        "log_ashby_stiff": _log_relative(pred_moduli["ashby_stiff"], gt_moduli["ashby_stiff"]),
        "log_ashby_energy": _log_relative(pred_moduli["ashby_energy"], gt_moduli["ashby_energy"]),
        "bray_curtis": float(np.mean(numerators / denominators)),
    }


def _hazen_resample(sorted_values: np.ndarray, size: int) -> np.ndarray:
    levels = (np.arange(size) + 0.5) / size
    positions = levels * len(sorted_values) - 0.5
    return np.interp(positions, np.arange(len(sorted_values)), sorted_values)


def wasserstein_1d(a: Sequence[float], b: Sequence[float], p: int = 1) -> float:
    """Empirical W_p between two 1-D samples via the sorted quantile coupling."""
    if p not in (1, 2):
        raise ValueError(f"Wasserstein order must be 1 or 2, got {p}.")
    a = np.sort(np.asarray(a, dtype=np.float64).reshape(-1))
    b = np.sort(np.asarray(b, dtype=np.float64).reshape(-1))
    if len(a) == 0 or len(b) == 0:
        raise MetricsServiceError("Wasserstein distance needs non-empty samples.")
    if len(a) != len(b):
        size = max(len(a), len(b))
        a = _hazen_resample(a, size)
        b = _hazen_resample(b, size)
    return float(np.mean(np.abs(a - b) ** p) ** (1.0 / p))


def kl_histogram(a: Sequence[float], b: Sequence[float], bins: int = 64) -> float:
    """D_KL(p || q) between smoothed equal-width histograms on the shared support."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if len(a) == 0 or len(b) == 0:
        raise MetricsServiceError("KL divergence needs non-empty samples.")
    if bins < 2:
        raise ValueError(f"Histogram needs at least 2 bins, got {bins}.")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi <= lo:
        return 0.0
    p, _ = np.histogram(a, bins=bins, range=(lo, hi))
    q, _ = np.histogram(b, bins=bins, range=(lo, hi))
    p = p / p.sum() + KL_SMOOTHING
    q = q / q.sum() + KL_SMOOTHING
    p /= p.sum()
    q /= q.sum()
    return float(max(0.0, np.sum(p * np.log(p / q))))


def distribution_report(
    pred: np.ndarray, gt: np.ndarray, normalizer: Optional[Normalizer] = None, bins: int = 64
) -> Dict[str, Dict[str, float]]:
    """W1, W2 and KL per property, in normalized space when a normalizer is given."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if normalizer is not None:
        pred = mtd_service.normalize_array(pred, normalizer)
        gt = mtd_service.normalize_array(gt, normalizer)
    report: Dict[str, Dict[str, float]] = {}
    for prop, column in PROPERTY_COLUMNS.items():
        report[prop.value] = {
            "w1": wasserstein_1d(pred[:, column], gt[:, column], 1),
            "w2": wasserstein_1d(pred[:, column], gt[:, column], 2),
            "kl": kl_histogram(gt[:, column], pred[:, column], bins),
        }
    return report


def mass_estimate(densities: Sequence[float], volume: float) -> float:
    densities = np.asarray(densities, dtype=np.float64).reshape(-1)
    if len(densities) == 0:
        raise MetricsServiceError("Mass estimate needs at least one density sample.")
    if volume <= 0:
        raise MetricsServiceError(f"Object volume must be positive, got {volume}.")
    return float(np.mean(densities)) * volume
