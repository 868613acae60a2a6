"""Material triplet database: range loading, sampling, normalization and validity checks."""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from models import (
    InvalidTripletError,
    MaterialRange,
    MaterialRangeDb,
    MaterialTriplet,
    Normalizer,
    array_to_triplets,
    triplets_to_array,
)
from storage.range_repository import RangeRepository

logger = logging.getLogger(__name__)

NU_SPAN_SCALE = 0.5
DEDUPE_FORMAT = "{:.5e}"


class MtdServiceError(Exception):
    """Base error for material triplet database operations."""


class InvalidRangeError(MtdServiceError):
    pass


class EmptyDatabaseError(MtdServiceError):
    pass


class DuplicateRangeError(MtdServiceError):
    pass


class SamplingError(MtdServiceError):
    pass


class DegenerateNormalizerError(MtdServiceError):
    pass


def validate_range(item: MaterialRange) -> MaterialRange:
    """Checks the physical admissibility of one range, naming the offending field."""
    for field_name, lo, hi in (
        ("e_pa", item.e_lo, item.e_hi),
        ("nu", item.nu_lo, item.nu_hi),
        ("rho_kgm3", item.rho_lo, item.rho_hi),
    ):
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise InvalidRangeError(f"Range {item.name!r}: field {field_name} is not finite.")
        if lo > hi:
            raise InvalidRangeError(f"Range {item.name!r}: field {field_name} has lo {lo} > hi {hi}.")
    if item.e_lo <= 0:
        raise InvalidRangeError(f"Range {item.name!r}: field e_pa must be positive, got {item.e_lo}.")
    if item.rho_lo <= 0:
        raise InvalidRangeError(f"Range {item.name!r}: field rho_kgm3 must be positive, got {item.rho_lo}.")
    if item.nu_lo < 0 or item.nu_hi >= 0.5:
        raise InvalidRangeError(f"Range {item.name!r}: field nu must lie in [0, 0.5), got [{item.nu_lo}, {item.nu_hi}].")
    return item


def build_db(ranges: Sequence[MaterialRange]) -> MaterialRangeDb:
    if not ranges:
        raise EmptyDatabaseError("empty database: at least one material range is required.")
    seen = set()
    for item in ranges:
        validate_range(item)
        if item.name in seen:
            raise DuplicateRangeError(f"Duplicate range name {item.name!r}.")
        seen.add(item.name)
    return MaterialRangeDb(ranges=tuple(ranges))


def load_ranges(path: Optional[Path] = None) -> MaterialRangeDb:
    return build_db(RangeRepository(path).load())


def save_ranges(db: MaterialRangeDb, path: Path) -> None:
    RangeRepository(path).save(db)


def allocate_counts(db: MaterialRangeDb, total: int) -> List[int]:
    """Per-range sample counts proportional to range size, at least one each."""
    sizes = np.array([item.size() for item in db.ranges], dtype=np.float64)
    weight_sum = float(sizes.sum())
    if weight_sum <= 0.0:
        sizes = np.ones_like(sizes)
        weight_sum = float(len(sizes))
    return [max(1, int(math.floor(total * size / weight_sum + 0.5))) for size in sizes]


def sample_triplets(db: MaterialRangeDb, total: int, seed: int) -> List[MaterialTriplet]:
    if total < len(db):
        raise SamplingError(f"Cannot draw {total} samples from {len(db)} ranges: need at least one per range.")
    rng = np.random.default_rng(seed)
    chunks = []
    for item, count in zip(db.ranges, allocate_counts(db, total)):
        u = rng.random((count, 3))
        log_e = math.log10(item.e_lo) + u[:, 0] * (math.log10(item.e_hi) - math.log10(item.e_lo))
        nu = item.nu_lo + u[:, 1] * (item.nu_hi - item.nu_lo)
        log_rho = math.log10(item.rho_lo) + u[:, 2] * (math.log10(item.rho_hi) - math.log10(item.rho_lo))
        block = np.stack([10.0**log_e, nu, 10.0**log_rho], axis=1)
        # pow round-off can leave samples a hair outside the span
        chunks.append(np.clip(block, item.lows(), item.highs()))
        logger.debug("Range %s: drew %d samples", item.name, count)
    samples = np.concatenate(chunks, axis=0)
    logger.info("Sampled %d triplets from %d ranges", len(samples), len(db))
    return array_to_triplets(samples)


def dedupe(triplets: Sequence[MaterialTriplet]) -> List[MaterialTriplet]:
    seen = set()
    survivors: List[MaterialTriplet] = []
    for item in triplets:
        key = tuple(DEDUPE_FORMAT.format(value) for value in item.as_tuple())
        if key in seen:
            continue
        seen.add(key)
        survivors.append(item)
    if len(survivors) < len(triplets):
        logger.info("Removed %d duplicate triplets", len(triplets) - len(survivors))
    return survivors


def split_triplets(
    triplets: Sequence[MaterialTriplet],
    seed: int,
    fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> Tuple[List[MaterialTriplet], List[MaterialTriplet], List[MaterialTriplet]]:
    """Shuffled train / validation / test partition."""
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"Split fractions must be three non-negative values summing to 1, got {fractions}.")
    order = np.random.default_rng(seed).permutation(len(triplets))
    n_train = int(math.floor(fractions[0] * len(triplets)))
    n_val = int(math.floor(fractions[1] * len(triplets)))
    train = [triplets[i] for i in order[:n_train]]
    val = [triplets[i] for i in order[n_train : n_train + n_val]]
    test = [triplets[i] for i in order[n_train + n_val :]]
    return train, val, test


def _transform(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64).reshape(-1, 3)
    if np.any(values[:, 0] <= 0) or np.any(values[:, 2] <= 0):
        raise InvalidTripletError("E and rho must be positive before normalization.")
    return np.stack([np.log10(values[:, 0]), values[:, 1], np.log10(values[:, 2])], axis=1)


def fit_normalizer(triplets: Sequence[MaterialTriplet]) -> Normalizer:
    if len(triplets) < 2:
        raise DegenerateNormalizerError("At least two triplets are needed to fit a normalizer.")
    transformed = _transform(triplets_to_array(triplets))
    lows = transformed.min(axis=0)
    highs = transformed.max(axis=0)
    for name, lo, hi in zip(("e_pa", "nu", "rho_kgm3"), lows, highs):
        if not hi > lo:
            raise DegenerateNormalizerError(f"zero spread in property {name}: cannot normalize.")
    return Normalizer(
        e_log_min=float(lows[0]),
        e_log_max=float(highs[0]),
        nu_min=float(lows[1]),
        nu_max=float(highs[1]),
        rho_log_min=float(lows[2]),
        rho_log_max=float(highs[2]),
    )


def normalize_array(values: np.ndarray, normalizer: Normalizer) -> np.ndarray:
    """Maps raw (N, 3) triplets to normalized space without clamping."""
    return (_transform(values) - normalizer.mins) / normalizer.spans


def denormalize_array(values: np.ndarray, normalizer: Normalizer) -> np.ndarray:
    scaled = np.asarray(values, dtype=np.float64).reshape(-1, 3) * normalizer.spans + normalizer.mins
    return np.stack([10.0 ** scaled[:, 0], scaled[:, 1], 10.0 ** scaled[:, 2]], axis=1)


def normalize(triplet: MaterialTriplet, normalizer: Normalizer) -> np.ndarray:
    return normalize_array(np.array([triplet.as_tuple()]), normalizer)[0]


def denormalize(values: np.ndarray, normalizer: Normalizer) -> Tuple[float, float, float]:
    """Inverse of normalize; returns a raw tuple since nu is not clamped here."""
    row = denormalize_array(np.asarray(values).reshape(1, 3), normalizer)[0]
    return (float(row[0]), float(row[1]), float(row[2]))


def contains(db: MaterialRangeDb, triplet: MaterialTriplet) -> bool:
    e, nu, rho = triplet.as_tuple()
    return any(
        item.e_lo <= e <= item.e_hi and item.nu_lo <= nu <= item.nu_hi and item.rho_lo <= rho <= item.rho_hi
        for item in db.ranges
    )


def validity_errors(values: np.ndarray, db: MaterialRangeDb) -> np.ndarray:
    """Vectorized validity error for (N, 3) raw triplets against the nearest range."""
    if len(db) == 0:
        raise EmptyDatabaseError("empty database: validity needs at least one range.")
    values = np.asarray(values, dtype=np.float64).reshape(-1, 3)
    lows, highs = db.bounds()
    log_e = np.log10(values[:, 0])[:, None]
    nu = values[:, 1][:, None]
    log_rho = np.log10(values[:, 2])[:, None]

    clamp_log_e = np.clip(log_e, np.log10(lows[:, 0]), np.log10(highs[:, 0]))
    clamp_nu = np.clip(nu, lows[:, 1], highs[:, 1])
    clamp_log_rho = np.clip(log_rho, np.log10(lows[:, 2]), np.log10(highs[:, 2]))

    distance = (
        np.abs(log_e - clamp_log_e)
        + np.abs(nu - clamp_nu) / NU_SPAN_SCALE
        + np.abs(log_rho - clamp_log_rho)
    )
    # argmin keeps the first range on ties
    nearest = np.argmin(distance, axis=1)
    rows = np.arange(len(values))
    ce = clamp_log_e[rows, nearest]
    cn = clamp_nu[rows, nearest]
    clamp_rho = np.clip(values[:, 2], lows[nearest, 2], highs[nearest, 2])

    e_err = np.abs(log_e[:, 0] - ce) / np.maximum(np.abs(ce), 1e-12)
    nu_err = np.abs(nu[:, 0] - cn) / np.maximum(cn, 1e-6)
    rho_err = np.abs(values[:, 2] - clamp_rho) / clamp_rho
    return np.stack([e_err, nu_err, rho_err], axis=1)


def validity_error(triplet: MaterialTriplet, db: MaterialRangeDb) -> Tuple[float, float, float]:
    row = validity_errors(np.array([triplet.as_tuple()]), db)[0]
    return (float(row[0]), float(row[1]), float(row[2]))


def valid_fraction(values: np.ndarray, db: MaterialRangeDb) -> float:
    """Share of triplets scoring a zero validity error."""
    values = np.asarray(values, dtype=np.float64).reshape(-1, 3)
    if len(values) == 0:
        return 0.0
    errors = validity_errors(values, db)
    return float(np.mean(np.all(errors == 0.0, axis=1)))
