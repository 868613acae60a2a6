"""Moving voxel materials to query points and pointwise elasticity evaluation."""

from __future__ import annotations

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from models import GaussianSplat, MaterialField, MaterialTriplet, array_to_triplets

logger = logging.getLogger(__name__)

MERGE_TOL_E = 10.0
MERGE_TOL_NU = 1e-3
MERGE_TOL_RHO = 10.0
NEIGHBOUR_CANDIDATES = 8


class TransferServiceError(Exception):
    """Base error for material transfer and elasticity evaluation."""


class SingularPoissonError(TransferServiceError):
    pass


class InvertedElementError(TransferServiceError):
    pass


class DecompositionError(TransferServiceError):
    pass


# --- nearest-neighbour transfer -------------------------------------------


def nearest_indices(centers: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Index of the closest center per query; exact ties resolve to the lowest index."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if len(centers) == 0:
        raise TransferServiceError("Cannot transfer materials from an empty field.")
    k = min(NEIGHBOUR_CANDIDATES, len(centers))
    tree = cKDTree(centers)
    _, candidates = tree.query(queries, k=k)
    candidates = np.asarray(candidates).reshape(len(queries), k)
    # kd-tree distances are not bit-stable across build orders; re-rank on exact distances
    diff = centers[candidates] - queries[:, None, :]
    distance = np.einsum("qkd,qkd->qk", diff, diff)
    best = distance.min(axis=1, keepdims=True)
    tied = np.where(distance == best, candidates, len(centers))
    result = tied.min(axis=1)

    # candidates beyond the k-th neighbour can still tie with the best
    radius = np.sqrt(best[:, 0])
    for row in np.flatnonzero(distance[:, -1] == best[:, 0]):
        within = np.asarray(tree.query_ball_point(queries[row], radius[row] * (1.0 + 1e-12)), dtype=np.int64)
        exact = np.sum((centers[within] - queries[row]) ** 2, axis=1)
        result[row] = within[exact == exact.min()].min()
    return result


def nearest_material(field: MaterialField, queries: np.ndarray) -> List[MaterialTriplet]:
    index = nearest_indices(field.voxels.centers, queries)
    logger.info("Transferred materials to %d query points from %d voxels", len(index), len(field))
    return array_to_triplets(field.materials[index])


def _single_linkage(values: np.ndarray, tolerance: float) -> np.ndarray:
    """Replaces every value by the first-occurring member of its tolerance chain."""
    order = np.argsort(values, kind="mergesort")
    ordered = values[order]
    breaks = np.concatenate([[True], np.diff(ordered) >= tolerance])
    cluster = np.cumsum(breaks) - 1
    # first occurrence in input order, not the smallest value
    representative = np.full(cluster[-1] + 1, len(values), dtype=np.int64)
    np.minimum.at(representative, cluster, order)
    labels = np.empty(len(values), dtype=np.int64)
    labels[order] = cluster
    return values[representative[labels]]


def merge_tolerances(
    field: MaterialField,
    tol_e: float = MERGE_TOL_E,
    tol_nu: float = MERGE_TOL_NU,
    tol_rho: float = MERGE_TOL_RHO,
) -> MaterialField:
    if len(field) == 0:
        raise TransferServiceError("Cannot merge an empty field.")
    merged = field.materials.copy()
    for column, tolerance in enumerate((tol_e, tol_nu, tol_rho)):
        merged[:, column] = _single_linkage(field.materials[:, column], tolerance)
    changed = int(np.sum(np.any(merged != field.materials, axis=1)))
    logger.info("Merged near-equal materials in %d of %d voxels", changed, len(field))
    return MaterialField(voxels=field.voxels, materials=merged)


# --- elasticity -----------------------------------------------------------


def lame(e: float, nu: float) -> Tuple[float, float]:
    """(lambda, mu) for Young's modulus ``e`` and Poisson's ratio ``nu``."""
    if nu >= 0.5:
        raise SingularPoissonError(f"Lame lambda is singular for nu = {nu}.")
    if e <= 0:
        raise TransferServiceError(f"Young's modulus must be positive, got {e}.")
    return e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)), e / (2.0 * (1.0 + nu))


def lame_field(field: MaterialField) -> Tuple[np.ndarray, np.ndarray]:
    e = field.materials[:, 0]
    nu = field.materials[:, 1]
    if np.any(nu >= 0.5):
        raise SingularPoissonError("Lame lambda is singular where nu >= 0.5.")
    return e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)), e / (2.0 * (1.0 + nu))


def _gradient(F: np.ndarray) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    if F.shape != (3, 3):
        raise TransferServiceError(f"Deformation gradient must be 3x3, got shape {F.shape}.")
    if not np.all(np.isfinite(F)):
        raise DecompositionError("Deformation gradient contains non-finite entries.")
    return F


def polar_decomposition(F: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """F = R S with R a proper rotation and S symmetric."""
    F = _gradient(F)
    try:
        U, sigma, Vt = np.linalg.svd(F)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(f"SVD of the deformation gradient failed: {exc}") from exc
    if np.linalg.det(U @ Vt) < 0:
        U[:, -1] *= -1.0
        sigma[-1] *= -1.0
    return U @ Vt, Vt.T @ np.diag(sigma) @ Vt


def corotational(F: np.ndarray, lam: float, mu: float) -> Tuple[float, np.ndarray]:
    """Energy density and Kirchhoff stress of the corotated linear model."""
    F = _gradient(F)
    if np.linalg.det(F) <= 0:
        raise InvertedElementError(f"Corotational energy needs det F > 0, got {np.linalg.det(F)}.")
    _, S = polar_decomposition(F)
    strain = S - np.eye(3)
    trace = float(np.trace(strain))
    energy = mu * float(np.sum(strain * strain)) + 0.5 * lam * trace * trace
    stress = 2.0 * mu * strain + lam * trace * np.eye(3)
    return energy, stress


def neo_hookean(F: np.ndarray, lam: float, mu: float) -> Tuple[float, np.ndarray]:
    """Energy density and Kirchhoff stress of the compressible Neo-Hookean model."""
    F = _gradient(F)
    J = float(np.linalg.det(F))
    if J <= 0:
        raise InvertedElementError(f"Neo-Hookean energy needs det F > 0, got {J}.")
    log_j = np.log(J)
    C = F.T @ F
    B = F @ F.T
    energy = 0.5 * mu * (float(np.trace(C)) - 3.0 - 2.0 * log_j) + 0.5 * lam * log_j * log_j
    stress = mu * (B - np.eye(3)) + lam * log_j * np.eye(3)
    return float(energy), stress


def deform_splat_covariance(
    splat: GaussianSplat,
    F: np.ndarray,
    eps: float = 1e-9,
    scale_multiplier: float = 1.0,
) -> np.ndarray:
    """(F L)(F L)^T + eps I with L the splat's rotation times its scales."""
    if eps <= 0:
        raise ValueError(f"Covariance padding must be positive, got {eps}.")
    F = _gradient(F)
    L = splat.rotation() @ np.diag(np.asarray(splat.scales, dtype=np.float64) * scale_multiplier)
    FL = F @ L
    cov = FL @ FL.T + eps * np.eye(3)
    return 0.5 * (cov + cov.T)


def pack_covariance(cov: np.ndarray) -> np.ndarray:
    cov = np.asarray(cov, dtype=np.float64)
    return np.array([cov[0, 0], cov[0, 1], cov[0, 2], cov[1, 1], cov[1, 2], cov[2, 2]])


def evaluate_elasticity(
    triplet: MaterialTriplet, F: np.ndarray, model: str = "neo_hookean"
) -> Tuple[float, np.ndarray]:
    lam, mu = lame(triplet.e, triplet.nu)
    if model == "neo_hookean":
        return neo_hookean(F, lam, mu)
    if model == "corotational":
        return corotational(F, lam, mu)
    raise ValueError(f"Unknown elasticity model {model!r}.")


def transfer_field(
    field: MaterialField,
    queries: np.ndarray,
    merge: bool = False,
    tolerances: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """Per-query (E, nu, rho) rows, optionally after tolerance merging of the source field."""
    if merge:
        field = merge_tolerances(field, *(tolerances or (MERGE_TOL_E, MERGE_TOL_NU, MERGE_TOL_RHO)))
    return field.materials[nearest_indices(field.voxels.centers, queries)]
