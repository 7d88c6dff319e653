"""
Vertex identification for sets of mean load shapes.

Membership is decided per point by a distance-to-hull program solved with
non-negative least squares; no facet enumeration, so the dimension of the
load shapes (24 or 48 steps) does not matter.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator
from scipy.optimize import nnls

from ensemble import DerClass, LoadShapePair, frozen_array
from errors import DimensionError

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-9


class HullResult(BaseModel):
    """Vertex indices into the input list, plus a certificate for each removed point."""

    model_config = {"frozen": True, "arbitrary_types_allowed": True}

    n_points: int = Field(..., ge=1)
    vertex_indices: Tuple[int, ...]
    certificates: Dict[int, np.ndarray]
    residuals: Dict[int, float]
    tol: float = Field(DEFAULT_TOL, ge=0)

    @field_validator("certificates", mode="before")
    @classmethod
    def _freeze(cls, v):
        return {int(i): frozen_array(w) for i, w in v.items()}

    @property
    def removed_indices(self) -> Tuple[int, ...]:
        kept = set(self.vertex_indices)
        return tuple(i for i in range(self.n_points) if i not in kept)

    def reconstruct(self, means: np.ndarray, index: int) -> np.ndarray:
        """Rebuild removed point `index` from its certificate."""
        if index in self.vertex_indices:
            return np.asarray(means)[index]
        return self.certificates[index] @ np.asarray(means)[list(self.vertex_indices)]


def _as_points(means) -> np.ndarray:
    try:
        points = np.asarray(
            [np.asarray(m, dtype=float) for m in means] if len(means) else [], dtype=float
        )
    except ValueError:
        raise DimensionError("means must be vectors of one common length")
    if points.ndim != 2:
        raise DimensionError("means must be vectors of one common length")
    return points


def hull_membership(
    points: np.ndarray, x: np.ndarray, tol: float = DEFAULT_TOL
) -> Tuple[np.ndarray, float, bool]:
    """
    Closest convex combination of `points` (rows) to `x`.

    Solves the non-negative least squares problem with an extra heavily
    weighted row forcing the weights to sum to one, renormalises, and measures
    the Euclidean residual of that exact convex combination.

    Returns
    -------
    weights : numpy.ndarray
        simplex vector over the rows of `points`
    residual : float
        ``||weights @ points - x||``
    inside : bool
        residual <= tol
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    x = np.asarray(x, dtype=float)
    if points.shape[0] == 0:
        return np.zeros(0), float(np.linalg.norm(x)), False
    if points.shape[1] != x.size:
        raise DimensionError(f"point has {x.size} coordinates, hull has {points.shape[1]}")

    scale = max(1.0, float(np.abs(points).max()), float(np.abs(x).max()))
    weight = 10.0 * scale * np.sqrt(x.size)
    # add a weighted row of ones so the solution is a convex combination
    A = np.r_[points.T, weight * np.ones((1, points.shape[0]))]
    b = np.r_[x, weight]
    w, _ = nnls(A, b, maxiter=50 * A.shape[1])

    total = w.sum()
    if total <= 0:
        w = np.zeros(points.shape[0])
        w[np.argmin(np.linalg.norm(points - x, axis=1))] = 1.0
    else:
        w = w / total
    residual = float(np.linalg.norm(w @ points - x))
    return w, residual, residual <= tol


def _first_occurrences(points: np.ndarray) -> List[int]:
    seen: Dict[bytes, int] = {}
    for i, p in enumerate(points):
        seen.setdefault(p.tobytes(), i)
    return sorted(seen.values())


def reduce_to_hull(
    means: Sequence, tol: float = DEFAULT_TOL, workers: int = 1
) -> HullResult:
    """
    Keep the points that are not within `tol` of the convex hull of the others.

    Exact duplicates collapse onto their first occurrence. Every unique point is
    tested against all other unique points (in parallel when `workers` > 1),
    then a single pass in index order re-tests each removed point against the
    kept set and promotes it when the kept set no longer covers it. Removal
    certificates are computed against the final vertex set.
    """
    if tol < 0:
        raise ValueError(f"tolerance must be nonnegative, got {tol}")
    points = _as_points(means)
    if points.shape[0] == 0:
        raise ValueError("cannot reduce an empty point set")

    unique = _first_occurrences(points)

    def _is_redundant(i: int) -> bool:
        others = [j for j in unique if j != i]
        return hull_membership(points[others], points[i], tol)[2]

    if workers > 1 and len(unique) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            redundant = list(pool.map(_is_redundant, unique))
    else:
        redundant = [_is_redundant(i) for i in unique]

    kept = [i for i, r in zip(unique, redundant) if not r]
    for i in range(points.shape[0]):
        if i in kept:
            continue
        if not hull_membership(points[kept], points[i], tol)[2]:
            logger.debug(f"Point {i} promoted to vertex after tolerance chaining")
            kept.append(i)
            kept.sort()

    certificates, residuals = {}, {}
    for i in range(points.shape[0]):
        if i in kept:
            continue
        w, residual, _ = hull_membership(points[kept], points[i], tol)
        certificates[i] = w
        residuals[i] = residual

    logger.debug(f"Hull keeps {len(kept)} of {points.shape[0]} points (tol {tol})")
    return HullResult(
        n_points=points.shape[0],
        vertex_indices=tuple(kept),
        certificates=certificates,
        residuals=residuals,
        tol=tol,
    )


def carry_variance(
    pairs: Sequence[LoadShapePair], hull: HullResult
) -> List[LoadShapePair]:
    """Pairs at the hull vertices, in order; variances are never interpolated."""
    if len(pairs) != hull.n_points:
        raise DimensionError(
            f"hull was computed from {hull.n_points} points, got {len(pairs)} pairs"
        )
    return [pairs[i] for i in hull.vertex_indices]


def minkowski_sum(a: Sequence, b: Sequence) -> np.ndarray:
    """All pairwise sums ``a_i + b_j``, ordered by i then j."""
    A, B = _as_points(a), _as_points(b)
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("Minkowski sum operands must be nonempty")
    if A.shape[1] != B.shape[1]:
        raise DimensionError(f"dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    return (A[:, None, :] + B[None, :, :]).reshape(-1, A.shape[1])


def reduce_class(
    der: DerClass, tol: float = DEFAULT_TOL, workers: int = 1
) -> Tuple[DerClass, HullResult]:
    hull = reduce_to_hull(der.means(), tol=tol, workers=workers)
    vertices = carry_variance(der.pairs, hull)
    logger.info(
        f"{der.name}: {len(vertices)} hull vertices from {len(der.pairs)} sequences"
    )
    return der.model_copy(update={"pairs": tuple(vertices)}), hull
