"""Selection of inducing points from the data locations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
from loguru import logger
from scipy.spatial import cKDTree

from fsagp.errors import DomainError
from fsagp.kernels import Array, LocationSet

__all__ = ["InducingSet", "lloyd", "select_inducing", "select_kmeanspp", "select_random"]


@dataclass(frozen=True)
class InducingSet:
    """The m inducing points S* and, when they are data points, their source indices."""

    locs: LocationSet
    indices: npt.NDArray[np.intp] | None = None

    @property
    def m(self) -> int:
        """Number of inducing points."""
        return self.locs.n

    @property
    def coords(self) -> Array:
        """The m×d coordinate matrix."""
        return self.locs.coords


def _check_m(locs: LocationSet, m: int) -> None:

    if m < 1 or m > locs.n:
        raise DomainError(f"inducing points must satisfy 1 <= m <= n={locs.n}, got {m}")


def select_random(locs: LocationSet, m: int, seed: int | None = None) -> InducingSet:
    """Sample `m` distinct data locations uniformly without replacement."""

    _check_m(locs, m)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(locs.n, size=m, replace=False)).astype(np.intp)
    return InducingSet(locs.subset(idx), idx)


def select_kmeanspp(
    locs: LocationSet,
    m: int,
    max_iters: int = 20,
    seed: int | None = None,
    rtol: float = 1e-4,
) -> InducingSet:
    """Run kmeans++ seeding plus Lloyd iterations, then snap centroids to distinct data points.

    Duplicate locations are dropped before seeding, so `m` may not exceed the number of distinct
    locations.
    """

    _check_m(locs, m)
    rng = np.random.default_rng(seed)
    points, first = np.unique(locs.coords, axis=0, return_index=True)
    if m > len(points):
        raise DomainError(f"m={m} exceeds the number of distinct locations ({len(points)})")

    centers = _dsquared_seeding(points, m, rng)
    trace = lloyd(points, centers, max_iters, rtol, locs.workers)
    logger.debug("kmeans++: m={} final SSE={:.6g}", m, trace[-1] if trace else 0.0)

    snapped = _snap(points, centers, locs.workers)
    idx = np.sort(first[snapped]).astype(np.intp)
    return InducingSet(locs.subset(idx), idx)


def _dsquared_seeding(points: Array, m: int, rng: np.random.Generator) -> Array:
    """Pick `m` initial centers with probability proportional to squared distance (D²)."""

    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for _ in range(1, m):
        total = d2.sum()
        nxt = int(rng.choice(n, p=d2 / total)) if total > 0 else int(rng.integers(n))
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((points - points[nxt]) ** 2, axis=1))
    return points[chosen].copy()


def lloyd(
    points: Array, centers: Array, max_iters: int = 20, rtol: float = 1e-4, workers: int = -1
) -> list[float]:
    """Refine `centers` in place; return the within-cluster sum of squares per iteration."""

    m = len(centers)
    prev = np.inf
    trace: list[float] = []
    for it in range(max_iters):
        dist, label = cKDTree(centers).query(points, workers=workers)
        sse = float(np.sum(dist**2))
        trace.append(sse)
        logger.debug("kmeans++ iteration {}: SSE={:.6g}", it, sse)
        if prev < np.inf and prev - sse <= rtol * prev:
            break
        prev = sse
        counts = np.bincount(label, minlength=m)
        for k in range(points.shape[1]):
            sums = np.bincount(label, weights=points[:, k], minlength=m)
            nonempty = counts > 0
            centers[nonempty, k] = sums[nonempty] / counts[nonempty]
    return trace


def _snap(points: Array, centers: Array, workers: int) -> npt.NDArray[np.intp]:
    """Map each center to its nearest unused data point."""

    n, m = len(points), len(centers)
    tree = cKDTree(points)
    used = np.zeros(n, dtype=bool)
    out = np.empty(m, dtype=np.intp)
    _, nearest = tree.query(centers, workers=workers)
    for c in range(m):
        j = int(nearest[c])
        k = 1
        while used[j]:
            k = min(2 * k + 1, n)
            _, cand = tree.query(centers[c], k=k)
            free = [int(i) for i in np.atleast_1d(cand) if not used[int(i)]]
            if free:
                j = free[0]
            elif k == n:
                j = int(np.flatnonzero(~used)[0])
        used[j] = True
        out[c] = j
    return out


def select_inducing(
    locs: LocationSet, m: int, method: str = "kmeans++", seed: int | None = None
) -> InducingSet:
    """Dispatch on `method` ("kmeans++" or "random")."""

    if method == "kmeans++":
        return select_kmeanspp(locs, m, seed=seed)
    if method == "random":
        return select_random(locs, m, seed=seed)
    raise DomainError(f"unknown inducing-point method {method!r}")
