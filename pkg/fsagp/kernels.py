"""Matérn covariance functions, Wendland tapers, distances and sparsity patterns."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, Literal, Union

import numpy as np
import numpy.typing as npt
from scipy import sparse
from scipy.optimize import brentq
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from fsagp.errors import DomainError

__all__ = [
    "PARAM_NAMES",
    "Array",
    "CovParams",
    "KernelSpec",
    "LocationSet",
    "TaperPattern",
    "TaperSpec",
    "cross_cov",
    "cross_taper_pattern",
    "effective_range",
    "gamma_for_n_gamma",
    "kernel_eval",
    "kernel_grad",
    "n_gamma_for_gamma",
    "rho_for_effective_range",
    "taper_eval",
    "taper_pattern",
]

Array = npt.NDArray[np.float64]
Scalar = Union[float, Array]

# Order of the covariance parameters in every gradient and Fisher matrix.
PARAM_NAMES = ("sigma2", "sigma1_2", "rho")

_SQRT3 = math.sqrt(3.0)
_SQRT5 = math.sqrt(5.0)


@dataclass(frozen=True)
class CovParams:
    """Covariance parameters θ = (σ², σ₁², ρ) and regression coefficients β."""

    sigma2: float
    sigma1_2: float
    rho: float
    beta: Array = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        """Validate positivity and finiteness."""

        for name in PARAM_NAMES:
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0:
                raise DomainError(f"{name} must be finite and positive, got {value!r}")
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if not np.all(np.isfinite(beta)):
            raise DomainError("beta must be finite")
        object.__setattr__(self, "beta", beta)

    @property
    def theta(self) -> Array:
        """Return (σ², σ₁², ρ) as an array."""
        return np.array([self.sigma2, self.sigma1_2, self.rho])

    @classmethod
    def from_theta(cls, theta: npt.ArrayLike, beta: npt.ArrayLike | None = None) -> CovParams:
        """Build from an array ordered as `PARAM_NAMES`."""

        t = np.asarray(theta, dtype=float)
        return cls(
            float(t[0]),
            float(t[1]),
            float(t[2]),
            np.zeros(0) if beta is None else np.asarray(beta, dtype=float),
        )

    def with_(self, **changes: Any) -> CovParams:
        """Return a copy with `changes` applied."""
        return replace(self, **changes)


@dataclass(frozen=True)
class KernelSpec:
    """Matérn kernel with fixed smoothness ν ∈ {1/2, 3/2, 5/2}."""

    nu: float = 1.5
    family: Literal["matern"] = "matern"

    def __post_init__(self) -> None:
        """Restrict ν to the closed-form cases."""

        if self.family != "matern":
            raise DomainError(f"unsupported kernel family {self.family!r}")
        if self.nu not in (0.5, 1.5, 2.5):
            raise DomainError(f"nu must be one of 0.5, 1.5, 2.5, got {self.nu!r}")

    def correlation(self, r: Array) -> Array:
        """Return the correlation at scaled distance `r` = dist/ρ."""

        if self.nu == 0.5:
            return np.exp(-r)
        if self.nu == 1.5:
            a = _SQRT3 * r
            return (1.0 + a) * np.exp(-a)
        a = _SQRT5 * r
        return (1.0 + a + a * a / 3.0) * np.exp(-a)

    def correlation_drho(self, r: Array, rho: float) -> Array:
        """Return ∂corr/∂ρ at scaled distance `r` = dist/ρ."""

        if self.nu == 0.5:
            return r * np.exp(-r) / rho
        if self.nu == 1.5:
            return 3.0 * r * r * np.exp(-_SQRT3 * r) / rho
        a = _SQRT5 * r
        return a * a * (1.0 + a) * np.exp(-a) / (3.0 * rho)


@dataclass(frozen=True)
class TaperSpec:
    """Compactly supported Wendland taper with range γ."""

    gamma: float
    family: Literal["wendland1", "wendland2"] = "wendland2"

    def __post_init__(self) -> None:
        """Validate the taper range and family."""

        if not math.isfinite(self.gamma) or self.gamma <= 0:
            raise DomainError(f"taper range gamma must be positive, got {self.gamma!r}")
        if self.family not in ("wendland1", "wendland2"):
            raise DomainError(f"unsupported taper family {self.family!r}")


def _check_dist(dist: Scalar) -> Array:

    d = np.asarray(dist, dtype=float)
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise DomainError("distances must be finite and nonnegative")
    return d


def kernel_eval(spec: KernelSpec, params: CovParams, dist: Scalar) -> Any:
    """Return c(dist) = σ₁²·corr(dist/ρ); scalar in, scalar out."""

    d = _check_dist(dist)
    out = params.sigma1_2 * spec.correlation(d / params.rho)
    return float(out) if out.ndim == 0 else out


def kernel_grad(spec: KernelSpec, params: CovParams, dist: Scalar, wrt: str) -> Any:
    """Return ∂c/∂θ at `dist` for `wrt` in {"sigma1_2", "rho"}."""

    d = _check_dist(dist)
    r = d / params.rho
    if wrt == "sigma1_2":
        out = spec.correlation(r)
    elif wrt == "rho":
        out = params.sigma1_2 * spec.correlation_drho(r, params.rho)
    else:
        raise DomainError(f"kernel has no derivative with respect to {wrt!r}")
    return float(out) if out.ndim == 0 else out


def taper_eval(spec: TaperSpec, dist: Scalar) -> Any:
    """Return the Wendland taper at `dist`; exactly 0 for dist ≥ γ."""

    d = _check_dist(dist)
    t = np.minimum(d / spec.gamma, 1.0)
    if spec.family == "wendland1":
        out = (1.0 - t) ** 4 * (4.0 * t + 1.0)
    else:
        out = (1.0 - t) ** 6 * (35.0 * t * t + 18.0 * t + 3.0) / 3.0
    return float(out) if out.ndim == 0 else out


class LocationSet:
    """Points in R^d with a k-d tree for radius and nearest-neighbor queries."""

    def __init__(self, coords: npt.ArrayLike, workers: int = -1) -> None:
        """Validate `coords` (n×d, or n-vector for d = 1)."""

        c = np.asarray(coords, dtype=float)
        if c.ndim == 1:
            c = c[:, None]
        if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
            raise DomainError(f"coordinates must be an n×d array, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise DomainError("coordinates must be finite")
        self.coords = c
        self.workers = workers

    def __len__(self) -> int:
        return int(self.coords.shape[0])

    @property
    def n(self) -> int:
        """Number of points."""
        return len(self)

    @property
    def d(self) -> int:
        """Spatial dimension."""
        return int(self.coords.shape[1])

    @cached_property
    def tree(self) -> cKDTree:
        """Spatial index."""
        return cKDTree(self.coords)

    def subset(self, index: npt.ArrayLike) -> LocationSet:
        """Return the points at `index`."""
        return LocationSet(self.coords[np.asarray(index)], self.workers)

    def diameter(self) -> float:
        """Return the length of the bounding-box diagonal."""
        return float(np.linalg.norm(self.coords.max(axis=0) - self.coords.min(axis=0)))

    def knn(self, points: Array, k: int) -> tuple[Array, npt.NDArray[np.intp]]:
        """Return distances and indices of the `k` nearest points to each of `points`."""

        dist, idx = self.tree.query(points, k=k, workers=self.workers)
        return np.asarray(dist), np.asarray(idx)

    def pairs_within(self, gamma: float) -> npt.NDArray[np.intp]:
        """Return all index pairs i < j with ‖sᵢ − sⱼ‖ < γ as a k×2 array."""

        pairs = self.tree.query_pairs(gamma, output_type="ndarray")
        pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
        if len(pairs):
            dist = np.linalg.norm(self.coords[pairs[:, 0]] - self.coords[pairs[:, 1]], axis=1)
            pairs = pairs[dist < gamma]
        return pairs

    def cross_within(self, other: LocationSet, gamma: float) -> npt.NDArray[np.intp]:
        """Return pairs (i in self, j in other) with distance < γ as a k×2 array."""

        self._check_dim(other)
        hits = other.tree.query_ball_tree(self.tree, gamma)
        counts = np.fromiter((len(h) for h in hits), dtype=np.intp, count=len(hits))
        if counts.sum() == 0:
            return np.zeros((0, 2), dtype=np.intp)
        rows = np.concatenate([np.asarray(h, dtype=np.intp) for h in hits if h])
        cols = np.repeat(np.arange(len(hits), dtype=np.intp), counts)
        dist = np.linalg.norm(self.coords[rows] - other.coords[cols], axis=1)
        keep = dist < gamma
        return np.column_stack([rows[keep], cols[keep]])

    def _check_dim(self, other: LocationSet) -> None:

        if other.d != self.d:
            raise DomainError(f"dimension mismatch: {self.d} vs {other.d}")


@dataclass(frozen=True)
class TaperPattern:
    """Sparsity pattern of a tapered matrix in CSR order, with the pairwise distances.

    Entries are sorted by (row, column), so `values` arrays computed entry-wise line up with
    the CSR `indices`/`indptr` directly.
    """

    shape: tuple[int, int]
    rows: npt.NDArray[np.intp]
    cols: npt.NDArray[np.intp]
    dists: Array
    indptr: npt.NDArray[np.intp]

    @classmethod
    def from_pairs(
        cls, shape: tuple[int, int], rows: npt.ArrayLike, cols: npt.ArrayLike, dists: Array
    ) -> TaperPattern:
        """Sort entries into CSR order."""

        r = np.asarray(rows, dtype=np.intp)
        c = np.asarray(cols, dtype=np.intp)
        order = np.lexsort((c, r))
        r, c, d = r[order], c[order], np.asarray(dists, dtype=float)[order]
        indptr = np.zeros(shape[0] + 1, dtype=np.intp)
        np.cumsum(np.bincount(r, minlength=shape[0]), out=indptr[1:])
        return cls(shape, r, c, d, indptr)

    @property
    def nnz(self) -> int:
        """Number of stored entries."""
        return int(self.rows.size)

    @property
    def n_gamma(self) -> float:
        """Average number of entries per row."""
        return self.nnz / self.shape[0]

    @property
    def n_gamma_cols(self) -> float:
        """Average number of entries per column."""
        return self.nnz / self.shape[1]

    def to_sparse(self, values: Array) -> sparse.csr_matrix:
        """Return a CSR matrix with `values` on this pattern."""

        return sparse.csr_matrix(
            (np.asarray(values, dtype=float), self.cols, self.indptr), shape=self.shape
        )

    def taper(self, spec: TaperSpec) -> Array:
        """Return the taper values on the pattern."""
        return np.asarray(taper_eval(spec, self.dists))


def cross_cov(
    locs_a: LocationSet, locs_b: LocationSet, spec: KernelSpec, params: CovParams
) -> Array:
    """Return the dense covariance matrix [c(aᵢ, bⱼ)]."""

    locs_a._check_dim(locs_b)  # pylint: disable=protected-access
    dist = cdist(locs_a.coords, locs_b.coords)
    return np.asarray(kernel_eval(spec, params, dist))


def taper_pattern(locs: LocationSet, gamma: float) -> TaperPattern:
    """Return the symmetric pattern {(i, j): ‖sᵢ − sⱼ‖ < γ} plus the diagonal."""

    if not gamma > 0:
        raise DomainError(f"taper range gamma must be positive, got {gamma!r}")
    n = locs.n
    pairs = locs.pairs_within(gamma)
    diag = np.arange(n, dtype=np.intp)
    rows = np.concatenate([diag, pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([diag, pairs[:, 1], pairs[:, 0]])
    dists = np.linalg.norm(locs.coords[rows] - locs.coords[cols], axis=1)
    return TaperPattern.from_pairs((n, n), rows, cols, dists)


def cross_taper_pattern(locs: LocationSet, locs_p: LocationSet, gamma: float) -> TaperPattern:
    """Return the n×n_p pattern {(i, j): ‖sᵢ − s^p_j‖ < γ}."""

    pairs = locs.cross_within(locs_p, gamma)
    dists = np.linalg.norm(locs.coords[pairs[:, 0]] - locs_p.coords[pairs[:, 1]], axis=1)
    return TaperPattern.from_pairs((locs.n, locs_p.n), pairs[:, 0], pairs[:, 1], dists)


def gamma_for_n_gamma(n: int, n_gamma: float) -> float:
    """Return γ giving about `n_gamma` entries per row for n uniform points on [0,1]²."""

    if n_gamma < 1 or n < 1:
        raise DomainError("n and n_gamma must be at least 1")
    return math.sqrt(n_gamma / (n * math.pi))


def n_gamma_for_gamma(n: int, gamma: float) -> float:
    """Inverse of `gamma_for_n_gamma`."""
    return n * math.pi * gamma * gamma


def effective_range(spec: KernelSpec, rho: float) -> float:
    """Return the distance at which the correlation drops to 0.05."""

    r = brentq(lambda x: float(spec.correlation(np.asarray(x))) - 0.05, 1e-9, 100.0)
    return float(r) * rho


def rho_for_effective_range(spec: KernelSpec, eff_range: float) -> float:
    """Return the range ρ whose effective range is `eff_range`."""
    return eff_range / effective_range(spec, 1.0)
