"""Vecchia approximation Σ_V⁻¹ = BᵀD⁻¹B and iterative methods for Σ_V⁻¹ + W systems.

Each point, in a fixed ordering, is conditioned on its m_v nearest predecessors. B is unit lower
triangular in the ordered index space; every public method takes and returns vectors in the
original order of the locations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Literal

import numpy as np
import numpy.typing as npt
from loguru import logger
from scipy import linalg, sparse
from scipy.sparse.linalg import spsolve_triangular
from scipy.spatial import cKDTree

from fsagp.errors import AssemblyError, DomainError
from fsagp.fsa import factor_sigma_m
from fsagp.inducing import InducingSet
from fsagp.kernels import Array, CovParams, KernelSpec, LocationSet, cross_cov, kernel_eval
from fsagp.krylov import CgConfig, pcg_solve, slq_logdet_from, solve_probes
from fsagp.precond import DiagPrecond, FitcPrecond, IdentityPrecond, Preconditioner

__all__ = [
    "VECCHIA_PRECONDS",
    "DiagW",
    "ObsVecchiaPrecond",
    "VecchiaModel",
    "build_vecchia",
    "fitc_precond_vecchia",
    "make_vecchia_precond",
    "obs_vecchia_precond",
    "solve_vecchia_system",
    "vecchia_logdet_slq",
    "vecchia_nll_gaussian",
]

VECCHIA_PRECONDS = ("none", "fitc", "obs-vecchia")

Ordering = Literal["given", "random"]

# Rows per block in the neighbor search and the batched conditional solves.
_CHUNK = 256


@dataclass(frozen=True)
class DiagW:
    """Positive diagonal W; w = 1/σ² for a Gaussian likelihood."""

    w: Array

    def __post_init__(self) -> None:
        """Require strictly positive, finite entries."""

        w = np.asarray(self.w, dtype=float)
        if w.ndim != 1 or not np.all(np.isfinite(w)) or not np.all(w > 0):
            raise DomainError("W must be a vector of strictly positive, finite entries")
        object.__setattr__(self, "w", w)

    @classmethod
    def gaussian(cls, n: int, sigma2: float) -> DiagW:
        """W = σ⁻²I."""
        return cls(np.full(n, 1.0 / sigma2))

    @property
    def inverse(self) -> Array:
        """Diagonal of W⁻¹."""
        return 1.0 / self.w

    def logdet(self) -> float:
        """Return log det W."""
        return float(np.sum(np.log(self.w)))

    def apply(self, x: Array) -> Array:
        """Return W x."""
        return x * self.w if x.ndim == 1 else x * self.w[:, None]

    def apply_inverse(self, x: Array) -> Array:
        """Return W⁻¹x."""
        return x / self.w if x.ndim == 1 else x / self.w[:, None]


@dataclass(frozen=True)
class VecchiaModel:
    """Factors B (unit lower triangular, ordered space) and D, with the ordering permutation."""

    # pylint: disable=too-many-instance-attributes

    locs: LocationSet
    params: CovParams
    kernel: KernelSpec
    perm: npt.NDArray[np.intp]
    neighbors: npt.NDArray[np.intp]  # n×m_v in ordered indices, −1 padded
    b: sparse.csr_matrix
    d: Array
    nugget: Array

    @property
    def n(self) -> int:
        """Number of locations."""
        return self.locs.n

    @property
    def m_v(self) -> int:
        """Maximum number of conditioning neighbors."""
        return int(self.neighbors.shape[1])

    @cached_property
    def bt(self) -> sparse.csr_matrix:
        """Bᵀ in CSR form for the upper triangular solve."""
        return self.b.T.tocsr()

    def _to_ordered(self, x: Array) -> Array:
        return np.asarray(x[self.perm])

    def _from_ordered(self, x: Array) -> Array:
        out = np.empty_like(x)
        out[self.perm] = x
        return out

    def _scale(self, x: Array, s: Array) -> Array:
        return x * s if x.ndim == 1 else x * s[:, None]

    def precision_matvec(self, x: Array) -> Array:
        """Return Σ_V⁻¹x = BᵀD⁻¹Bx."""

        xo = self._to_ordered(np.asarray(x, dtype=float))
        y = self.b.T @ self._scale(self.b @ xo, 1.0 / self.d)
        return self._from_ordered(np.asarray(y))

    def cov_matvec(self, x: Array) -> Array:
        """Return Σ_V x = B⁻¹DB⁻ᵀx with two sparse triangular solves."""

        xo = self._to_ordered(np.asarray(x, dtype=float))
        t = spsolve_triangular(self.bt, xo, lower=False, unit_diagonal=True)
        t = self._scale(np.asarray(t), self.d)
        y = spsolve_triangular(self.b, t, lower=True, unit_diagonal=True)
        return self._from_ordered(np.asarray(y))

    def precision_diag(self) -> Array:
        """Return diag(Σ_V⁻¹)."""

        col = np.asarray(self.b.multiply(self.b).T @ (1.0 / self.d)).ravel()
        return self._from_ordered(col)

    def logdet_cov(self) -> float:
        """Return log det Σ_V = Σ log Dᵢ."""
        return float(np.sum(np.log(self.d)))

    def sample(self, rng: np.random.Generator, size: int | None = None) -> Array:
        """Draw from N(0, Σ_V) as B⁻¹D^{1/2}ε."""

        eps = rng.standard_normal((self.n,) if size is None else (self.n, size))
        t = spsolve_triangular(self.b, self._scale(eps, np.sqrt(self.d)), lower=True)
        return self._from_ordered(np.asarray(t))

    def to_dense_precision(self) -> Array:
        """Return Σ_V⁻¹ densely in the original order (small n only)."""

        b = self.b.toarray()
        prec = b.T @ (b / self.d[:, None])
        inv = np.argsort(self.perm)
        return np.asarray(prec[np.ix_(inv, inv)])


def _ordering(n: int, ordering: Ordering, seed: int) -> npt.NDArray[np.intp]:

    if ordering == "given":
        return np.arange(n, dtype=np.intp)
    if ordering == "random":
        return np.random.default_rng(seed).permutation(n).astype(np.intp)
    raise DomainError(f"unknown ordering {ordering!r}")


def _find_neighbors(coords: Array, m_v: int, workers: int) -> npt.NDArray[np.intp]:
    """Return the m_v nearest predecessors of every point (−1 padded for the first rows)."""

    n = len(coords)
    nbrs = np.full((n, m_v), -1, dtype=np.intp)
    for start in range(1, n, _CHUNK):
        end = min(start + _CHUNK, n)
        k = min(m_v, start)
        dist, idx = cKDTree(coords[:start]).query(coords[start:end], k=k, workers=workers)
        dist = np.asarray(dist).reshape(end - start, k)
        idx = np.asarray(idx).reshape(end - start, k)
        for i in range(start, end):
            within = np.arange(start, i, dtype=np.intp)
            cand = np.concatenate([idx[i - start], within])
            cand_d = np.concatenate(
                [dist[i - start], np.linalg.norm(coords[within] - coords[i], axis=1)]
            )
            q = min(m_v, i)
            order = np.argsort(cand_d, kind="stable")[:q]
            nbrs[i, :q] = cand[order]
    return nbrs


def _conditionals(
    coords: Array,
    rows: npt.NDArray[np.intp],
    nbrs: npt.NDArray[np.intp],
    kernel: KernelSpec,
    params: CovParams,
    nugget: Array,
) -> tuple[Array, Array]:
    """Solve Σ_{N(i)}Aᵢ = Σ_{N(i),i} for a batch of rows with equally many neighbors."""

    # pylint: disable=too-many-arguments,too-many-positional-arguments

    cn = coords[nbrs]  # r×q×d
    ci = coords[rows]  # r×d
    dnn = np.linalg.norm(cn[:, :, None, :] - cn[:, None, :, :], axis=-1)
    sig_nn = np.asarray(kernel_eval(kernel, params, dnn))
    q = nbrs.shape[1]
    diag = np.arange(q)
    sig_nn[:, diag, diag] += nugget[nbrs]
    dni = np.linalg.norm(cn - ci[:, None, :], axis=-1)
    sig_ni = np.asarray(kernel_eval(kernel, params, dni))

    for jitter in (0.0, 1e-10, 1e-8):
        mat = sig_nn.copy()
        mat[:, diag, diag] += jitter * params.sigma1_2
        try:
            np.linalg.cholesky(mat)
        except np.linalg.LinAlgError:
            continue
        if jitter:
            logger.warning("Vecchia conditioning sets needed jitter {:.0e}", jitter)
        a = np.linalg.solve(mat, sig_ni[..., None])[..., 0]
        d = params.sigma1_2 + nugget[rows] - np.sum(a * sig_ni, axis=1)
        return a, d
    raise AssemblyError("Vecchia conditioning covariance is singular after jitter")


def build_vecchia(
    locs: LocationSet,
    params: CovParams,
    kernel: KernelSpec,
    m_v: int,
    ordering: Ordering = "random",
    seed: int = 0,
    nugget: float | Array = 0.0,
) -> VecchiaModel:
    """Build the Vecchia factors of Σ + diag(`nugget`).

    With a zero nugget this approximates the latent covariance; with the (pseudo-)nugget it is
    the observable Vecchia approximation.
    """

    # pylint: disable=too-many-arguments,too-many-positional-arguments,too-many-locals

    n = locs.n
    if m_v < 1:
        raise DomainError(f"m_v must be at least 1, got {m_v}")
    m_v = min(m_v, max(n - 1, 1))
    perm = _ordering(n, ordering, seed)
    coords = locs.coords[perm]
    nug = np.broadcast_to(np.asarray(nugget, dtype=float), (n,))[perm].copy()
    if np.any(nug < 0):
        raise DomainError("nugget must be nonnegative")
    nbrs = _find_neighbors(coords, m_v, locs.workers)

    d = np.empty(n)
    b_rows: list[Array] = [np.arange(n)]
    b_cols: list[Array] = [np.arange(n)]
    b_vals: list[Array] = [np.ones(n)]
    counts = np.minimum(np.arange(n), m_v)
    for q in np.unique(counts):
        group = np.flatnonzero(counts == q)
        for start in range(0, len(group), _CHUNK):
            rows = group[start : start + _CHUNK]
            if q == 0:
                d[rows] = params.sigma1_2 + nug[rows]
                continue
            nb = nbrs[rows, :q]
            a, d[rows] = _conditionals(coords, rows, nb, kernel, params, nug)
            b_rows.append(np.repeat(rows, q))
            b_cols.append(nb.ravel())
            b_vals.append(-a.ravel())
    if np.any(d <= 0):
        raise AssemblyError(f"nonpositive Vecchia conditional variance ({d.min():.3g})")

    b = sparse.csr_matrix(
        (np.concatenate(b_vals), (np.concatenate(b_rows), np.concatenate(b_cols))), shape=(n, n)
    )
    b.sort_indices()
    logger.debug("Vecchia: n={} m_v={} ordering={}", n, m_v, ordering)
    return VecchiaModel(locs, params, kernel, perm, nbrs, b, d, nug[np.argsort(perm)])


class ObsVecchiaPrecond(Preconditioner):
    """Observable Vecchia approximation of Σ + W⁻¹ used as a preconditioner."""

    name = "obs-vecchia"

    def __init__(self, model: VecchiaModel) -> None:
        """Wrap a Vecchia model built with the pseudo-nugget W⁻¹."""

        self.n = model.n
        self.model = model

    def solve(self, b: Array) -> Array:
        return self.model.precision_matvec(b)

    def matvec(self, x: Array) -> Array:
        return self.model.cov_matvec(x)

    def logdet(self) -> float:
        return self.model.logdet_cov()

    def sample(self, rng: np.random.Generator, size: int | None = None) -> Array:
        return self.model.sample(rng, size)


def fitc_precond_vecchia(
    locs: LocationSet,
    inducing: InducingSet,
    params: CovParams,
    kernel: KernelSpec,
    w: DiagW,
) -> FitcPrecond:
    """FITC preconditioner for Σ_V + W⁻¹ with D_s = diag(Σ − Σ_mnᵀΣ_m⁻¹Σ_mn) + W⁻¹."""

    _, chol_m = factor_sigma_m(inducing, kernel, params)
    sigma_mn = cross_cov(inducing.locs, locs, kernel, params)
    v = linalg.solve_triangular(chol_m, sigma_mn, lower=True)
    resid = np.maximum(params.sigma1_2 - np.sum(v * v, axis=0), 0.0)
    return FitcPrecond(sigma_mn, chol_m, resid + w.inverse)


def obs_vecchia_precond(
    locs: LocationSet,
    params: CovParams,
    kernel: KernelSpec,
    w: DiagW,
    m_v: int,
    ordering: Ordering = "random",
    seed: int = 0,
) -> ObsVecchiaPrecond:
    """Observable Vecchia preconditioner: Vecchia of Σ with W⁻¹ as pseudo-nugget."""

    # pylint: disable=too-many-arguments,too-many-positional-arguments

    return ObsVecchiaPrecond(build_vecchia(locs, params, kernel, m_v, ordering, seed, w.inverse))


def make_vecchia_precond(
    kind: str,
    model: VecchiaModel,
    w: DiagW,
    inducing: InducingSet | None = None,
    m_v: int | None = None,
    seed: int = 0,
) -> Preconditioner:
    """Build a preconditioner for Σ_V + W⁻¹ by name (one of `VECCHIA_PRECONDS`)."""

    # pylint: disable=too-many-arguments,too-many-positional-arguments

    if kind == "none":
        return IdentityPrecond(model.n)
    if kind == "fitc":
        if inducing is None:
            raise DomainError("the FITC preconditioner needs inducing points")
        return fitc_precond_vecchia(model.locs, inducing, model.params, model.kernel, w)
    if kind == "obs-vecchia":
        return obs_vecchia_precond(
            model.locs, model.params, model.kernel, w, m_v or model.m_v, "random", seed
        )
    raise DomainError(
        f"unknown Vecchia preconditioner {kind!r}; choose from {', '.join(VECCHIA_PRECONDS)}"
    )


def _check_w(model: VecchiaModel, w: DiagW) -> None:

    if w.w.size != model.n:
        raise DomainError(f"W has {w.w.size} entries, expected {model.n}")


def solve_vecchia_system(
    model: VecchiaModel,
    w: DiagW,
    v: Array,
    precond: Preconditioner,
    cfg: CgConfig,
    formulation: Literal["covariance", "precision"] = "covariance",
) -> Array:
    """Return x = (Σ_V⁻¹ + W)⁻¹v.

    The covariance formulation computes W⁻¹(Σ_V + W⁻¹)⁻¹Σ_V v with PCG on Σ_V + W⁻¹ and the given
    preconditioner. The precision formulation runs PCG on Σ_V⁻¹ + W itself with a Jacobi
    preconditioner and ignores `precond`.
    """

    # pylint: disable=too-many-arguments,too-many-positional-arguments

    _check_w(model, w)
    if formulation == "covariance":
        x, _, _ = pcg_solve(_cov_plus_winv(model, w), precond, model.cov_matvec(v), cfg)
        return w.apply_inverse(x)
    if formulation == "precision":
        jacobi = DiagPrecond(model.precision_diag() + w.w)
        x, _, _ = pcg_solve(lambda u: model.precision_matvec(u) + w.apply(u), jacobi, v, cfg)
        return x
    raise DomainError(f"unknown formulation {formulation!r}")


def _cov_plus_winv(model: VecchiaModel, w: DiagW) -> Callable[[Array], Array]:
    return lambda x: model.cov_matvec(x) + w.apply_inverse(x)


def _slq_cov_plus_winv(
    model: VecchiaModel, w: DiagW, precond: Preconditioner, cfg: CgConfig
) -> float:
    """SLQ estimate of log det(Σ_V + W⁻¹)."""

    _, solves = solve_probes(_cov_plus_winv(model, w), precond, cfg)
    return slq_logdet_from(solves, precond)


def vecchia_logdet_slq(
    model: VecchiaModel, w: DiagW, precond: Preconditioner, cfg: CgConfig
) -> float:
    """Estimate log det(Σ_V⁻¹ + W) = log det(Σ_V + W⁻¹) + log det W − Σ log Dᵢ."""

    _check_w(model, w)
    return _slq_cov_plus_winv(model, w, precond, cfg) + w.logdet() - model.logdet_cov()


def vecchia_nll_gaussian(
    locs: LocationSet,
    y: Array,
    X: Array | None,
    params: CovParams,
    kernel: KernelSpec,
    m_v: int,
    mode: Literal["latent-iterative", "observable-direct"] = "observable-direct",
    precond_kind: str = "obs-vecchia",
    cfg: CgConfig | None = None,
    inducing: InducingSet | None = None,
    seed: int = 0,
) -> float:
    """Gaussian negative log-likelihood under a Vecchia approximation.

    `observable-direct` factors Σ + σ²I by Vecchia and evaluates the likelihood in closed form.
    `latent-iterative` applies Vecchia to the latent process and evaluates the marginal
    likelihood of y with log det(Σ_V + σ²I) by SLQ and the quadratic form through
    (Σ_V + σ²I)⁻¹ = W − W(Σ_V⁻¹ + W)⁻¹W with W = σ⁻²I.
    """

    # pylint: disable=too-many-arguments,too-many-positional-arguments,too-many-locals

    n = locs.n
    r = np.asarray(y, dtype=float)
    if r.shape != (n,):
        raise DomainError(f"response must have length {n}, got shape {r.shape}")
    if X is not None and X.shape[1] and params.beta.size:
        r = r - X @ params.beta
    const = n * math.log(2 * math.pi)

    if mode == "observable-direct":
        obs = build_vecchia(locs, params, kernel, m_v, "random", seed, params.sigma2)
        quad = float(r @ obs.precision_matvec(r))
        return 0.5 * (const + obs.logdet_cov() + quad)

    if mode == "latent-iterative":
        cfg = cfg or CgConfig()
        model = build_vecchia(locs, params, kernel, m_v, "random", seed)
        w = DiagW.gaussian(n, params.sigma2)
        precond = make_vecchia_precond(precond_kind, model, w, inducing, seed=seed)
        logdet = _slq_cov_plus_winv(model, w, precond, cfg)
        wr = w.apply(r)
        quad = float(r @ wr - wr @ solve_vecchia_system(model, w, wr, precond, cfg))
        logger.debug("latent Vecchia NLL: logdet={:.6g} quad={:.6g}", logdet, quad)
        return 0.5 * (const + logdet + quad)

    raise DomainError(f"unknown Vecchia likelihood mode {mode!r}")
