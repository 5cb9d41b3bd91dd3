"""Preconditioners for CG on the FSA and Vecchia systems.

Every preconditioner P offers the same contract: `solve` (P⁻¹b), `matvec` (Pb), `logdet`,
`sample` (draws from N(0, P)) and, where the structure allows it, the exact gradient trace
Tr(P⁻¹∂P/∂θ) used by control variates.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from typing import Callable, ClassVar

import numpy as np
from loguru import logger
from scipy import linalg

from fsagp.errors import DomainError, FactorizationError, NumericalError
from fsagp.fsa import FsaDerivatives, FsaModel, lowrank_trace
from fsagp.kernels import Array

__all__ = [
    "PRECOND_KINDS",
    "DiagPrecond",
    "FitcPrecond",
    "IdentityPrecond",
    "PivCholPrecond",
    "Preconditioner",
    "build_piv_chol",
    "make_precond",
]

PRECOND_KINDS = ("none", "diag", "fitc", "piv-chol")


def _scale_rows(d: Array, b: Array) -> Array:
    return b / d if b.ndim == 1 else b / d[:, None]


def _gaussian(rng: np.random.Generator, shape: tuple[int, ...]) -> Array:
    return rng.standard_normal(shape)


class Preconditioner(ABC):
    """Symmetric positive definite n×n preconditioner."""

    name: ClassVar[str] = ""
    n: int

    @abstractmethod
    def solve(self, b: Array) -> Array:
        """Return P⁻¹b for a vector or an n×r block."""

    @abstractmethod
    def matvec(self, x: Array) -> Array:
        """Return P x."""

    @abstractmethod
    def logdet(self) -> float:
        """Return log det P."""

    @abstractmethod
    def sample(self, rng: np.random.Generator, size: int | None = None) -> Array:
        """Draw one vector (or `size` columns) from N(0, P)."""

    def grad_logdet_trace(self, wrt: str) -> float:
        """Return Tr(P⁻¹∂P/∂θ)."""
        raise DomainError(f"{self.name} preconditioner has no gradient trace for {wrt!r}")

    def derivative_matvec(self, wrt: str, x: Array) -> Array:
        """Return (∂P/∂θ) x."""
        raise DomainError(f"{self.name} preconditioner has no derivative for {wrt!r}")

    def _shape(self, size: int | None) -> tuple[int, ...]:
        return (self.n,) if size is None else (self.n, size)


class IdentityPrecond(Preconditioner):
    """P = I; turns PCG into plain CG."""

    name = "none"

    def __init__(self, n: int) -> None:
        """Identity of order `n`."""
        self.n = n

    def solve(self, b: Array) -> Array:
        return np.array(b, dtype=float)

    def matvec(self, x: Array) -> Array:
        return np.array(x, dtype=float)

    def logdet(self) -> float:
        return 0.0

    def sample(self, rng: np.random.Generator, size: int | None = None) -> Array:
        return _gaussian(rng, self._shape(size))

    def grad_logdet_trace(self, wrt: str) -> float:
        return 0.0

    def derivative_matvec(self, wrt: str, x: Array) -> Array:
        return np.zeros_like(x, dtype=float)


class DiagPrecond(Preconditioner):
    """P = diag(d), by default d = diag(Σ̃_s)."""

    name = "diag"

    def __init__(self, d: Array, model: FsaModel | None = None) -> None:
        """Check that `d` is strictly positive; `model` supplies derivatives on demand."""

        d = np.asarray(d, dtype=float)
        if d.ndim != 1 or not np.all(d > 0):
            raise FactorizationError("diag", "diagonal preconditioner must be strictly positive")
        self.n = d.size
        self.d = d
        self.model = model

    @classmethod
    def from_model(cls, model: FsaModel) -> DiagPrecond:
        """Use the FITC diagonal D_s of `model`."""
        return cls(model.diag_s, model)

    def solve(self, b: Array) -> Array:
        return _scale_rows(self.d, b)

    def matvec(self, x: Array) -> Array:
        return x * self.d if x.ndim == 1 else x * self.d[:, None]

    def logdet(self) -> float:
        return float(np.sum(np.log(self.d)))

    def sample(self, rng: np.random.Generator, size: int | None = None) -> Array:
        eps = _gaussian(rng, self._shape(size))
        root = np.sqrt(self.d)
        return eps * root if size is None else eps * root[:, None]

    def _ddiag(self, wrt: str) -> Array:

        if self.model is None:
            raise DomainError("diagonal preconditioner was built without a model")
        return self.model.derivatives.diag_sparse(wrt)

    def grad_logdet_trace(self, wrt: str) -> float:
        return float(np.sum(self._ddiag(wrt) / self.d))

    def derivative_matvec(self, wrt: str, x: Array) -> Array:
        dd = self._ddiag(wrt)
        return x * dd if x.ndim == 1 else x * dd[:, None]


class FitcPrecond(Preconditioner):
    """P̂ = D_s + Σ_mnᵀΣ_m⁻¹Σ_mn, applied with Sherman-Woodbury-Morrison and Sylvester."""

    # pylint: disable=too-many-instance-attributes

    name = "fitc"

    def __init__(
        self,
        sigma_mn: Array,
        chol_m: Array,
        d: Array,
        model: FsaModel | None = None,
    ) -> None:
        """Factor M = Σ_m + Σ_mn D_s⁻¹ Σ_mnᵀ; `model` supplies derivatives on demand."""

        d = np.asarray(d, dtype=float)
        if not np.all(d > 0):
            raise FactorizationError("fitc", "D_s must be strictly positive")
        self.n = d.size
        self.d = d
        self.sigma_mn = sigma_mn
        self.chol_m = chol_m
        self.model = model
        self.v = np.asarray(linalg.solve_triangular(chol_m, sigma_mn, lower=True))
        self.u = _scale_rows(d, sigma_mn.T)  # D_s⁻¹Σ_mnᵀ
        sigma_m = chol_m @ chol_m.T
        core = sigma_m + sigma_mn @ self.u
        core = 0.5 * (core + core.T)
        try:
            self.chol_woodbury = linalg.cholesky(core, lower=True)
        except linalg.LinAlgError as err:
            raise FactorizationError("fitc", str(err)) from err

    @classmethod
    def from_model(cls, model: FsaModel) -> FitcPrecond:
        """Build from the assembled FSA pieces (D_s = diag(Σ̃_s))."""
        return cls(model.sigma_mn, model.chol_m, model.diag_s, model)

    def solve(self, b: Array) -> Array:
        inner = linalg.cho_solve((self.chol_woodbury, True), self.u.T @ b)
        return np.asarray(_scale_rows(self.d, b) - self.u @ inner)

    def matvec(self, x: Array) -> Array:
        scaled = x * self.d if x.ndim == 1 else x * self.d[:, None]
        return np.asarray(scaled + self.v.T @ (self.v @ x))

    def logdet(self) -> float:
        logdet_core = 2.0 * float(np.sum(np.log(np.diag(self.chol_woodbury))))
        logdet_m = 2.0 * float(np.sum(np.log(np.diag(self.chol_m))))
        return logdet_core - logdet_m + float(np.sum(np.log(self.d)))

    def sample(self, rng: np.random.Generator, size: int | None = None) -> Array:
        m = self.v.shape[0]
        eps1 = _gaussian(rng, (m,) if size is None else (m, size))
        eps2 = _gaussian(rng, self._shape(size))
        root = np.sqrt(self.d)
        noise = eps2 * root if size is None else eps2 * root[:, None]
        return np.asarray(self.v.T @ eps1 + noise)

    def diag_inverse(self) -> Array:
        """Return diag(P̂⁻¹)."""

        inner = linalg.cho_solve((self.chol_woodbury, True), self.u.T)
        return np.asarray(1.0 / self.d - np.sum(self.u * inner.T, axis=1))

    def _derivs(self) -> FsaDerivatives:

        if self.model is None:
            raise DomainError("FITC preconditioner was built without a model")
        return self.model.derivatives

    def grad_logdet_trace(self, wrt: str) -> float:
        derivs = self._derivs()
        total = float(np.sum(self.diag_inverse() * derivs.diag_sparse(wrt)))
        for a, g, b in derivs.dlowrank[wrt]:
            total += lowrank_trace(a, g, b, self.solve(a.T))
        return total

    def derivative_matvec(self, wrt: str, x: Array) -> Array:
        derivs = self._derivs()
        dd = derivs.diag_sparse(wrt)
        out = x * dd if x.ndim == 1 else x * dd[:, None]
        return np.asarray(out + derivs.lowrank_matvec(wrt, x))


class PivCholPrecond(Preconditioner):
    """P = L_kL_kᵀ + σ²I from a partial pivoted Cholesky factor."""

    name = "piv-chol"

    def __init__(self, l_k: Array, sigma2: float, residual_trace: float = 0.0) -> None:
        """Factor the k×k Woodbury core I + L_kᵀL_k/σ²."""

        self.n = l_k.shape[0]
        self.l_k = l_k
        self.sigma2 = sigma2
        self.residual_trace = residual_trace
        core = np.eye(l_k.shape[1]) + (l_k.T @ l_k) / sigma2
        try:
            self.chol_core = linalg.cholesky(core, lower=True)
        except linalg.LinAlgError as err:
            raise FactorizationError("piv-chol", str(err)) from err

    @property
    def rank(self) -> int:
        """Realized rank k."""
        return int(self.l_k.shape[1])

    def solve(self, b: Array) -> Array:
        inner = linalg.cho_solve((self.chol_core, True), self.l_k.T @ b)
        return np.asarray((b - self.l_k @ inner / self.sigma2) / self.sigma2)

    def matvec(self, x: Array) -> Array:
        return np.asarray(self.l_k @ (self.l_k.T @ x) + self.sigma2 * x)

    def logdet(self) -> float:
        return self.n * math.log(self.sigma2) + 2.0 * float(
            np.sum(np.log(np.diag(self.chol_core)))
        )

    def sample(self, rng: np.random.Generator, size: int | None = None) -> Array:
        k = self.rank
        eps1 = _gaussian(rng, (k,) if size is None else (k, size))
        eps2 = _gaussian(rng, self._shape(size))
        return np.asarray(self.l_k @ eps1 + math.sqrt(self.sigma2) * eps2)


def build_piv_chol(
    column: Callable[[int], Array],
    diag: Array,
    k: int,
    sigma2: float,
    scale: float | None = None,
) -> PivCholPrecond:
    """Greedy partial pivoted Cholesky of a PSD matrix given column and diagonal access.

    Args:
        column: Returns column j of the matrix being factored (Σ̃† − σ²I for the FSA).
        diag:   Its diagonal.
        k:      Maximum rank.
        sigma2: Nugget added back through the Woodbury core.
        scale:  Reference magnitude for the stopping rule; defaults to max(diag).
    """

    n = diag.size
    if not 0 <= k <= n:
        raise DomainError(f"rank must satisfy 0 <= k <= n={n}, got {k}")
    resid = np.array(diag, dtype=float)
    ref = float(np.max(resid)) if scale is None else scale
    stop = 1e-12 * ref
    neg_tol = 1e-8 * ref
    factor = np.zeros((n, k))
    rank = 0
    for j in range(k):
        i = int(np.argmax(resid))
        if resid[i] <= stop:
            break
        col = np.array(column(i), dtype=float)
        if j:
            col -= factor[:, :j] @ factor[i, :j]
        factor[:, j] = col / math.sqrt(resid[i])
        resid -= factor[:, j] ** 2
        resid[i] = 0.0
        if resid.min() < -neg_tol:
            raise NumericalError(
                f"pivoted Cholesky residual went negative ({resid.min():.3g}) at step {j}",
                iteration=j,
            )
        np.maximum(resid, 0.0, out=resid)
        rank = j + 1
    trace = float(resid.sum())
    logger.debug("pivoted Cholesky: rank={} residual trace={:.6g}", rank, trace)
    return PivCholPrecond(factor[:, :rank], sigma2, trace)


def make_precond(kind: str, model: FsaModel, rank: int = 200) -> Preconditioner:
    """Build the preconditioner named `kind` (one of `PRECOND_KINDS`) for `model`."""

    if kind == "none":
        return IdentityPrecond(model.n)
    if kind == "diag":
        return DiagPrecond.from_model(model)
    if kind == "fitc":
        return FitcPrecond.from_model(model)
    if kind == "piv-chol":
        p = model.params
        return build_piv_chol(
            model.column, model.diag_nonnugget(), min(rank, model.n), p.sigma2, p.sigma1_2
        )
    raise DomainError(f"unknown preconditioner {kind!r}; choose from {', '.join(PRECOND_KINDS)}")
