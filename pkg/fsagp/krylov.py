"""Preconditioned conjugate gradients and the stochastic estimators built on it.

PCG records the Lanczos tridiagonal T̃ of P^{-1/2}AP^{-1/2} from its step lengths, which SLQ
turns into log-determinant estimates. Probe solves are shared between SLQ and the stochastic
trace estimators so a likelihood and its gradient cost one batched PCG run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
from loguru import logger
from scipy.linalg import eigh_tridiagonal

from fsagp.errors import ConvergenceError, DomainError, NumericalError
from fsagp.kernels import Array
from fsagp.precond import IdentityPrecond, Preconditioner

__all__ = [
    "CgConfig",
    "CvMode",
    "LinearOp",
    "ProbeSolves",
    "SolveReport",
    "TridiagMatrix",
    "cv_coefficient",
    "lanczos",
    "make_probes",
    "pcg_solve",
    "pcg_solve_multi",
    "rademacher",
    "slq_logdet",
    "slq_logdet_from",
    "solve_probes",
    "ste_grad_trace",
    "ste_grad_trace_cv",
    "stochastic_diag",
]

# Applies a symmetric operator to a vector or an n×r block.
LinearOp = Callable[[Array], Array]

ProbeDist = Literal["gaussian", "rademacher", "precond-gaussian"]
CvMode = Literal["none", "one", "optimal"]


@dataclass(frozen=True)
class CgConfig:
    """Tolerance δ, iteration cap, probe count ℓ, probe distribution and seed.

    `probe_dist` selects the probe family. `gaussian` draws zᵢ ~ N(0, P) from the
    preconditioner, which is N(0, I) when P is the identity; `precond-gaussian` is an alias that
    names the preconditioned case explicitly. `rademacher` draws ±1 entries and is only valid
    with the identity preconditioner.
    """

    tol: float = 1e-3
    max_iter: int = 1000
    num_probes: int = 50
    probe_dist: ProbeDist = "gaussian"
    seed: int = 0
    require_convergence: bool = False

    def __post_init__(self) -> None:
        """Validate ranges."""

        if not self.tol > 0:
            raise DomainError(f"CG tolerance must be positive, got {self.tol!r}")
        if self.max_iter < 1:
            raise DomainError(f"max_iter must be at least 1, got {self.max_iter!r}")
        if self.num_probes < 1:
            raise DomainError(f"num_probes must be at least 1, got {self.num_probes!r}")
        if self.probe_dist not in ("gaussian", "rademacher", "precond-gaussian"):
            raise DomainError(f"unknown probe distribution {self.probe_dist!r}")


@dataclass(frozen=True)
class TridiagMatrix:
    """Symmetric tridiagonal matrix given by its diagonal and off-diagonal."""

    diag: Array
    offdiag: Array

    @property
    def size(self) -> int:
        """Order k."""
        return int(self.diag.size)

    def eigh(self) -> tuple[Array, Array]:
        """Return eigenvalues and eigenvectors."""

        if self.size == 1:
            return self.diag.copy(), np.ones((1, 1))
        values, vectors = eigh_tridiagonal(self.diag, self.offdiag)
        return np.asarray(values), np.asarray(vectors)

    def logquad(self) -> float:
        """Return e₁ᵀ log(T̃) e₁ = Σⱼ U₁ⱼ² log λⱼ."""

        if self.size == 0:
            return 0.0
        values, vectors = self.eigh()
        if np.any(values <= 0):
            raise NumericalError(
                f"nonpositive Ritz value {values.min():.3g}; operator is not positive definite"
            )
        return float(np.sum(vectors[0] ** 2 * np.log(values)))

    def to_dense(self) -> Array:
        """Return T̃ as a dense matrix."""
        return np.diag(self.diag) + np.diag(self.offdiag, 1) + np.diag(self.offdiag, -1)


@dataclass(frozen=True)
class SolveReport:
    """Outcome of one CG column."""

    iterations: int
    residual: float
    converged: bool


def _tridiag(alphas: list[float], betas: list[float]) -> TridiagMatrix:
    """Build T̃ from CG step lengths α and direction updates β."""

    t = len(alphas)
    a = np.asarray(alphas)
    b = np.asarray(betas[: max(t - 1, 0)])
    diag = 1.0 / a
    if t > 1:
        diag[1:] += b / a[:-1]
    return TridiagMatrix(diag, np.sqrt(b) / a[:-1])


def pcg_solve_multi(
    op: LinearOp,
    precond: Preconditioner,
    b: Array,
    cfg: CgConfig,
) -> tuple[Array, list[TridiagMatrix], list[SolveReport]]:
    """Solve A X = B column by column with PCG, sharing the block matvecs.

    Each column stops once its residual 2-norm falls below `cfg.tol` (absolute). Returns the
    solutions, the tridiagonal matrix of every column and a report per column.
    """

    # pylint: disable=too-many-locals

    squeeze = b.ndim == 1
    rhs = np.array(b[:, None] if squeeze else b, dtype=float)
    n, r = rhs.shape
    x = np.zeros((n, r))
    resid = rhs.copy()
    z = precond.solve(resid)
    h = z.copy()
    rz = np.sum(resid * z, axis=0)
    alphas: list[list[float]] = [[] for _ in range(r)]
    betas: list[list[float]] = [[] for _ in range(r)]
    iters = np.zeros(r, dtype=int)
    norms = np.linalg.norm(resid, axis=0)
    active = norms >= cfg.tol

    for it in range(1, cfg.max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        ah = np.asarray(op(h[:, idx])).reshape(n, idx.size)
        hah = np.sum(h[:, idx] * ah, axis=0)
        if np.any(hah <= 0):
            raise NumericalError(
                f"operator not positive definite: hᵀAh = {hah.min():.3g}",
                iteration=it,
            )
        alpha = rz[idx] / hah
        if np.any(alpha <= 0):
            raise NumericalError("CG step length nonpositive", iteration=it)
        x[:, idx] += alpha * h[:, idx]
        resid[:, idx] -= alpha * ah
        zi = precond.solve(resid[:, idx])
        rz_new = np.sum(resid[:, idx] * zi, axis=0)
        if np.any(rz_new < 0):
            raise NumericalError("preconditioner not positive definite", iteration=it)
        beta = rz_new / rz[idx]
        h[:, idx] = zi + beta * h[:, idx]
        rz[idx] = rz_new
        iters[idx] += 1
        norms[idx] = np.linalg.norm(resid[:, idx], axis=0)
        for k, j in enumerate(idx):
            alphas[j].append(float(alpha[k]))
            betas[j].append(float(beta[k]))
        active[idx] = norms[idx] >= cfg.tol

    reports = [SolveReport(int(iters[j]), float(norms[j]), not active[j]) for j in range(r)]
    tridiags = [_tridiag(alphas[j], betas[j]) for j in range(r)]
    _check_reports(reports, cfg)
    return (x[:, 0] if squeeze else x), tridiags, reports


def _check_reports(reports: list[SolveReport], cfg: CgConfig) -> None:

    failed = [rep for rep in reports if not rep.converged]
    if reports:
        logger.debug(
            "PCG: {} columns, max iterations {}, max residual {:.3g}",
            len(reports),
            max(rep.iterations for rep in reports),
            max(rep.residual for rep in reports),
        )
    if failed:
        msg = f"CG did not converge in {cfg.max_iter} iterations for {len(failed)} column(s)"
        if cfg.require_convergence:
            raise ConvergenceError(msg, failed[0])
        logger.warning(msg)


def pcg_solve(
    op: LinearOp, precond: Preconditioner, b: Array, cfg: CgConfig
) -> tuple[Array, TridiagMatrix, SolveReport]:
    """Solve A x = b by PCG starting from x₀ = 0."""

    if b.ndim != 1:
        raise DomainError("pcg_solve expects a vector; use pcg_solve_multi for blocks")
    x, tridiags, reports = pcg_solve_multi(op, precond, b, cfg)
    return x, tridiags[0], reports[0]


def rademacher(rng: np.random.Generator, shape: tuple[int, ...]) -> Array:
    """Return i.i.d. ±1 entries."""
    return rng.integers(0, 2, size=shape).astype(float) * 2.0 - 1.0


def make_probes(precond: Preconditioner, cfg: CgConfig, seed: int | None = None) -> Array:
    """Return the n×ℓ probe matrix, one stream per probe keyed by (seed, probe index).

    Gaussian probes (`gaussian` and its alias `precond-gaussian`) are drawn from N(0, P), so they
    are standard normal for the identity preconditioner.
    """

    base = cfg.seed if seed is None else seed
    cols = []
    for i in range(cfg.num_probes):
        rng = np.random.default_rng([base, i])
        if cfg.probe_dist == "rademacher":
            if not isinstance(precond, IdentityPrecond):
                raise DomainError("Rademacher probes require the identity preconditioner")
            cols.append(rademacher(rng, (precond.n,)))
        else:
            cols.append(precond.sample(rng))
    return np.column_stack(cols)


@dataclass(frozen=True)
class ProbeSolves:
    """Probe vectors Z with A⁻¹Z and the tridiagonal of every probe solve."""

    probes: Array
    solves: Array
    tridiags: list[TridiagMatrix]
    reports: list[SolveReport] = field(default_factory=list)

    @property
    def num_probes(self) -> int:
        """ℓ."""
        return int(self.probes.shape[1])


def solve_probes(
    op: LinearOp,
    precond: Preconditioner,
    cfg: CgConfig,
    extra: Array | None = None,
    probes: Array | None = None,
) -> tuple[Array | None, ProbeSolves]:
    """Solve for `extra` right-hand sides and the probe vectors in one batched PCG run."""

    z = make_probes(precond, cfg) if probes is None else probes
    k = 0 if extra is None else (1 if extra.ndim == 1 else extra.shape[1])
    blocks = [z] if extra is None else [extra.reshape(z.shape[0], k), z]
    x, tridiags, reports = pcg_solve_multi(op, precond, np.hstack(blocks), cfg)
    extra_x = None
    if extra is not None:
        extra_x = x[:, 0] if extra.ndim == 1 else x[:, :k]
    return extra_x, ProbeSolves(z, x[:, k:], tridiags[k:], reports)


def slq_logdet_from(solves: ProbeSolves, precond: Preconditioner) -> float:
    """Return (n/ℓ) Σᵢ e₁ᵀ log(T̃ᵢ) e₁ + log det P from finished probe solves."""

    n = solves.probes.shape[0]
    quad = sum(t.logquad() for t in solves.tridiags)
    return n / solves.num_probes * quad + precond.logdet()


def slq_logdet(op: LinearOp, precond: Preconditioner, cfg: CgConfig) -> float:
    """Estimate log det A by stochastic Lanczos quadrature."""

    _, solves = solve_probes(op, precond, cfg)
    return slq_logdet_from(solves, precond)


def _check_probes(ainv_z: Array, probes: Array) -> None:

    if ainv_z.shape != probes.shape:
        raise DomainError(f"probe solves {ainv_z.shape} do not match probes {probes.shape}")


def ste_grad_trace(
    ainv_z: Array, d_matvec: LinearOp, precond: Preconditioner, probes: Array
) -> float:
    """Estimate Tr(A⁻¹∂A/∂θ) as (1/ℓ) Σᵢ (zᵢᵀA⁻¹)(∂A/∂θ P⁻¹zᵢ) with zᵢ ~ N(0, P)."""

    _check_probes(ainv_z, probes)
    samples = np.sum(ainv_z * d_matvec(precond.solve(probes)), axis=0)
    return float(np.mean(samples))


def cv_coefficient(target: Array, control: Array, axis: int = -1) -> Array:
    """Return the least-squares control-variate coefficient Σ(t−t̄)(c−c̄)/Σ(c−c̄)².

    Entries with a vanishing denominator fall back to 1.
    """

    tc = target - target.mean(axis=axis, keepdims=True)
    cc = control - control.mean(axis=axis, keepdims=True)
    num = np.sum(tc * cc, axis=axis)
    den = np.sum(cc * cc, axis=axis)
    zero = den <= 1e-300
    if np.any(zero):
        logger.warning(
            "control variate has zero spread for {} entr(ies); using c = 1", int(zero.sum())
        )
    return np.where(zero, 1.0, num / np.where(zero, 1.0, den))


def ste_grad_trace_cv(
    ainv_z: Array,
    d_matvec: LinearOp,
    precond: Preconditioner,
    probes: Array,
    wrt: str,
    c_mode: CvMode = "optimal",
) -> float:
    """Stochastic trace with the preconditioner as control variate.

    The control samples (P⁻¹zᵢ)ᵀ ∂P/∂θ (P⁻¹zᵢ) have the known mean Tr(P⁻¹∂P/∂θ).
    """

    _check_probes(ainv_z, probes)
    pinv_z = precond.solve(probes)
    target = np.sum(ainv_z * d_matvec(pinv_z), axis=0)
    if c_mode == "none":
        return float(np.mean(target))
    control = np.sum(pinv_z * precond.derivative_matvec(wrt, pinv_z), axis=0)
    if c_mode == "one":
        c = 1.0
    elif c_mode == "optimal":
        c = float(cv_coefficient(target, control))
    else:
        raise DomainError(f"unknown control-variate mode {c_mode!r}")
    exact = precond.grad_logdet_trace(wrt)
    return float(np.mean(target) - c * (np.mean(control) - exact))


def stochastic_diag(
    op: LinearOp,
    nrows: int,
    num_probes: int,
    seed: int = 0,
    probes: Array | None = None,
) -> Array:
    """Estimate diag(op) as (1/ℓ) Σᵢ zᵢ ∘ (op zᵢ) with Rademacher zᵢ."""

    if probes is None:
        probes = np.column_stack(
            [rademacher(np.random.default_rng([seed, i]), (nrows,)) for i in range(num_probes)]
        )
    return np.asarray(np.mean(probes * op(probes), axis=1))


def lanczos(
    op: LinearOp, init: Array, k: int, reorth: bool = True
) -> tuple[Array, TridiagMatrix]:
    """Run `k` Lanczos steps from `init`; return Q (n×k) and T̃ with AQ ≈ QT̃.

    Stops early on breakdown (an invariant subspace was found).
    """

    if k < 1:
        raise DomainError(f"Lanczos needs k >= 1, got {k}")
    norm = float(np.linalg.norm(init))
    if norm == 0:
        raise DomainError("Lanczos start vector must be nonzero")
    q = [np.asarray(init, dtype=float) / norm]
    alphas: list[float] = []
    betas: list[float] = []
    for j in range(k):
        w = np.asarray(op(q[j]), dtype=float)
        scale = float(np.linalg.norm(w))
        a = float(q[j] @ w)
        w -= a * q[j]
        if j:
            w -= betas[-1] * q[j - 1]
        if reorth:
            basis = np.column_stack(q)
            for _ in range(2):
                w -= basis @ (basis.T @ w)
        alphas.append(a)
        if j == k - 1:
            break
        b = float(np.linalg.norm(w))
        if b <= 1e-12 * max(scale, math.ulp(1.0)):
            logger.debug("Lanczos breakdown after {} steps", j + 1)
            break
        betas.append(b)
        q.append(w / b)
    return np.column_stack(q), TridiagMatrix(np.asarray(alphas), np.asarray(betas))
