"""Negative log-likelihood and gradient of the FSA model with β profiled by GLS."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy import linalg

from fsagp.errors import DomainError, FactorizationError
from fsagp.fsa import FsaModel, grad_from_solution, logdet_sylvester
from fsagp.kernels import PARAM_NAMES, Array
from fsagp.krylov import (
    CgConfig,
    CvMode,
    SolveReport,
    slq_logdet_from,
    solve_probes,
    ste_grad_trace,
    ste_grad_trace_cv,
)
from fsagp.precond import Preconditioner, make_precond

__all__ = [
    "Backend",
    "Evaluation",
    "evaluate",
    "evaluate_exact",
    "evaluate_iterative",
    "gls_beta",
]

Backend = Literal["cholesky", "iterative"]


@dataclass(frozen=True)
class Evaluation:
    """NLL, gradient with respect to (σ², σ₁², ρ), profiled β and the solve reports."""

    nll: float
    grad: Array
    beta: Array
    logdet: float
    quad: float
    reports: list[SolveReport] = field(default_factory=list)

    @property
    def max_iterations(self) -> int:
        """Largest CG iteration count over all columns (0 on the Cholesky path)."""
        return max((rep.iterations for rep in self.reports), default=0)


def gls_beta(ainv_y: Array, ainv_x: Array, X: Array) -> Array:
    """Return β = (XᵀA⁻¹X)⁻¹XᵀA⁻¹y from the solves A⁻¹y and A⁻¹X."""

    gram = X.T @ ainv_x
    gram = 0.5 * (gram + gram.T)
    try:
        factor = linalg.cho_factor(gram, lower=True)
    except linalg.LinAlgError as err:
        raise FactorizationError("gls", "XᵀΣ⁻¹X is rank deficient") from err
    return np.asarray(linalg.cho_solve(factor, X.T @ ainv_y))


def _split(
    y: Array, X: Array | None, ainv_y: Array, ainv_x: Array | None
) -> tuple[Array, Array, Array]:
    """Return (β, residual, A⁻¹residual)."""

    if X is None or X.shape[1] == 0 or ainv_x is None:
        return np.zeros(0), y, ainv_y
    beta = gls_beta(ainv_y, ainv_x, X)
    return beta, y - X @ beta, ainv_y - ainv_x @ beta


def _check(model: FsaModel, y: Array, X: Array | None) -> tuple[Array, Array | None]:

    y = np.asarray(y, dtype=float)
    if y.shape != (model.n,):
        raise DomainError(f"response must have length {model.n}, got shape {y.shape}")
    if X is not None:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[0] != model.n:
            raise DomainError(f"covariates must be {model.n}×p, got shape {X.shape}")
        if X.shape[1] == 0:
            X = None
    return y, X


def evaluate_exact(
    model: FsaModel, y: Array, X: Array | None = None, with_grad: bool = True
) -> Evaluation:
    """NLL and exact gradient through Cholesky, Woodbury and Sylvester."""

    y, X = _check(model, y, X)
    solve = model.exact.solve
    ainv_y = solve(y)
    ainv_x = None if X is None else solve(X)
    beta, r, u = _split(y, X, ainv_y, ainv_x)
    logdet = logdet_sylvester(model)
    quad = float(r @ u)
    nll = 0.5 * (model.n * math.log(2 * math.pi) + logdet + quad)
    grad = grad_from_solution(model, u) if with_grad else np.full(len(PARAM_NAMES), np.nan)
    return Evaluation(nll, grad, beta, logdet, quad)


def evaluate_iterative(
    model: FsaModel,
    y: Array,
    X: Array | None,
    precond: Preconditioner,
    cfg: CgConfig,
    cv: CvMode = "none",
    with_grad: bool = True,
) -> Evaluation:
    """NLL by PCG and SLQ, gradient by stochastic trace estimation.

    One batched PCG run solves for [y, X, z₁ … z_ℓ]; the probe solves feed both the SLQ
    log-determinant and the gradient traces. Probes come from fixed per-probe streams, so
    repeated calls with the same `cfg.seed` use common random numbers.
    """

    y, X = _check(model, y, X)
    extra = y[:, None] if X is None else np.column_stack([y, X])
    sol, solves = solve_probes(model.matvec, precond, cfg, extra=extra)
    assert sol is not None
    ainv_x = None if X is None else sol[:, 1:]
    beta, r, u = _split(y, X, sol[:, 0], ainv_x)
    logdet = slq_logdet_from(solves, precond)
    quad = float(r @ u)
    nll = 0.5 * (model.n * math.log(2 * math.pi) + logdet + quad)

    grad = np.full(len(PARAM_NAMES), np.nan)
    if with_grad:
        derivs = model.derivatives
        for k, wrt in enumerate(PARAM_NAMES):

            def d_matvec(x: Array, wrt: str = wrt) -> Array:
                return derivs.matvec(wrt, x)

            if cv == "none":
                trace = ste_grad_trace(solves.solves, d_matvec, precond, solves.probes)
            else:
                trace = ste_grad_trace_cv(
                    solves.solves, d_matvec, precond, solves.probes, wrt, cv
                )
            grad[k] = 0.5 * trace - 0.5 * float(u @ derivs.matvec(wrt, u))
    return Evaluation(nll, grad, beta, logdet, quad, solves.reports)


def evaluate(
    model: FsaModel,
    y: Array,
    X: Array | None = None,
    backend: Backend = "cholesky",
    precond_kind: str = "fitc",
    cfg: CgConfig | None = None,
    cv: CvMode = "none",
    with_grad: bool = True,
    piv_chol_rank: int = 200,
) -> Evaluation:
    """Dispatch to the Cholesky or the iterative backend."""

    # pylint: disable=too-many-arguments,too-many-positional-arguments

    if backend == "cholesky":
        return evaluate_exact(model, y, X, with_grad)
    if backend == "iterative":
        precond = make_precond(precond_kind, model, piv_chol_rank)
        return evaluate_iterative(model, y, X, precond, cfg or CgConfig(), cv, with_grad)
    raise DomainError(f"unknown backend {backend!r}")
