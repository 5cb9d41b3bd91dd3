"""Predictive means and variances under the FSA.

With C = Σ_mnᵀΣ_m⁻¹Σ_mn_p + Σˢ the FSA cross-covariance, the predictive variance is
σ₁² + σ² − diag(CᵀΣ̃†⁻¹C). Three ways to get the diagonal are offered: exact (dense Cholesky
factors), simulation (PCG for the deterministic low-rank terms, Rademacher probes for the
sparse term) and Lanczos (a rank-k plug-in for Σ̃_s⁻¹).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from loguru import logger
from scipy import linalg, sparse

from fsagp.errors import DomainError, FactorizationError
from fsagp.fsa import FsaModel, pairwise_dot
from fsagp.kernels import (
    Array,
    LocationSet,
    TaperPattern,
    cross_cov,
    cross_taper_pattern,
    kernel_eval,
)
from fsagp.krylov import (
    CgConfig,
    CvMode,
    cv_coefficient,
    lanczos,
    pcg_solve,
    pcg_solve_multi,
    rademacher,
)
from fsagp.precond import DiagPrecond, Preconditioner, make_precond

__all__ = [
    "PredictionInputs",
    "PredictiveOutput",
    "VarMethod",
    "predict",
    "predict_mean",
    "predict_var_exact",
    "predict_var_lanczos",
    "predict_var_sim",
    "prediction_inputs",
]

VarMethod = Literal["exact", "sim", "lanczos"]

# Floor for stochastic variance estimates, relative to σ².
VAR_FLOOR = 1e-6


@dataclass(frozen=True)
class PredictionInputs:
    """Cross pieces between the training and the n_p prediction locations."""

    locs_p: LocationSet
    x_p: Array | None
    sigma_mn_p: Array  # m×n_p
    g: Array  # Σ_m⁻¹Σ_mn_p
    cross_s: sparse.csr_matrix  # Σˢ_{nn_p}, n×n_p
    pattern: TaperPattern

    @property
    def n_p(self) -> int:
        """Number of prediction locations."""
        return self.locs_p.n

    @property
    def n_gamma_p(self) -> float:
        """Average number of nonzeros per column of Σˢ_{nn_p}."""
        return self.pattern.n_gamma_cols

    def cross_lowrank(self, model: FsaModel) -> Array:
        """Return the dense low-rank cross-covariance Σ_mnᵀΣ_m⁻¹Σ_mn_p (n×n_p)."""
        return np.asarray(model.sigma_mn.T @ self.g)


@dataclass(frozen=True)
class PredictiveOutput:
    """Predictive means and variances."""

    mean: Array
    var: Array
    method: str
    num_probes: int = 0
    clamped: int = 0


def prediction_inputs(
    model: FsaModel, locs_p: LocationSet, x_p: Array | None = None
) -> PredictionInputs:
    """Assemble Σ_mn_p, Σ_m⁻¹Σ_mn_p and the tapered residual cross-covariance."""

    if locs_p.d != model.locs.d:
        raise DomainError(
            f"prediction locations have dimension {locs_p.d}, expected {model.locs.d}"
        )
    if x_p is not None and x_p.shape[0] != locs_p.n:
        raise DomainError(f"X_p has {x_p.shape[0]} rows for {locs_p.n} prediction locations")
    sigma_mn_p = cross_cov(model.inducing.locs, locs_p, model.kernel, model.params)
    v_p = np.asarray(linalg.solve_triangular(model.chol_m, sigma_mn_p, lower=True))
    g = np.asarray(linalg.solve_triangular(model.chol_m, v_p, lower=True, trans="T"))

    pattern = cross_taper_pattern(model.locs, locs_p, model.taper.gamma)
    values = np.asarray(kernel_eval(model.kernel, model.params, pattern.dists))
    values -= pairwise_dot(model.v, v_p, pattern.rows, pattern.cols)
    values *= pattern.taper(model.taper)
    return PredictionInputs(locs_p, x_p, sigma_mn_p, g, pattern.to_sparse(values), pattern)


def _mean_part(inputs: PredictionInputs, model: FsaModel) -> Array:

    beta = model.params.beta
    if inputs.x_p is None or beta.size == 0:
        return np.zeros(inputs.n_p)
    return np.asarray(inputs.x_p @ beta)


def predict_mean(
    model: FsaModel,
    inputs: PredictionInputs,
    y: Array,
    X: Array | None = None,
    precond: Preconditioner | None = None,
    cfg: CgConfig | None = None,
) -> Array:
    """Return X_pβ + CᵀΣ̃†⁻¹(y − Xβ).

    Uses the Cholesky path unless a preconditioner is given, in which case the solve runs by PCG.
    """

    # pylint: disable=too-many-arguments,too-many-positional-arguments

    r = np.asarray(y, dtype=float)
    if X is not None and model.params.beta.size:
        r = r - X @ model.params.beta
    if precond is None:
        u = model.exact.solve(r)
    else:
        u, _, _ = pcg_solve(model.matvec, precond, r, cfg or CgConfig())
    lowrank = inputs.g.T @ (model.sigma_mn @ u)
    return np.asarray(_mean_part(inputs, model) + lowrank + inputs.cross_s.T @ u)


def _finish(model: FsaModel, diag_term: Array) -> tuple[Array, int]:
    """Return σ₁² + σ² − `diag_term`, clamped at σ²·VAR_FLOOR."""

    p = model.params
    var = p.sigma1_2 + p.sigma2 - diag_term
    floor = p.sigma2 * VAR_FLOOR
    low = var < floor
    clamped = int(low.sum())
    if clamped:
        logger.warning("clamped {} negative or tiny predictive variance(s)", clamped)
        var = np.where(low, floor, var)
    return var, clamped


def predict_var_exact(model: FsaModel, inputs: PredictionInputs) -> Array:
    """Return diag of the predictive covariance with dense factors of Σ̃_s and M."""

    ex = model.exact
    k = model.sigma_mn
    g = inputs.g
    s = inputs.cross_s
    y_s = ex.solve_s(s.toarray())  # Σ̃_s⁻¹Σˢ
    q = k @ ex.w  # Σ_mnΣ̃_s⁻¹Σ_mnᵀ
    ky = k @ y_s
    h = q @ g + ky  # Σ_mnΣ̃_s⁻¹C
    diag_s = np.sum(g * (q @ g), axis=0) + 2.0 * np.sum(g * ky, axis=0)
    diag_s += np.asarray(s.multiply(y_s).sum(axis=0)).ravel()
    diag = diag_s - np.sum(h * ex.solve_core(h), axis=0)
    var, _ = _finish(model, diag)
    return var


@dataclass(frozen=True)
class _LowRankTerms:
    """Deterministic pieces shared by the simulation and Lanczos variances."""

    d1: Array
    d2: Array
    d3: Array


def _lowrank_terms(
    model: FsaModel, inputs: PredictionInputs, precond: Preconditioner, cfg: CgConfig
) -> _LowRankTerms:
    """Return D₁ = diag(GᵀKΣ̃†⁻¹KᵀG), D₂ = diag(GᵀKΣ̃†⁻¹Σˢ), D₃ = diag(HᵀM⁻¹H), H = KΣ̃_s⁻¹Σˢ."""

    k = model.sigma_mn
    g = inputs.g
    s = inputs.cross_s
    ainv_kt, _, _ = pcg_solve_multi(model.matvec, precond, k.T, cfg)
    d1 = np.sum(g * ((k @ ainv_kt) @ g), axis=0)
    d2 = np.sum(g * np.asarray((s.T @ ainv_kt).T), axis=0)

    w, _, _ = pcg_solve_multi(lambda x: model.sigma_s @ x, DiagPrecond(model.diag_s), k.T, cfg)
    core = model.sigma_m + k @ w
    core = 0.5 * (core + core.T)
    try:
        chol = linalg.cholesky(core, lower=True)
    except linalg.LinAlgError as err:
        raise FactorizationError("woodbury", str(err)) from err
    h = np.asarray((s.T @ w).T)
    d3 = np.sum(h * linalg.cho_solve((chol, True), h), axis=0)
    return _LowRankTerms(d1, d2, d3)


def predict_var_sim(
    model: FsaModel,
    inputs: PredictionInputs,
    num_probes: int,
    cfg: CgConfig,
    cv: bool = False,
    precond: Preconditioner | None = None,
) -> PredictiveOutput:
    """Simulation-based predictive variances.

    The sparse term D_ℓ ≈ diag(ΣˢᵀΣ̃_s⁻¹Σˢ) is estimated from Rademacher probes; with `cv` the
    diagonal preconditioner of Σ̃_s serves as an elementwise control variate.
    """

    # pylint: disable=too-many-arguments,too-many-positional-arguments,too-many-locals

    if num_probes < 1:
        raise DomainError(f"num_probes must be at least 1, got {num_probes}")
    precond = precond or make_precond("fitc", model)
    terms = _lowrank_terms(model, inputs, precond, cfg)

    s = inputs.cross_s
    n_p = inputs.n_p
    d_ell = np.zeros(n_p)
    if s.nnz:
        z = np.column_stack(
            [rademacher(np.random.default_rng([cfg.seed, i]), (n_p,)) for i in range(num_probes)]
        )
        sz = np.asarray(s @ z)
        pinv_sz, _, _ = pcg_solve_multi(
            lambda x: model.sigma_s @ x, DiagPrecond(model.diag_s), sz, cfg
        )
        target = z * np.asarray(s.T @ pinv_sz)
        d_ell = target.mean(axis=1)
        if cv:
            dinv = 1.0 / model.diag_s
            control = z * np.asarray(s.T @ (sz * dinv[:, None]))
            exact = np.asarray(s.multiply(s).T @ dinv).ravel()
            c = cv_coefficient(target, control, axis=1)
            d_ell = d_ell - c * (control.mean(axis=1) - exact)

    var, clamped = _finish(model, terms.d1 + 2.0 * terms.d2 - terms.d3 + d_ell)
    return PredictiveOutput(np.zeros(n_p), var, "sim", num_probes, clamped)


def predict_var_lanczos(
    model: FsaModel,
    inputs: PredictionInputs,
    k: int,
    cfg: CgConfig,
    precond: Preconditioner | None = None,
) -> PredictiveOutput:
    """Predictive variances with D_ℓ ≈ diag(ΣˢᵀQT̃⁻¹QᵀΣˢ) from k Lanczos steps on Σ̃_s."""

    if k < 0 or k > model.n:
        raise DomainError(f"Lanczos rank must satisfy 0 <= k <= n={model.n}, got {k}")
    precond = precond or make_precond("fitc", model)
    terms = _lowrank_terms(model, inputs, precond, cfg)

    d_ell = np.zeros(inputs.n_p)
    s = inputs.cross_s
    if k and s.nnz:
        init = np.random.default_rng(cfg.seed).standard_normal(model.n)
        q, tri = lanczos(lambda x: model.sigma_s @ x, init, k, reorth=True)
        qs = np.asarray((s.T @ q).T)  # QᵀΣˢ
        d_ell = np.sum(qs * linalg.solve(tri.to_dense(), qs, assume_a="pos"), axis=0)

    var, clamped = _finish(model, terms.d1 + 2.0 * terms.d2 - terms.d3 + d_ell)
    return PredictiveOutput(np.zeros(inputs.n_p), var, "lanczos", k, clamped)


def predict(
    model: FsaModel,
    inputs: PredictionInputs,
    y: Array,
    X: Array | None = None,
    method: VarMethod = "exact",
    backend: str = "cholesky",
    precond_kind: str = "fitc",
    cfg: CgConfig | None = None,
    cv: CvMode | bool = False,
    lanczos_rank: int = 50,
) -> PredictiveOutput:
    """Predictive means and variances with the chosen backend and variance method."""

    # pylint: disable=too-many-arguments,too-many-positional-arguments

    cfg = cfg or CgConfig()
    precond = None if backend == "cholesky" else make_precond(precond_kind, model)
    mean = predict_mean(model, inputs, y, X, precond, cfg)
    if method == "exact":
        return PredictiveOutput(mean, predict_var_exact(model, inputs), "exact")
    use_cv = cv not in (False, "none")
    if method == "sim":
        out = predict_var_sim(model, inputs, cfg.num_probes, cfg, use_cv, precond)
    elif method == "lanczos":
        out = predict_var_lanczos(model, inputs, lanczos_rank, cfg, precond)
    else:
        raise DomainError(f"unknown variance method {method!r}")
    return PredictiveOutput(mean, out.var, out.method, out.num_probes, out.clamped)
