"""Maximum-likelihood estimation of (σ², σ₁², ρ) with profiled β, and predictive scores."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Literal

import numpy as np
from loguru import logger
from scipy import optimize, stats

from fsagp.errors import DomainError, FitError, FsaError
from fsagp.fsa import assemble, fisher_exact, fisher_ste
from fsagp.inducing import InducingSet
from fsagp.kernels import (
    PARAM_NAMES,
    Array,
    CovParams,
    KernelSpec,
    LocationSet,
    TaperSpec,
    taper_pattern,
)
from fsagp.krylov import CgConfig, CvMode, pcg_solve_multi
from fsagp.likelihood import Backend, Evaluation, evaluate, gls_beta
from fsagp.precond import make_precond

__all__ = [
    "FitConfig",
    "FitResult",
    "fit",
    "initial_params",
    "profile_beta",
    "score",
]

# Consecutive failed objective evaluations tolerated before giving up.
MAX_FAILURES = 10


@dataclass(frozen=True)
class FitConfig:
    """Backend, optimizer settings, parameter transform and solver settings of a fit."""

    # pylint: disable=too-many-instance-attributes

    backend: Backend = "cholesky"
    optimizer: Literal["lbfgs", "fisher"] = "lbfgs"
    max_evals: int = 200
    gtol: float = 1e-3
    memory: int = 10
    log_params: tuple[bool, bool, bool] = (True, True, True)
    cg: CgConfig = field(default_factory=CgConfig)
    precond: str = "fitc"
    piv_chol_rank: int = 200
    cv: CvMode = "none"

    def __post_init__(self) -> None:
        """Validate tolerances and caps."""

        if not self.gtol > 0:
            raise DomainError(f"gtol must be positive, got {self.gtol!r}")
        if self.max_evals < 1 or self.memory < 1:
            raise DomainError("max_evals and memory must be at least 1")
        if self.backend not in ("cholesky", "iterative"):
            raise DomainError(f"unknown backend {self.backend!r}")
        if self.optimizer not in ("lbfgs", "fisher"):
            raise DomainError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class FitResult:
    """Estimated parameters and optimizer diagnostics."""

    # pylint: disable=too-many-instance-attributes

    params: CovParams
    nll: float
    iterations: int
    n_evals: int
    grad_norm: float
    wall_time: float
    backend: str
    converged: bool
    message: str = ""
    nll_trace: list[float] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        """Return a JSON-friendly mapping."""

        out = asdict(self)
        out["params"] = {
            "sigma2": self.params.sigma2,
            "sigma1_2": self.params.sigma1_2,
            "rho": self.params.rho,
            "beta": [float(b) for b in self.params.beta],
        }
        return out


def profile_beta(solve: Callable[[Array], Array], y: Array, X: Array) -> Array:
    """Return the GLS coefficients (XᵀA⁻¹X)⁻¹XᵀA⁻¹y given a solver for A."""
    return gls_beta(solve(y), solve(X), X)


def initial_params(locs: LocationSet, y: Array, X: Array | None = None) -> CovParams:
    """σ² = σ₁² = var(y − Xβ_OLS)/2 and ρ = a quarter of the bounding-box diagonal."""

    resid = np.asarray(y, dtype=float)
    beta = np.zeros(0)
    if X is not None and X.shape[1]:
        beta = np.linalg.lstsq(X, resid, rcond=None)[0]
        resid = resid - X @ beta
    half = max(float(np.var(resid)), 1e-12) / 2
    diameter = locs.diameter()
    return CovParams(half, half, diameter / 4 if diameter > 0 else 1.0, beta)


class _Objective:
    """NLL/n and its gradient in the transformed parameters, with failure bookkeeping."""

    # pylint: disable=too-many-instance-attributes

    def __init__(  # pylint: disable=too-many-arguments,too-many-positional-arguments
        self,
        locs: LocationSet,
        y: Array,
        X: Array | None,
        inducing: InducingSet,
        kernel: KernelSpec,
        taper: TaperSpec,
        cfg: FitConfig,
    ) -> None:
        self.locs = locs
        self.y = y
        self.X = X
        self.inducing = inducing
        self.kernel = kernel
        self.taper = taper
        self.cfg = cfg
        self.pattern = taper_pattern(locs, taper.gamma)
        self.log_mask = np.asarray(cfg.log_params, dtype=bool)
        self.trace: list[float] = []
        self.failures = 0
        self.last: tuple[float, Array] | None = None
        self.best: tuple[float, CovParams] | None = None

    def theta(self, phi: Array) -> Array:
        """Map optimizer variables to (σ², σ₁², ρ)."""
        return np.where(self.log_mask, np.exp(phi), phi)

    def phi(self, theta: Array) -> Array:
        """Inverse of `theta`."""
        return np.where(self.log_mask, np.log(theta), theta)

    def evaluate(self, phi: Array) -> tuple[Evaluation, CovParams]:
        """Assemble at `phi` and evaluate the likelihood."""

        params = CovParams.from_theta(self.theta(phi))
        model = assemble(self.locs, self.inducing, params, self.kernel, self.taper, self.pattern)
        ev = evaluate(
            model,
            self.y,
            self.X,
            self.cfg.backend,
            self.cfg.precond,
            self.cfg.cg,
            self.cfg.cv,
            piv_chol_rank=self.cfg.piv_chol_rank,
        )
        return ev, params.with_(beta=ev.beta)

    def __call__(self, phi: Array) -> tuple[float, Array]:
        n = self.locs.n
        theta = self.theta(phi)
        try:
            ev, params = self.evaluate(phi)
            if not math.isfinite(ev.nll) or not np.all(np.isfinite(ev.grad)):
                raise FsaError("non-finite objective")
        except FsaError as err:
            self.failures += 1
            logger.warning("objective failed at theta={}: {}", theta, err)
            if self.failures > MAX_FAILURES:
                raise FitError(
                    f"{self.failures} consecutive objective failures; last: {err}", self.trace
                ) from err
            if self.last is None:
                msg = f"objective fails at the initial point: {err}"
                raise FitError(msg, self.trace) from err
            value, grad = self.last
            return abs(value) * 10 + 1e10, grad

        self.failures = 0
        self.trace.append(ev.nll)
        logger.info(
            "eval {}: nll={:.8g} sigma2={:.5g} sigma1_2={:.5g} rho={:.5g}",
            len(self.trace),
            ev.nll,
            *theta,
        )
        grad_phi = np.where(self.log_mask, ev.grad * theta, ev.grad)
        value = ev.nll / n
        self.last = (value, grad_phi / n)
        if self.best is None or ev.nll < self.best[0]:
            self.best = (ev.nll, params)
        return self.last


def _bounds(init: CovParams, locs: LocationSet, log_mask: Array) -> list[tuple[float, float]]:

    scale = max(init.sigma2 + init.sigma1_2, 1e-12)
    diameter = max(locs.diameter(), 1e-12)
    lo = np.array([1e-6 * scale, 1e-6 * scale, 1e-6 * diameter])
    hi = np.array([1e6 * scale, 1e6 * scale, 1e3 * diameter])
    lo = np.where(log_mask, np.log(lo), lo)
    hi = np.where(log_mask, np.log(hi), hi)
    return list(zip(lo.tolist(), hi.tolist()))


def fit(
    locs: LocationSet,
    y: Array,
    X: Array | None,
    inducing: InducingSet,
    kernel: KernelSpec,
    taper: TaperSpec,
    cfg: FitConfig | None = None,
    init: CovParams | None = None,
) -> FitResult:
    """Estimate the covariance parameters by minimizing the profiled NLL."""

    # pylint: disable=too-many-arguments,too-many-positional-arguments,too-many-locals

    cfg = cfg or FitConfig()
    y = np.asarray(y, dtype=float)
    init = init or initial_params(locs, y, X)
    obj = _Objective(locs, y, X, inducing, kernel, taper, cfg)
    start = time.perf_counter()
    phi0 = obj.phi(init.theta)

    if cfg.optimizer == "fisher":
        phi, nit, nfev, converged, message = _fisher_scoring(obj, phi0)
    else:
        res = optimize.minimize(
            obj,
            phi0,
            jac=True,
            method="L-BFGS-B",
            bounds=_bounds(init, locs, obj.log_mask),
            options={"maxfun": cfg.max_evals, "gtol": cfg.gtol, "maxcor": cfg.memory},
        )
        phi, nit, nfev = res.x, int(res.nit), int(res.nfev)
        converged, message = bool(res.success), str(res.message)

    ev, params = obj.evaluate(phi)
    if obj.best is not None and obj.best[0] < ev.nll:
        # The last iterate is not always the best point evaluated.
        ev, params = obj.evaluate(obj.phi(obj.best[1].theta))
    grad_phi = np.where(obj.log_mask, ev.grad * params.theta, ev.grad)
    wall = time.perf_counter() - start
    logger.info("fit finished: nll={:.8g} evals={} converged={}", ev.nll, nfev, converged)
    return FitResult(
        params=params,
        nll=ev.nll,
        iterations=nit,
        n_evals=nfev,
        grad_norm=float(np.max(np.abs(grad_phi)) / locs.n),
        wall_time=wall,
        backend=cfg.backend,
        converged=converged,
        message=message,
        nll_trace=list(obj.trace),
    )


def _fisher_info(obj: _Objective, params: CovParams) -> Array:
    """Fisher information in θ at `params`, exact or by stochastic traces."""

    cfg = obj.cfg
    model = assemble(obj.locs, obj.inducing, params, obj.kernel, obj.taper, obj.pattern)
    if cfg.backend == "cholesky":
        return fisher_exact(model)
    precond = make_precond(cfg.precond, model, cfg.piv_chol_rank)

    def solve(b: Array) -> Array:
        return pcg_solve_multi(model.matvec, precond, b, cfg.cg)[0]

    probes = np.random.default_rng(cfg.cg.seed).standard_normal((model.n, cfg.cg.num_probes))
    return fisher_ste(model, solve, probes)


def _fisher_scoring(obj: _Objective, phi0: Array) -> tuple[Array, int, int, bool, str]:
    """Fisher scoring with step halving in the transformed parameters."""

    cfg = obj.cfg
    phi = phi0.copy()
    value, grad = obj(phi)
    nfev = 1
    for it in range(1, cfg.max_evals + 1):
        if np.max(np.abs(grad)) <= cfg.gtol:
            return phi, it - 1, nfev, True, "gradient tolerance reached"
        theta = obj.theta(phi)
        jac = np.where(obj.log_mask, theta, 1.0)
        info = _fisher_info(obj, CovParams.from_theta(theta)) / obj.locs.n
        info_phi = info * np.outer(jac, jac)
        step = np.linalg.solve(info_phi + 1e-10 * np.eye(len(PARAM_NAMES)), grad)
        for _ in range(12):
            cand = phi - step
            cand_value, cand_grad = obj(cand)
            nfev += 1
            if cand_value <= value:
                break
            step = step / 2
        else:
            return phi, it, nfev, False, "step halving failed"
        phi, value, grad = cand, cand_value, cand_grad
        if nfev >= cfg.max_evals:
            break
    return phi, cfg.max_evals, nfev, False, "evaluation limit reached"


def score(y_true: Array, mean: Array, var: Array) -> dict[str, float]:
    """Return RMSE, log-score and CRPS of Gaussian predictive distributions."""

    y_true = np.asarray(y_true, dtype=float)
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    if not y_true.shape == mean.shape == var.shape:
        raise DomainError("y_true, mean and var must have the same shape")
    if np.any(var <= 0):
        raise DomainError("predictive variances must be positive")
    sd = np.sqrt(var)
    z = (y_true - mean) / sd
    inv_sqrt_pi = 1 / math.sqrt(math.pi)
    crps = sd * (z * (2 * stats.norm.cdf(z) - 1) + 2 * stats.norm.pdf(z) - inv_sqrt_pi)
    return {
        "rmse": float(np.sqrt(np.mean((y_true - mean) ** 2))),
        "log_score": float(-np.mean(stats.norm.logpdf(y_true, mean, sd))),
        "crps": float(np.mean(crps)),
    }
