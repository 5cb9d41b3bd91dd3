"""Benchmarks: preconditioner iteration counts, likelihood variance, FSA sweeps, Vecchia SLQ."""

from __future__ import annotations

import time
from dataclasses import replace
from typing import Any, Iterable

import numpy as np
import pandas as pd
from loguru import logger

from fsagp.dataset import simulate
from fsagp.fsa import FsaModel, assemble
from fsagp.inducing import InducingSet, select_inducing
from fsagp.kernels import (
    Array,
    CovParams,
    KernelSpec,
    LocationSet,
    TaperSpec,
    gamma_for_n_gamma,
    rho_for_effective_range,
)
from fsagp.krylov import CgConfig, pcg_solve
from fsagp.likelihood import evaluate_exact, evaluate_iterative
from fsagp.precond import make_precond
from fsagp.vecchia import DiagW, build_vecchia, make_vecchia_precond, vecchia_logdet_slq

__all__ = [
    "bench_precond",
    "likelihood_variance",
    "markdown_table",
    "sweep_fsa",
    "vecchia_bench",
]


def markdown_table(frame: pd.DataFrame) -> str:
    """Render `frame` as a GitHub markdown table."""

    def cell(value: Any) -> str:
        if isinstance(value, (float, np.floating)):
            return f"{value:.6g}"
        return str(value)

    header = "| " + " | ".join(str(c) for c in frame.columns) + " |"
    rule = "|" + "|".join("---" for _ in frame.columns) + "|"
    rows = ["| " + " | ".join(cell(v) for v in row) + " |" for row in frame.itertuples(False)]
    return "\n".join([header, rule, *rows])


def _precond_labels(preconds: Iterable[str], ranks: Iterable[int]) -> list[tuple[str, int]]:
    """Expand `piv-chol` into one entry per rank."""

    out = []
    for kind in preconds:
        if kind == "piv-chol":
            out.extend((kind, int(k)) for k in ranks)
        else:
            out.append((kind, 0))
    return out


def _label(kind: str, rank: int) -> str:
    return f"{kind}(k={rank})" if kind == "piv-chol" else kind


def _time_solve(
    model: FsaModel, y: Array, kind: str, rank: int, cfg: CgConfig
) -> dict[str, Any]:
    """Build one preconditioner and solve Σ̃†x = y with it."""

    start = time.perf_counter()
    precond = make_precond(kind, model, rank or 200)
    setup = time.perf_counter() - start
    start = time.perf_counter()
    _, _, report = pcg_solve(model.matvec, precond, y, cfg)
    solve = time.perf_counter() - start
    return {
        "precond": _label(kind, rank),
        "iterations": report.iterations,
        "converged": report.converged,
        "setup_s": setup,
        "solve_s": solve,
    }


def bench_precond(
    ns: Iterable[int],
    ms: Iterable[int],
    n_gammas: Iterable[float],
    effective_ranges: Iterable[float],
    preconds: Iterable[str],
    kernel: KernelSpec,
    sigma2: float = 1.0,
    sigma1_2: float = 1.0,
    piv_chol_ranks: Iterable[int] = (200,),
    cfg: CgConfig | None = None,
    nll_reps: int = 0,
    seed: int = 0,
    workers: int = -1,
) -> tuple[pd.DataFrame, pd.DataFrame | None]:
    """Count PCG iterations for Σ̃†⁻¹y over a grid of (n, m, n_γ, effective range).

    Each cell simulates a field of size n, selects m kmeans++ inducing points and assembles the
    FSA with γ chosen for about n_γ nonzeros per row. With `nll_reps` > 0 the iterative NLL is
    also repeated with different probe seeds for each cell (see `likelihood_variance`), with and
    without FITC preconditioning.
    """

    # pylint: disable=too-many-arguments,too-many-positional-arguments,too-many-locals

    cfg = cfg or CgConfig()
    kinds = _precond_labels(preconds, piv_chol_ranks)
    rows = []
    variance = []
    for n in ns:
        for eff in effective_ranges:
            rho = rho_for_effective_range(kernel, eff)
            data = simulate(n, sigma2, sigma1_2, rho, kernel, seed=seed)
            locs = data.locs(workers)
            params = CovParams(sigma2, sigma1_2, rho)
            for m in ms:
                inducing = select_inducing(locs, min(m, n), "kmeans++", seed)
                for n_gamma in n_gammas:
                    taper = TaperSpec(gamma_for_n_gamma(n, n_gamma))
                    model = assemble(locs, inducing, params, kernel, taper)
                    cell = {
                        "n": n,
                        "m": inducing.m,
                        "n_gamma": model.pattern.n_gamma,
                        "effective_range": eff,
                        "rho": rho,
                    }
                    for kind, rank in kinds:
                        result = _time_solve(model, data.y, kind, rank, cfg)
                        logger.info(
                            "bench {} {}: {} iterations",
                            cell,
                            result["precond"],
                            result["iterations"],
                        )
                        rows.append(cell | result)
                    if nll_reps > 0:
                        frame = likelihood_variance(
                            model, data.y, None, ("none", "fitc"), nll_reps, cfg
                        )
                        for record in frame.to_dict("records"):
                            variance.append(cell | record)
    return pd.DataFrame(rows), (pd.DataFrame(variance) if nll_reps > 0 else None)


def likelihood_variance(
    model: FsaModel,
    y: Array,
    X: Array | None,
    preconds: Iterable[str],
    reps: int,
    cfg: CgConfig | None = None,
) -> pd.DataFrame:
    """Repeat the iterative NLL with `reps` probe seeds and summarize it against Cholesky."""

    # pylint: disable=too-many-arguments,too-many-positional-arguments

    cfg = cfg or CgConfig()
    exact = evaluate_exact(model, y, X, with_grad=False).nll
    rows = []
    for kind in preconds:
        precond = make_precond(kind, model)
        values = np.array(
            [
                evaluate_iterative(
                    model, y, X, precond, replace(cfg, seed=cfg.seed + rep), with_grad=False
                ).nll
                for rep in range(reps)
            ]
        )
        q1, q3 = np.percentile(values, [25, 75])
        rows.append(
            {
                "precond": kind,
                "reps": reps,
                "exact_nll": exact,
                "mean": float(values.mean()),
                "sd": float(values.std(ddof=1)) if reps > 1 else 0.0,
                "iqr": float(q3 - q1),
                "median_rel_err": float(np.median(np.abs(values - exact)) / abs(exact)),
            }
        )
    return pd.DataFrame(rows)


def sweep_fsa(
    locs: LocationSet,
    y: Array,
    X: Array | None,
    params: CovParams,
    kernel: KernelSpec,
    ms: Iterable[int],
    n_gammas: Iterable[float],
    method: str = "kmeans++",
    seed: int = 0,
) -> pd.DataFrame:
    """Exact NLL over a grid of inducing-point counts m and taper sizes n_γ."""

    # pylint: disable=too-many-arguments,too-many-positional-arguments

    rows = []
    for m in ms:
        inducing = select_inducing(locs, min(m, locs.n), method, seed)
        for n_gamma in n_gammas:
            taper = TaperSpec(gamma_for_n_gamma(locs.n, n_gamma))
            model = assemble(locs, inducing, params, kernel, taper)
            nll = evaluate_exact(model, y, X, with_grad=False).nll
            logger.info("sweep m={} n_gamma={}: nll={:.8g}", inducing.m, n_gamma, nll)
            rows.append(
                {
                    "m": inducing.m,
                    "n_gamma": n_gamma,
                    "gamma": taper.gamma,
                    "n_gamma_actual": model.pattern.n_gamma,
                    "nll": nll,
                }
            )
    return pd.DataFrame(rows)


def vecchia_bench(
    locs: LocationSet,
    y: Array,
    params: CovParams,
    kernel: KernelSpec,
    m_v: int,
    preconds: Iterable[str],
    num_probes: Iterable[int],
    reps: int,
    inducing: InducingSet,
    cfg: CgConfig | None = None,
    seed: int = 0,
) -> pd.DataFrame:
    """Latent Vecchia with Gaussian W = σ⁻²I: PCG iterations and SLQ log-determinant RMSE.

    The reference is log det(Σ_V⁻¹ + W) from a dense factorization of the Vecchia precision.
    """

    # pylint: disable=too-many-arguments,too-many-positional-arguments,too-many-locals

    cfg = cfg or CgConfig()
    model = build_vecchia(locs, params, kernel, m_v, "random", seed)
    w = DiagW.gaussian(locs.n, params.sigma2)
    sign, exact = np.linalg.slogdet(model.to_dense_precision() + np.diag(w.w))
    if sign <= 0:
        logger.warning("dense Vecchia precision is not positive definite")

    def op(x: Array) -> Array:
        return model.cov_matvec(x) + w.apply_inverse(x)

    rows = []
    for kind in preconds:
        start = time.perf_counter()
        precond = make_vecchia_precond(kind, model, w, inducing, m_v, seed)
        setup = time.perf_counter() - start
        _, _, report = pcg_solve(op, precond, model.cov_matvec(w.apply(y)), cfg)
        for ell in num_probes:
            estimates = np.array(
                [
                    vecchia_logdet_slq(
                        model, w, precond, replace(cfg, num_probes=ell, seed=cfg.seed + rep)
                    )
                    for rep in range(reps)
                ]
            )
            err = estimates - exact
            rows.append(
                {
                    "precond": kind,
                    "num_probes": ell,
                    "iterations": report.iterations,
                    "exact_logdet": float(exact),
                    "bias": float(err.mean()),
                    "rmse": float(np.sqrt(np.mean(err**2))),
                    "setup_s": setup,
                }
            )
            logger.info("vecchia {} l={}: rmse={:.4g}", kind, ell, rows[-1]["rmse"])
    return pd.DataFrame(rows)
