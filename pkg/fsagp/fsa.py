"""Full-scale approximation: Σ̃† = Σ_mnᵀΣ_m⁻¹Σ_mn + Σ̃_s, with its exact Cholesky/Woodbury path.

Σ̃_s = (Σ − Σ_mnᵀΣ_m⁻¹Σ_mn)∘T(γ) + σ²I is stored as a CSR matrix on the taper pattern, the
low-rank part through V = L_m⁻¹Σ_mn so that Σ_l = VᵀV.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
import numpy.typing as npt
from loguru import logger
from scipy import linalg, sparse
from scipy.spatial.distance import cdist

from fsagp.errors import AssemblyError, DomainError, FactorizationError, FsaError
from fsagp.inducing import InducingSet
from fsagp.kernels import (
    PARAM_NAMES,
    Array,
    CovParams,
    KernelSpec,
    LocationSet,
    TaperPattern,
    TaperSpec,
    cross_cov,
    kernel_eval,
    kernel_grad,
    taper_pattern,
)

__all__ = [
    "EXACT_MAX_N",
    "FsaDerivatives",
    "FsaModel",
    "LowRankTerm",
    "WoodburyFactors",
    "assemble",
    "fisher_exact",
    "fisher_ste",
    "grad_exact",
    "grad_from_solution",
    "logdet_sylvester",
    "matvec",
    "nll_exact",
    "pairwise_dot",
    "residual",
    "solve_woodbury",
]

# Largest n for which the dense Cholesky path is allowed.
EXACT_MAX_N = 20_000

# Relative jitter (times σ₁²) added to the diagonal of Σ_m.
SIGMA_M_JITTER = 1e-10

# (A, G, B) stands for the n×n matrix AᵀGB with A, B m×n and G m×m.
LowRankTerm = tuple[Array, Array, Array]


def pairwise_dot(
    a: Array, b: Array, rows: npt.NDArray[np.intp], cols: npt.NDArray[np.intp]
) -> Array:
    """Return a[:, rows[k]] · b[:, cols[k]] for every k, in chunks of bounded memory."""

    out = np.empty(len(rows))
    chunk = max(1, (1 << 22) // max(1, a.shape[0]))
    for start in range(0, len(rows), chunk):
        sl = slice(start, start + chunk)
        out[sl] = np.einsum("ij,ij->j", a[:, rows[sl]], b[:, cols[sl]])
    return out


def factor_sigma_m(
    inducing: InducingSet, kernel: KernelSpec, params: CovParams
) -> tuple[Array, Array]:
    """Return Σ_m (with jitter) and its lower Cholesky factor."""

    sigma_m = cross_cov(inducing.locs, inducing.locs, kernel, params)
    sigma_m[np.diag_indices_from(sigma_m)] += SIGMA_M_JITTER * params.sigma1_2
    try:
        chol_m = linalg.cholesky(sigma_m, lower=True)
    except linalg.LinAlgError as err:
        raise AssemblyError(f"Sigma_m is singular after jitter: {err}") from err
    return sigma_m, chol_m


@dataclass(frozen=True)
class FsaModel:
    """Assembled FSA state for one parameter vector; immutable."""

    # pylint: disable=too-many-instance-attributes

    locs: LocationSet
    inducing: InducingSet
    params: CovParams
    kernel: KernelSpec
    taper: TaperSpec
    pattern: TaperPattern
    sigma_m: Array
    chol_m: Array
    sigma_mn: Array
    v: Array
    sigma_s: sparse.csr_matrix
    exact_max_n: int = EXACT_MAX_N

    @property
    def n(self) -> int:
        """Number of observations."""
        return self.locs.n

    @property
    def m(self) -> int:
        """Number of inducing points."""
        return self.inducing.m

    @cached_property
    def khat(self) -> Array:
        """Σ_m⁻¹Σ_mn (m×n)."""
        return np.asarray(linalg.solve_triangular(self.chol_m, self.v, lower=True, trans="T"))

    @cached_property
    def diag_s(self) -> Array:
        """diag(Σ̃_s), the FITC diagonal D_s."""
        return np.asarray(self.sigma_s.diagonal())

    def lowrank_matvec(self, x: Array) -> Array:
        """Return Σ_mnᵀΣ_m⁻¹Σ_mn x."""
        return np.asarray(self.v.T @ (self.v @ x))

    def matvec(self, x: Array) -> Array:
        """Return Σ̃† x for a vector or an n×r block."""

        if x.shape[0] != self.n:
            raise DomainError(f"expected leading dimension {self.n}, got {x.shape[0]}")
        return np.asarray(self.sigma_s @ x) + self.lowrank_matvec(x)

    def column(self, j: int) -> Array:
        """Return column `j` of Σ̃† − σ²I."""

        col = self.v.T @ self.v[:, j]
        start, stop = self.sigma_s.indptr[j], self.sigma_s.indptr[j + 1]
        col[self.sigma_s.indices[start:stop]] += self.sigma_s.data[start:stop]
        col[j] -= self.params.sigma2
        return np.asarray(col)

    def diag_nonnugget(self) -> Array:
        """Return diag(Σ̃† − σ²I)."""
        return self.diag_s - self.params.sigma2 + np.sum(self.v * self.v, axis=0)

    def to_dense(self) -> Array:
        """Return Σ̃† as a dense matrix (exact-path sizes only)."""

        self._check_exact_size()
        return np.asarray(self.sigma_s.toarray() + self.v.T @ self.v)

    def _check_exact_size(self) -> None:

        if self.n > self.exact_max_n:
            raise FsaError(
                f"exact path refused for n={self.n} > {self.exact_max_n}; "
                "use the iterative backend"
            )

    @cached_property
    def exact(self) -> WoodburyFactors:
        """Cholesky factors of Σ̃_s and of M = Σ_m + Σ_mnΣ̃_s⁻¹Σ_mnᵀ."""
        return WoodburyFactors.build(self)

    @cached_property
    def derivatives(self) -> FsaDerivatives:
        """Parameter derivatives of Σ̃†."""
        return FsaDerivatives.build(self)


def assemble(
    locs: LocationSet,
    inducing: InducingSet,
    params: CovParams,
    kernel: KernelSpec,
    taper: TaperSpec,
    pattern: TaperPattern | None = None,
    exact_max_n: int = EXACT_MAX_N,
) -> FsaModel:
    """Assemble Σ_m, Σ_mn and the tapered residual Σ̃_s.

    Passing the `pattern` of an earlier model on the same locations and γ skips the neighbor
    search when only the parameters change.
    """

    # pylint: disable=too-many-arguments,too-many-positional-arguments,too-many-locals

    if inducing.m > locs.n:
        raise DomainError(f"m={inducing.m} exceeds n={locs.n}")
    sigma_m, chol_m = factor_sigma_m(inducing, kernel, params)
    sigma_mn = cross_cov(inducing.locs, locs, kernel, params)
    v = np.asarray(linalg.solve_triangular(chol_m, sigma_mn, lower=True))

    if pattern is None:
        pattern = taper_pattern(locs, taper.gamma)
    rows, cols = pattern.rows, pattern.cols
    ondiag = rows == cols
    values = np.asarray(kernel_eval(kernel, params, pattern.dists))
    values -= pairwise_dot(v, v, rows, cols)
    values *= pattern.taper(taper)
    # Roundoff can push the residual variance slightly negative.
    values[ondiag] = np.maximum(values[ondiag], 0.0) + params.sigma2

    logger.debug(
        "assembled FSA: n={} m={} gamma={:.4g} n_gamma={:.2f}",
        locs.n,
        inducing.m,
        taper.gamma,
        pattern.n_gamma,
    )
    return FsaModel(
        locs=locs,
        inducing=inducing,
        params=params,
        kernel=kernel,
        taper=taper,
        pattern=pattern,
        sigma_m=sigma_m,
        chol_m=chol_m,
        sigma_mn=sigma_mn,
        v=v,
        sigma_s=pattern.to_sparse(values),
        exact_max_n=exact_max_n,
    )


def matvec(model: FsaModel, x: Array) -> Array:
    """Return Σ̃† x."""
    return model.matvec(x)


@dataclass(frozen=True)
class WoodburyFactors:
    """Exact-path factorizations."""

    chol_s: Array | None  # dense lower factor of Σ̃_s, or None when Σ̃_s is diagonal
    diag_s: Array
    w: Array  # Σ̃_s⁻¹Σ_mnᵀ, n×m
    chol_woodbury: Array  # lower factor of M
    logdet_s: float

    @classmethod
    def build(cls, model: FsaModel) -> WoodburyFactors:
        """Factor Σ̃_s (diagonal shortcut or dense Cholesky) and M."""

        diag_s = model.diag_s
        chol_s: Array | None = None
        if model.pattern.nnz == model.n:
            if np.any(diag_s <= 0):
                raise FactorizationError("sigma_s", "nonpositive diagonal")
            logdet_s = float(np.sum(np.log(diag_s)))
        else:
            model._check_exact_size()  # pylint: disable=protected-access
            try:
                chol_s = linalg.cholesky(model.sigma_s.toarray(), lower=True)
            except linalg.LinAlgError as err:
                raise FactorizationError("sigma_s", str(err)) from err
            logdet_s = 2.0 * float(np.sum(np.log(np.diag(chol_s))))

        factors = cls(chol_s, diag_s, np.empty((0, 0)), np.empty((0, 0)), logdet_s)
        w = factors.solve_s(model.sigma_mn.T)
        core = model.sigma_m + model.sigma_mn @ w
        core = 0.5 * (core + core.T)
        try:
            chol_woodbury = linalg.cholesky(core, lower=True)
        except linalg.LinAlgError as err:
            raise FactorizationError("woodbury", str(err)) from err
        return cls(chol_s, diag_s, w, chol_woodbury, logdet_s)

    def solve_s(self, b: Array) -> Array:
        """Return Σ̃_s⁻¹ b."""

        if self.chol_s is None:
            return b / (self.diag_s if b.ndim == 1 else self.diag_s[:, None])
        return np.asarray(linalg.cho_solve((self.chol_s, True), b))

    def solve_core(self, b: Array) -> Array:
        """Return M⁻¹ b."""
        return np.asarray(linalg.cho_solve((self.chol_woodbury, True), b))

    def solve(self, b: Array) -> Array:
        """Return Σ̃†⁻¹ b by the Sherman-Woodbury-Morrison formula."""
        return self.solve_s(b) - self.w @ self.solve_core(self.w.T @ b)

    def inverse(self) -> Array:
        """Return Σ̃†⁻¹ densely."""

        n = self.diag_s.size
        return self.solve(np.eye(n))

    def inverse_entries(
        self, rows: npt.NDArray[np.intp], cols: npt.NDArray[np.intp]
    ) -> Array:
        """Return the entries (Σ̃†⁻¹)[rows[k], cols[k]] without forming Σ̃†⁻¹.

        Only the dense-Σ̃_s case materializes Σ̃_s⁻¹, and that case is already capped at
        `exact_max_n` by `build`.
        """

        if self.chol_s is None:
            inv_s = np.where(rows == cols, 1.0 / self.diag_s[rows], 0.0)
        else:
            inv_s = self.solve_s(np.eye(self.diag_s.size))[rows, cols]
        return np.asarray(inv_s - pairwise_dot(self.w.T, self.solve_core(self.w.T), rows, cols))


def solve_woodbury(model: FsaModel, b: Array) -> Array:
    """Return x with Σ̃† x = b on the exact path."""

    if b.shape[0] != model.n:
        raise DomainError(f"expected leading dimension {model.n}, got {b.shape[0]}")
    return model.exact.solve(b)


def logdet_sylvester(model: FsaModel) -> float:
    """Return log det Σ̃† = log det M − log det Σ_m + log det Σ̃_s."""

    ex = model.exact
    logdet_core = 2.0 * float(np.sum(np.log(np.diag(ex.chol_woodbury))))
    logdet_m = 2.0 * float(np.sum(np.log(np.diag(model.chol_m))))
    return logdet_core - logdet_m + ex.logdet_s


def residual(model: FsaModel, y: Array, X: Array | None) -> Array:
    """Return y − Xβ (just y when there are no covariates)."""

    y = np.asarray(y, dtype=float)
    if y.shape != (model.n,):
        raise DomainError(f"response must have length {model.n}, got shape {y.shape}")
    if X is None or X.shape[1] == 0:
        return y
    beta = model.params.beta
    if beta.size != X.shape[1]:
        raise DomainError(f"beta has {beta.size} entries but X has {X.shape[1]} columns")
    return np.asarray(y - X @ beta)


def nll_exact(model: FsaModel, y: Array, X: Array | None = None) -> float:
    """Return the FSA negative log-likelihood on the exact path."""

    r = residual(model, y, X)
    quad = float(r @ solve_woodbury(model, r))
    return 0.5 * (model.n * math.log(2 * math.pi) + logdet_sylvester(model) + quad)


def grad_exact(model: FsaModel, y: Array, X: Array | None = None) -> Array:
    """Return ∂NLL/∂(σ², σ₁², ρ) with exact traces."""

    return grad_from_solution(model, solve_woodbury(model, residual(model, y, X)))


def grad_from_solution(model: FsaModel, u: Array) -> Array:
    """Return the exact NLL gradient given u = Σ̃†⁻¹(y − Xβ)."""

    ex = model.exact
    derivs = model.derivatives
    grad = np.empty(len(PARAM_NAMES))
    for k, wrt in enumerate(PARAM_NAMES):
        trace = derivs.trace_with_solver(ex.inverse_entries, ex.solve, wrt)
        grad[k] = 0.5 * trace - 0.5 * float(u @ derivs.matvec(wrt, u))
    return grad


@dataclass(frozen=True)
class FsaDerivatives:
    """∂Σ̃†/∂θ = ∂Σ̃_s/∂θ + ∂Σ_l/∂θ as sparse parts plus low-rank terms."""

    model: FsaModel
    dsparse: dict[str, sparse.csr_matrix]
    dlowrank: dict[str, list[LowRankTerm]]

    @classmethod
    def build(cls, model: FsaModel) -> FsaDerivatives:
        """Differentiate the assembled pieces."""

        p = model.params
        n = model.n
        pattern = model.pattern
        rows, cols = pattern.rows, pattern.cols

        # σ²: identity.
        eye = sparse.identity(n, format="csr")

        # σ₁²: every covariance block (jitter included) is linear in σ₁².
        ds_sigma1 = (model.sigma_s - p.sigma2 * eye) / p.sigma1_2
        v_scaled = model.v / p.sigma1_2

        # ρ: differentiate Σ_mn and Σ_m, then the tapered residual.
        khat = model.khat
        dist_mn = cdist(model.inducing.coords, model.locs.coords)
        dist_m = cdist(model.inducing.coords, model.inducing.coords)
        dk = np.asarray(kernel_grad(model.kernel, p, dist_mn, "rho"))
        dsm = np.asarray(kernel_grad(model.kernel, p, dist_m, "rho"))
        e = dsm @ khat
        dlow = (
            pairwise_dot(dk, khat, rows, cols)
            + pairwise_dot(khat, dk, rows, cols)
            - pairwise_dot(khat, e, rows, cols)
        )
        dvals = np.asarray(kernel_grad(model.kernel, p, pattern.dists, "rho")) - dlow
        dvals *= pattern.taper(model.taper)
        eye_m = np.eye(model.m)

        return cls(
            model=model,
            dsparse={
                "sigma2": eye,
                "sigma1_2": ds_sigma1,
                "rho": pattern.to_sparse(dvals),
            },
            dlowrank={
                "sigma2": [],
                "sigma1_2": [(v_scaled, eye_m, model.v)],
                "rho": [(dk, eye_m, khat), (khat, eye_m, dk), (khat, -dsm, khat)],
            },
        )

    def _check(self, wrt: str) -> None:

        if wrt not in self.dsparse:
            raise DomainError(f"no derivative with respect to {wrt!r}")

    def matvec(self, wrt: str, x: Array) -> Array:
        """Return (∂Σ̃†/∂θ) x."""

        self._check(wrt)
        out = np.asarray(self.dsparse[wrt] @ x)
        for a, g, b in self.dlowrank[wrt]:
            out += a.T @ (g @ (b @ x))
        return out

    def lowrank_matvec(self, wrt: str, x: Array) -> Array:
        """Return (∂Σ_l/∂θ) x."""

        self._check(wrt)
        out = np.zeros_like(x, dtype=float)
        for a, g, b in self.dlowrank[wrt]:
            out += a.T @ (g @ (b @ x))
        return out

    def diag_sparse(self, wrt: str) -> Array:
        """Return diag(∂Σ̃_s/∂θ)."""

        self._check(wrt)
        return np.asarray(self.dsparse[wrt].diagonal())

    def trace_with_solver(
        self,
        entries: Callable[[npt.NDArray[np.intp], npt.NDArray[np.intp]], Array],
        solve: Callable[[Array], Array],
        wrt: str,
    ) -> float:
        """Return Tr(B⁻¹ ∂Σ̃†/∂θ) from entry access to B⁻¹ and a solver for B.

        `entries` is queried on the sparsity pattern of ∂Σ̃_s/∂θ only, and `solve` on the n×m
        low-rank factors, so no n×n matrix is formed.
        """

        self._check(wrt)
        ds = self.dsparse[wrt].tocoo()
        rows = ds.row.astype(np.intp)
        cols = ds.col.astype(np.intp)
        total = float(np.sum(entries(rows, cols) * ds.data))
        for a, g, b in self.dlowrank[wrt]:
            total += lowrank_trace(a, g, b, solve(a.T))
        return total

    def dense(self, wrt: str) -> Array:
        """Return ∂Σ̃†/∂θ densely."""

        self._check(wrt)
        out = np.asarray(self.dsparse[wrt].toarray())
        for a, g, b in self.dlowrank[wrt]:
            out += a.T @ g @ b
        return out


def lowrank_trace(a: Array, g: Array, b: Array, binv_at: Array) -> float:
    """Return Tr(B⁻¹AᵀGB) given B⁻¹Aᵀ (n×m)."""

    # Tr(B⁻¹AᵀGB) = Tr(G·B·B⁻¹Aᵀ)
    return float(np.sum(g * (b @ binv_at).T))


def fisher_exact(model: FsaModel) -> Array:
    """Return the Fisher information ½Tr(Σ̃†⁻¹∂_kΣ̃†Σ̃†⁻¹∂_lΣ̃†) with dense algebra."""

    model._check_exact_size()  # pylint: disable=protected-access
    ainv = model.exact.inverse()
    prods = [ainv @ model.derivatives.dense(wrt) for wrt in PARAM_NAMES]
    q = len(prods)
    fisher = np.empty((q, q))
    for k in range(q):
        for l in range(k, q):
            fisher[k, l] = fisher[l, k] = 0.5 * float(np.sum(prods[k] * prods[l].T))
    return fisher


def fisher_ste(
    model: FsaModel,
    solve: Callable[[Array], Array],
    probes: Array,
) -> Array:
    """Return the stochastic-trace estimate of the Fisher information.

    Args:
        model:  The assembled model.
        solve:  Applies Σ̃†⁻¹ to an n×r block (Woodbury or conjugate gradients).
        probes: n×ℓ matrix of probe vectors with E[zzᵀ] = I.
    """

    derivs = model.derivatives
    nprobes = probes.shape[1]
    q = len(PARAM_NAMES)
    u = solve(probes)
    left = [derivs.matvec(wrt, u) for wrt in PARAM_NAMES]  # ∂_kΣ̃† Σ̃†⁻¹ z
    right_rhs = np.hstack([derivs.matvec(wrt, probes) for wrt in PARAM_NAMES])
    right_all = solve(right_rhs)
    right = [right_all[:, k * nprobes : (k + 1) * nprobes] for k in range(q)]  # Σ̃†⁻¹∂_lΣ̃† z

    fisher = np.empty((q, q))
    for k in range(q):
        for l in range(q):
            fisher[k, l] = 0.5 * float(np.sum(left[k] * right[l])) / nprobes
    return 0.5 * (fisher + fisher.T)
