import math

import numpy as np
import pytest

from fsagp.errors import DomainError, FsaError
from fsagp.fsa import (
    FsaModel,
    WoodburyFactors,
    assemble,
    fisher_exact,
    fisher_ste,
    grad_exact,
    logdet_sylvester,
    nll_exact,
    solve_woodbury,
)
from fsagp.inducing import select_random
from fsagp.kernels import PARAM_NAMES, CovParams, KernelSpec, LocationSet, TaperSpec
from fsagp.krylov import rademacher
from tests.oracles import dense_fsa, dense_nll, make_model, sample_response


@pytest.fixture(name="model")
def fixture_model() -> FsaModel:
    return make_model()


def test_assembly_matches_dense_oracle(model: FsaModel) -> None:
    assert np.allclose(model.to_dense(), dense_fsa(model), atol=1e-8)


def test_matvec_vector_and_block(model: FsaModel) -> None:
    rng = np.random.default_rng(0)
    dense = dense_fsa(model)
    x = rng.standard_normal(model.n)
    block = rng.standard_normal((model.n, 3))
    assert np.allclose(model.matvec(x), dense @ x, atol=1e-8)
    assert np.allclose(model.matvec(block), dense @ block, atol=1e-8)
    with pytest.raises(DomainError):
        model.matvec(np.ones(model.n + 1))


def test_sparse_part_symmetric_with_nugget(model: FsaModel) -> None:
    s = model.sigma_s
    assert abs(s - s.T).max() < 1e-12
    assert np.all(model.diag_s >= model.params.sigma2 - 1e-12)


def test_column_access(model: FsaModel) -> None:
    dense = dense_fsa(model) - model.params.sigma2 * np.eye(model.n)
    for j in (0, 7, model.n - 1):
        assert np.allclose(model.column(j), dense[:, j], atol=1e-8)
    assert np.allclose(model.diag_nonnugget(), np.diag(dense), atol=1e-8)


def test_reused_pattern(model: FsaModel) -> None:
    other = assemble(
        model.locs,
        model.inducing,
        model.params.with_(rho=0.2),
        model.kernel,
        model.taper,
        model.pattern,
    )
    assert np.allclose(other.to_dense(), dense_fsa(other), atol=1e-8)


@pytest.mark.parametrize("seed", range(10))
def test_woodbury_and_sylvester_match_dense(seed: int) -> None:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(50, 301))
    m = int(rng.integers(5, 31))
    gamma = float(rng.uniform(0.05, 0.3))
    params = CovParams(float(rng.uniform(0.05, 1)), 1.0, float(rng.uniform(0.05, 0.3)))
    model = make_model(n, m, gamma, seed, params)
    dense = dense_fsa(model)
    b = rng.standard_normal(n)
    assert np.allclose(solve_woodbury(model, b), np.linalg.solve(dense, b), rtol=1e-8, atol=1e-8)
    assert logdet_sylvester(model) == pytest.approx(np.linalg.slogdet(dense)[1], rel=1e-8)


def test_diagonal_sparse_part_is_fitc() -> None:
    model = make_model(gamma=1e-9)
    assert model.pattern.nnz == model.n
    assert model.exact.chol_s is None
    dense = dense_fsa(model)
    b = np.ones(model.n)
    assert np.allclose(solve_woodbury(model, b), np.linalg.solve(dense, b), atol=1e-8)


def test_nll_matches_dense(model: FsaModel) -> None:
    y = sample_response(model)
    assert nll_exact(model, y) == pytest.approx(dense_nll(dense_fsa(model), y), rel=1e-9)


def test_nll_with_covariates(model: FsaModel) -> None:
    y = sample_response(model)
    X = np.column_stack([np.ones(model.n), model.locs.coords[:, 0]])
    beta = np.array([0.5, -1.0])
    fitted = assemble(
        model.locs,
        model.inducing,
        model.params.with_(beta=beta),
        model.kernel,
        model.taper,
        model.pattern,
    )
    expected = dense_nll(dense_fsa(model), y - X @ beta)
    assert nll_exact(fitted, y, X) == pytest.approx(expected, rel=1e-9)
    with pytest.raises(DomainError):
        nll_exact(model, y, X)


def test_single_observation() -> None:
    model = make_model(n=1, m=1, params=CovParams(0.5, 2.0, 0.1))
    y = np.array([1.3])
    var = model.to_dense()[0, 0]
    assert var == pytest.approx(2.5, rel=1e-8)
    expected = 0.5 * (math.log(2 * math.pi * 2.5) + 1.3**2 / 2.5)
    assert nll_exact(model, y) == pytest.approx(expected, rel=1e-8)


def test_gradient_matches_finite_differences() -> None:
    model = make_model(n=200, m=20, gamma=0.15)
    y = sample_response(model, seed=3)
    grad = grad_exact(model, y)
    theta = model.params.theta
    for k in range(len(PARAM_NAMES)):
        h = 1e-5 * theta[k]
        values = []
        for sign in (1, -1):
            t = theta.copy()
            t[k] += sign * h
            moved = assemble(
                model.locs,
                model.inducing,
                CovParams.from_theta(t),
                model.kernel,
                model.taper,
                model.pattern,
            )
            values.append(nll_exact(moved, y))
        fd = (values[0] - values[1]) / (2 * h)
        assert grad[k] == pytest.approx(fd, rel=1e-5, abs=1e-6)


def test_derivatives_match_dense_finite_differences(model: FsaModel) -> None:
    theta = model.params.theta
    derivs = model.derivatives
    for k, wrt in enumerate(PARAM_NAMES):
        h = 1e-6 * theta[k]
        mats = []
        for sign in (1, -1):
            t = theta.copy()
            t[k] += sign * h
            moved = assemble(
                model.locs,
                model.inducing,
                CovParams.from_theta(t),
                model.kernel,
                model.taper,
                model.pattern,
            )
            mats.append(moved.to_dense())
        fd = (mats[0] - mats[1]) / (2 * h)
        assert np.allclose(derivs.dense(wrt), fd, atol=1e-5)


def test_unknown_derivative(model: FsaModel) -> None:
    with pytest.raises(DomainError):
        model.derivatives.matvec("nu", np.ones(model.n))


def test_fisher_ste_is_unbiased() -> None:
    model = make_model(n=120, m=10)
    exact = fisher_exact(model)
    assert np.allclose(exact, exact.T)
    assert np.all(np.linalg.eigvalsh(exact) > 0)
    probes = np.random.default_rng(0).standard_normal((model.n, 4000))
    estimate = fisher_ste(model, model.exact.solve, probes)
    assert np.allclose(estimate, exact, rtol=0.1, atol=0.05 * np.abs(exact).max())


def test_exact_path_size_cap() -> None:
    model = make_model(n=60, m=5)
    capped = assemble(
        model.locs,
        model.inducing,
        model.params,
        model.kernel,
        TaperSpec(0.2),
        exact_max_n=50,
    )
    with pytest.raises(FsaError):
        nll_exact(capped, np.zeros(60))


def test_diagonal_taper_gradient_above_cap_without_dense_inverse(
    monkeypatch: pytest.MonkeyPatch,
) -> None:
    model = make_model(n=300, m=10, gamma=1e-9)
    assert model.pattern.nnz == model.n
    capped = assemble(
        model.locs, model.inducing, model.params, model.kernel, model.taper, exact_max_n=100
    )
    y = sample_response(model)

    cov = dense_fsa(model)
    u = np.linalg.solve(cov, y)
    expected = []
    for wrt in PARAM_NAMES:
        d = model.derivatives.dense(wrt)
        expected.append(0.5 * np.trace(np.linalg.solve(cov, d)) - 0.5 * u @ d @ u)

    def refuse(_self: object) -> None:
        raise AssertionError("dense inverse formed")

    monkeypatch.setattr(WoodburyFactors, "inverse", refuse)
    assert np.allclose(grad_exact(capped, y), expected, rtol=1e-7, atol=1e-9)
    with pytest.raises(FsaError):
        fisher_exact(capped)


def test_fisher_ste_on_scaled_identity() -> None:
    # Grid spacing 0.1 against ρ = 1e-3: every off-diagonal covariance underflows to 0.
    grid = np.stack(np.meshgrid(np.arange(10) / 10, np.arange(10) / 10), -1).reshape(-1, 2)
    locs = LocationSet(grid)
    params = CovParams(0.4, 1.1, 1e-3)
    inducing = select_random(locs, 5, seed=0)
    model = assemble(locs, inducing, params, KernelSpec(1.5), TaperSpec(1e-9))
    c = params.sigma2 + params.sigma1_2
    assert np.allclose(model.to_dense(), c * np.eye(model.n), atol=1e-12)

    probes = rademacher(np.random.default_rng(0), (model.n, 7))
    estimate = fisher_ste(model, lambda b: b / c, probes)
    half = 0.5 * model.n / c**2
    expected = np.array([[half, half, 0.0], [half, half, 0.0], [0.0, 0.0, 0.0]])
    assert np.allclose(estimate, expected, rtol=1e-8, atol=1e-8)
    assert np.allclose(fisher_exact(model), expected, rtol=1e-8, atol=1e-8)


def test_m_larger_than_n_rejected(model: FsaModel) -> None:
    small = model.locs.subset(np.arange(5))
    with pytest.raises(DomainError):
        assemble(small, model.inducing, model.params, model.kernel, model.taper)
