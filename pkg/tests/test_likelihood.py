import numpy as np
import pytest

from fsagp.errors import DomainError, FactorizationError
from fsagp.fsa import FsaModel, grad_exact, nll_exact
from fsagp.krylov import CgConfig
from fsagp.likelihood import evaluate, evaluate_exact, evaluate_iterative, gls_beta
from fsagp.precond import FitcPrecond, make_precond
from tests.oracles import dense_fsa, dense_nll, make_model, sample_response


@pytest.fixture(name="model")
def fixture_model() -> FsaModel:
    return make_model(n=200, m=20, gamma=0.15)


@pytest.fixture(name="y")
def fixture_y(model: FsaModel) -> np.ndarray:
    return sample_response(model, seed=7)


def test_exact_matches_fsa_functions(model: FsaModel, y: np.ndarray) -> None:
    ev = evaluate_exact(model, y)
    assert ev.nll == pytest.approx(nll_exact(model, y), rel=1e-12)
    assert np.allclose(ev.grad, grad_exact(model, y))
    assert ev.beta.size == 0
    assert ev.max_iterations == 0


def test_gls_beta_against_dense(model: FsaModel, y: np.ndarray) -> None:
    X = np.column_stack([np.ones(model.n), model.locs.coords])
    y = y + X @ np.array([2.0, -1.0, 0.5])
    dense = dense_fsa(model)
    ainv_x = np.linalg.solve(dense, X)
    beta = np.linalg.solve(X.T @ ainv_x, ainv_x.T @ y)
    ev = evaluate_exact(model, y, X)
    assert np.allclose(ev.beta, beta, atol=1e-8)
    assert ev.nll == pytest.approx(dense_nll(dense, y - X @ beta), rel=1e-9)


def test_gls_rank_deficient() -> None:
    X = np.ones((5, 2))
    with pytest.raises(FactorizationError):
        gls_beta(np.ones(5), X, X)


def test_empty_covariates_are_ignored(model: FsaModel, y: np.ndarray) -> None:
    ev = evaluate_exact(model, y, np.zeros((model.n, 0)))
    assert ev.nll == pytest.approx(nll_exact(model, y))


def test_shape_checks(model: FsaModel, y: np.ndarray) -> None:
    with pytest.raises(DomainError):
        evaluate_exact(model, y[:-1])
    with pytest.raises(DomainError):
        evaluate_exact(model, y, np.ones((model.n - 1, 1)))


@pytest.mark.parametrize("kind", ["none", "fitc", "piv-chol"])
def test_iterative_close_to_exact(model: FsaModel, y: np.ndarray, kind: str) -> None:
    exact = evaluate_exact(model, y)
    cfg = CgConfig(tol=1e-8, num_probes=200)
    ev = evaluate_iterative(model, y, None, make_precond(kind, model, 30), cfg)
    assert ev.quad == pytest.approx(exact.quad, rel=1e-6)
    assert ev.nll == pytest.approx(exact.nll, rel=0.02)
    assert np.allclose(ev.grad, exact.grad, rtol=0.25, atol=0.1 * np.abs(exact.grad).max())
    assert ev.max_iterations > 0


def test_iterative_common_random_numbers(model: FsaModel, y: np.ndarray) -> None:
    cfg = CgConfig(tol=1e-8, num_probes=10, seed=3)
    p = FitcPrecond.from_model(model)
    a = evaluate_iterative(model, y, None, p, cfg, with_grad=False)
    b = evaluate_iterative(model, y, None, p, cfg, with_grad=False)
    assert a.nll == b.nll
    assert np.all(np.isnan(a.grad))


def test_control_variates_keep_estimate_close(model: FsaModel, y: np.ndarray) -> None:
    exact = evaluate_exact(model, y)
    cfg = CgConfig(tol=1e-8, num_probes=50)
    p = FitcPrecond.from_model(model)
    ev = evaluate_iterative(model, y, None, p, cfg, cv="optimal")
    assert np.allclose(ev.grad, exact.grad, rtol=0.1, atol=0.05 * np.abs(exact.grad).max())


def test_dispatch(model: FsaModel, y: np.ndarray) -> None:
    exact = evaluate(model, y)
    iterative = evaluate(
        model, y, backend="iterative", precond_kind="fitc", cfg=CgConfig(tol=1e-8)
    )
    assert iterative.nll == pytest.approx(exact.nll, rel=0.05)
    with pytest.raises(DomainError):
        evaluate(model, y, backend="gpu")  # type: ignore[arg-type]
