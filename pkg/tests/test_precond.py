import numpy as np
import pytest

from fsagp.errors import DomainError, FactorizationError
from fsagp.fsa import FsaModel
from fsagp.kernels import PARAM_NAMES
from fsagp.precond import (
    DiagPrecond,
    FitcPrecond,
    IdentityPrecond,
    PivCholPrecond,
    build_piv_chol,
    make_precond,
)
from tests.oracles import make_model


@pytest.fixture(name="model")
def fixture_model() -> FsaModel:
    return make_model(n=120, m=12)


def _dense_fitc(model: FsaModel) -> np.ndarray:
    return np.diag(model.diag_s) + model.v.T @ model.v


def test_identity(model: FsaModel) -> None:
    p = make_precond("none", model)
    assert isinstance(p, IdentityPrecond)
    b = np.arange(model.n, dtype=float)
    assert np.array_equal(p.solve(b), b)
    assert p.logdet() == 0.0
    assert p.grad_logdet_trace("rho") == 0.0


def test_diag_against_dense(model: FsaModel) -> None:
    p = make_precond("diag", model)
    assert isinstance(p, DiagPrecond)
    b = np.random.default_rng(0).standard_normal((model.n, 2))
    assert np.allclose(p.solve(b), b / model.diag_s[:, None])
    assert p.logdet() == pytest.approx(np.sum(np.log(model.diag_s)))
    for wrt in PARAM_NAMES:
        expected = np.sum(model.derivatives.diag_sparse(wrt) / model.diag_s)
        assert p.grad_logdet_trace(wrt) == pytest.approx(expected)


def test_diag_rejects_nonpositive() -> None:
    with pytest.raises(FactorizationError):
        DiagPrecond(np.array([1.0, 0.0]))


def test_fitc_against_dense(model: FsaModel) -> None:
    p = make_precond("fitc", model)
    assert isinstance(p, FitcPrecond)
    dense = _dense_fitc(model)
    rng = np.random.default_rng(1)
    b = rng.standard_normal(model.n)
    block = rng.standard_normal((model.n, 4))
    assert np.allclose(p.matvec(b), dense @ b, atol=1e-8)
    assert np.allclose(p.solve(b), np.linalg.solve(dense, b), atol=1e-8)
    assert np.allclose(p.solve(block), np.linalg.solve(dense, block), atol=1e-8)
    assert p.logdet() == pytest.approx(np.linalg.slogdet(dense)[1], rel=1e-9)
    assert np.allclose(p.diag_inverse(), np.diag(np.linalg.inv(dense)), atol=1e-8)


def test_fitc_gradient_trace_against_dense(model: FsaModel) -> None:
    p = FitcPrecond.from_model(model)
    pinv = np.linalg.inv(_dense_fitc(model))
    derivs = model.derivatives
    for wrt in PARAM_NAMES:
        dlow = derivs.dense(wrt) - derivs.dsparse[wrt].toarray()
        dp = np.diag(derivs.diag_sparse(wrt)) + dlow
        assert p.grad_logdet_trace(wrt) == pytest.approx(np.trace(pinv @ dp), rel=1e-8)
        x = np.ones(model.n)
        assert np.allclose(p.derivative_matvec(wrt, x), dp @ x, atol=1e-8)


def test_fitc_sample_covariance(model: FsaModel) -> None:
    p = FitcPrecond.from_model(model)
    draws = p.sample(np.random.default_rng(2), size=20000)
    assert draws.shape == (model.n, 20000)
    emp = draws @ draws.T / 20000
    dense = _dense_fitc(model)
    assert np.abs(emp - dense).max() < 0.1 * np.abs(dense).max()


def test_fitc_without_model_has_no_gradient(model: FsaModel) -> None:
    p = FitcPrecond(model.sigma_mn, model.chol_m, model.diag_s)
    with pytest.raises(DomainError):
        p.grad_logdet_trace("rho")


def test_piv_chol_full_rank_reproduces_matrix(model: FsaModel) -> None:
    p = make_precond("piv-chol", model, rank=model.n)
    assert isinstance(p, PivCholPrecond)
    dense = model.to_dense()
    assert np.allclose(p.matvec(np.eye(model.n)), dense, atol=1e-6)
    assert p.logdet() == pytest.approx(np.linalg.slogdet(dense)[1], rel=1e-6)
    assert p.residual_trace < 1e-6


def test_piv_chol_low_rank_solve_matches_own_matvec(model: FsaModel) -> None:
    p = make_precond("piv-chol", model, rank=10)
    assert p.rank == 10  # type: ignore[attr-defined]
    x = np.random.default_rng(3).standard_normal(model.n)
    assert np.allclose(p.solve(p.matvec(x)), x, atol=1e-8)
    dense = p.matvec(np.eye(model.n))
    assert p.logdet() == pytest.approx(np.linalg.slogdet(dense)[1], rel=1e-8)


def test_piv_chol_stops_at_exact_rank() -> None:
    rng = np.random.default_rng(4)
    a = rng.standard_normal((30, 3))
    mat = a @ a.T
    p = build_piv_chol(lambda j: mat[:, j], np.diag(mat).copy(), 10, 0.5)
    assert p.rank == 3
    assert np.allclose(p.l_k @ p.l_k.T, mat, atol=1e-8)


def test_piv_chol_rank_bounds(model: FsaModel) -> None:
    with pytest.raises(DomainError):
        build_piv_chol(model.column, model.diag_nonnugget(), model.n + 1, 0.3)


def test_unknown_kind(model: FsaModel) -> None:
    with pytest.raises(DomainError):
        make_precond("ilu", model)
