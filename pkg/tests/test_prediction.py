import numpy as np
import pytest
from scipy.spatial.distance import cdist

from fsagp.errors import DomainError
from fsagp.fsa import FsaModel, assemble
from fsagp.kernels import CovParams, LocationSet, cross_cov, taper_eval
from fsagp.krylov import CgConfig
from fsagp.prediction import (
    PredictionInputs,
    predict,
    predict_mean,
    predict_var_exact,
    predict_var_lanczos,
    predict_var_sim,
    prediction_inputs,
)
from tests.oracles import dense_fsa, make_model, sample_response


@pytest.fixture(name="model")
def fixture_model() -> FsaModel:
    return make_model(n=150, m=15, gamma=0.2)


@pytest.fixture(name="locs_p")
def fixture_locs_p() -> LocationSet:
    return LocationSet(np.random.default_rng(11).uniform(size=(25, 2)))


@pytest.fixture(name="inputs")
def fixture_inputs(model: FsaModel, locs_p: LocationSet) -> PredictionInputs:
    return prediction_inputs(model, locs_p)


def _dense_cross(model: FsaModel, locs_p: LocationSet) -> np.ndarray:
    sigma = cross_cov(model.locs, locs_p, model.kernel, model.params)
    sigma_mn_p = cross_cov(model.inducing.locs, locs_p, model.kernel, model.params)
    lowrank = model.sigma_mn.T @ np.linalg.solve(model.sigma_m, sigma_mn_p)
    taper = taper_eval(model.taper, cdist(model.locs.coords, locs_p.coords))
    return np.asarray(lowrank + (sigma - lowrank) * taper)


def _dense_var(model: FsaModel, locs_p: LocationSet) -> np.ndarray:
    c = _dense_cross(model, locs_p)
    p = model.params
    return np.asarray(
        p.sigma1_2 + p.sigma2 - np.sum(c * np.linalg.solve(dense_fsa(model), c), axis=0)
    )


def test_cross_covariance(
    model: FsaModel, locs_p: LocationSet, inputs: PredictionInputs
) -> None:
    c = inputs.cross_lowrank(model) + inputs.cross_s.toarray()
    assert np.allclose(c, _dense_cross(model, locs_p), atol=1e-10)
    assert inputs.n_p == 25


def test_mean_against_dense(
    model: FsaModel, locs_p: LocationSet, inputs: PredictionInputs
) -> None:
    y = sample_response(model)
    expected = _dense_cross(model, locs_p).T @ np.linalg.solve(dense_fsa(model), y)
    assert np.allclose(predict_mean(model, inputs, y), expected, atol=1e-8)


def test_mean_by_pcg(model: FsaModel, inputs: PredictionInputs) -> None:
    y = sample_response(model)
    exact = predict_mean(model, inputs, y)
    out = predict(model, inputs, y, backend="iterative", cfg=CgConfig(tol=1e-10))
    assert np.allclose(out.mean, exact, atol=1e-7)


def test_mean_with_covariates(model: FsaModel, locs_p: LocationSet) -> None:
    beta = np.array([1.0, 2.0])
    fitted = assemble(
        model.locs,
        model.inducing,
        model.params.with_(beta=beta),
        model.kernel,
        model.taper,
        model.pattern,
    )
    X = np.column_stack([np.ones(model.n), model.locs.coords[:, 0]])
    x_p = np.column_stack([np.ones(locs_p.n), locs_p.coords[:, 0]])
    y = sample_response(model) + X @ beta
    inputs = prediction_inputs(fitted, locs_p, x_p)
    expected = x_p @ beta + _dense_cross(model, locs_p).T @ np.linalg.solve(
        dense_fsa(model), y - X @ beta
    )
    assert np.allclose(predict_mean(fitted, inputs, y, X), expected, atol=1e-8)


def test_exact_variance_against_dense(
    model: FsaModel, locs_p: LocationSet, inputs: PredictionInputs
) -> None:
    var = predict_var_exact(model, inputs)
    assert np.allclose(var, _dense_var(model, locs_p), rtol=1e-8, atol=1e-10)
    assert np.all(var > 0)


def test_fitc_variance_against_dense(locs_p: LocationSet) -> None:
    model = make_model(gamma=1e-9)
    inputs = prediction_inputs(model, locs_p)
    assert inputs.cross_s.nnz == 0
    assert np.allclose(predict_var_exact(model, inputs), _dense_var(model, locs_p), atol=1e-10)


def test_full_rank_lanczos_is_exact(model: FsaModel, inputs: PredictionInputs) -> None:
    exact = predict_var_exact(model, inputs)
    out = predict_var_lanczos(model, inputs, model.n, CgConfig(tol=1e-10))
    assert out.method == "lanczos"
    assert np.allclose(out.var, exact, rtol=1e-6, atol=1e-8)


def test_low_rank_lanczos_overestimates_variance(
    model: FsaModel, inputs: PredictionInputs
) -> None:
    exact = predict_var_exact(model, inputs)
    out = predict_var_lanczos(model, inputs, 10, CgConfig(tol=1e-10))
    assert np.all(out.var >= exact - 1e-8)


def test_simulated_variance_is_close(model: FsaModel, inputs: PredictionInputs) -> None:
    exact = predict_var_exact(model, inputs)
    cfg = CgConfig(tol=1e-10)
    plain = predict_var_sim(model, inputs, 2000, cfg)
    with_cv = predict_var_sim(model, inputs, 2000, cfg, cv=True)
    assert plain.num_probes == 2000
    assert np.allclose(plain.var, exact, rtol=0.1, atol=0.05)
    assert np.allclose(with_cv.var, exact, rtol=0.1, atol=0.05)


def _rmse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((a - b) ** 2)))


def test_simulated_variance_error_falls_with_probes(
    model: FsaModel, inputs: PredictionInputs
) -> None:
    exact = predict_var_exact(model, inputs)
    errors = []
    for num_probes in (50, 200, 1000):
        per_seed = []
        for s in range(5):
            out = predict_var_sim(model, inputs, num_probes, CgConfig(tol=1e-10, seed=s))
            per_seed.append(_rmse(out.var, exact))
        errors.append(np.mean(per_seed))
    assert errors[0] > errors[1] > errors[2]


def test_control_variates_reduce_spread(model: FsaModel, inputs: PredictionInputs) -> None:
    plain = []
    with_cv = []
    for s in range(30):
        cfg = CgConfig(tol=1e-10, seed=s)
        plain.append(predict_var_sim(model, inputs, 50, cfg).var)
        with_cv.append(predict_var_sim(model, inputs, 50, cfg, cv=True).var)
    spread_plain = np.var(plain, axis=0)
    spread_cv = np.var(with_cv, axis=0)
    assert spread_cv.mean() < spread_plain.mean()
    assert np.median(spread_cv / spread_plain) < 1.0


@pytest.mark.slow
def test_lanczos_trails_simulation_on_rough_short_range_field(locs_p: LocationSet) -> None:
    rough = make_model(n=500, m=20, gamma=0.1, params=CovParams(0.1, 1.0, 0.02), nu=0.5)
    inputs = prediction_inputs(rough, locs_p)
    exact = predict_var_exact(rough, inputs)
    cfg = CgConfig(tol=1e-10)
    lanczos_err = _rmse(predict_var_lanczos(rough, inputs, 50, cfg).var, exact)
    sim_err = np.mean(
        [
            _rmse(predict_var_sim(rough, inputs, 50, CgConfig(tol=1e-10, seed=s)).var, exact)
            for s in range(5)
        ]
    )
    assert lanczos_err >= sim_err


def test_predict_dispatch(model: FsaModel, inputs: PredictionInputs) -> None:
    y = sample_response(model)
    out = predict(model, inputs, y)
    assert out.method == "exact"
    assert out.clamped == 0
    with pytest.raises(DomainError):
        predict(model, inputs, y, method="kriging")  # type: ignore[arg-type]


def test_variance_at_training_point_below_marginal(model: FsaModel) -> None:
    inputs = prediction_inputs(model, model.locs.subset(np.arange(5)))
    var = predict_var_exact(model, inputs)
    p = model.params
    assert np.all(var < p.sigma1_2 + p.sigma2)
    assert np.all(var >= p.sigma2 - 1e-8)


def test_dimension_mismatch(model: FsaModel) -> None:
    with pytest.raises(DomainError):
        prediction_inputs(model, LocationSet(np.zeros((3, 3))))
    with pytest.raises(DomainError):
        prediction_inputs(model, LocationSet(np.zeros((3, 2))), np.ones((4, 1)))
    with pytest.raises(DomainError):
        predict_var_lanczos(model, prediction_inputs(model, model.locs), -1, CgConfig())
