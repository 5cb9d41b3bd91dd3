import numpy as np
import pytest

from fsagp.dataset import simulate
from fsagp.errors import DomainError
from fsagp.fsa import assemble, nll_exact
from fsagp.inducing import lloyd, select_inducing, select_kmeanspp, select_random
from fsagp.kernels import CovParams, KernelSpec, LocationSet, TaperSpec


@pytest.fixture(name="locs")
def fixture_locs() -> LocationSet:
    return LocationSet(np.random.default_rng(0).uniform(size=(300, 2)))


def test_random_selection(locs: LocationSet) -> None:
    inducing = select_random(locs, 20, seed=1)
    assert inducing.m == 20
    assert inducing.indices is not None
    assert len(set(inducing.indices.tolist())) == 20
    assert np.array_equal(inducing.coords, locs.coords[inducing.indices])
    again = select_random(locs, 20, seed=1)
    assert np.array_equal(again.indices, inducing.indices)  # type: ignore[arg-type]


def test_kmeanspp_returns_distinct_data_points(locs: LocationSet) -> None:
    inducing = select_kmeanspp(locs, 25, seed=2)
    assert inducing.m == 25
    assert inducing.indices is not None
    assert len(np.unique(inducing.indices)) == 25
    assert np.array_equal(inducing.coords, locs.coords[inducing.indices])


def test_kmeanspp_deterministic(locs: LocationSet) -> None:
    a = select_kmeanspp(locs, 10, seed=5)
    b = select_kmeanspp(locs, 10, seed=5)
    assert np.array_equal(a.coords, b.coords)


def test_m_equals_n() -> None:
    locs = LocationSet(np.random.default_rng(1).uniform(size=(12, 2)))
    inducing = select_kmeanspp(locs, 12, seed=0)
    assert sorted(inducing.indices.tolist()) == list(range(12))  # type: ignore[union-attr]


def test_m_out_of_range(locs: LocationSet) -> None:
    with pytest.raises(DomainError):
        select_random(locs, 0)
    with pytest.raises(DomainError):
        select_kmeanspp(locs, locs.n + 1)


def test_duplicates_limit_m() -> None:
    coords = np.repeat(np.random.default_rng(2).uniform(size=(5, 2)), 3, axis=0)
    locs = LocationSet(coords)
    inducing = select_kmeanspp(locs, 5, seed=0)
    assert len(np.unique(inducing.coords, axis=0)) == 5
    with pytest.raises(DomainError):
        select_kmeanspp(locs, 6, seed=0)


def test_lloyd_sse_nonincreasing(locs: LocationSet) -> None:
    centers = locs.coords[:15].copy()
    trace = lloyd(locs.coords, centers, max_iters=30, rtol=0.0)
    assert len(trace) >= 2
    assert np.all(np.diff(trace) <= 1e-12)


def test_unknown_method(locs: LocationSet) -> None:
    with pytest.raises(DomainError):
        select_inducing(locs, 5, "grid")


def _fitc_nll(locs: LocationSet, y: np.ndarray, method: str, seed: int) -> float:
    params = CovParams(1.0, 1.0, 0.0741)
    inducing = select_inducing(locs, 20, method, seed)
    model = assemble(locs, inducing, params, KernelSpec(1.5), TaperSpec(1e-9))
    return nll_exact(model, y)


@pytest.mark.slow
def test_kmeanspp_beats_random_selection() -> None:
    wins = 0
    for seed in range(25):
        data = simulate(1000, 1.0, 1.0, 0.0741, KernelSpec(1.5), seed=100 + seed)
        locs, y = data.locs(), data.y
        if _fitc_nll(locs, y, "kmeans++", seed) < _fitc_nll(locs, y, "random", seed):
            wins += 1
    assert wins >= 20
