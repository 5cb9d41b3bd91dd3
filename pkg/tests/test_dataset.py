from pathlib import Path

import numpy as np
import pytest

from fsagp.dataset import Dataset, read_csv, simulate, write_csv
from fsagp.errors import ConfigError, DomainError
from fsagp.kernels import KernelSpec


def test_csv_round_trip_is_byte_identical(tmp_path: Path) -> None:
    data = simulate(50, 0.5, 1.0, 0.1, KernelSpec(), seed=3, test_fraction=0.2, beta=[1.0, 2.0])
    first = tmp_path / "a.csv"
    second = tmp_path / "b.csv"
    write_csv(data, first)
    loaded = read_csv(first)
    write_csv(loaded, second)
    assert first.read_bytes() == second.read_bytes()
    assert np.array_equal(loaded.coords, data.coords)
    assert np.array_equal(loaded.y, data.y)
    assert loaded.covariate_names == ("cov_0", "cov_1")


def test_header_layout(tmp_path: Path) -> None:
    data = simulate(5, 0.5, 1.0, 0.1, KernelSpec(), d=3, test_fraction=0.4, beta=[1.0])
    path = tmp_path / "data.csv"
    write_csv(data, path)
    assert path.read_text(encoding="utf-8").splitlines()[0] == "x1,x2,x3,y,cov_0,split"


def test_train_test_split() -> None:
    data = simulate(100, 0.5, 1.0, 0.1, KernelSpec(), test_fraction=0.25)
    train, test = data.train_test()
    assert train.n == 75
    assert test.n == 25
    assert set(test.split.tolist()) == {"test"}  # type: ignore[union-attr]
    with pytest.raises(ConfigError):
        simulate(10, 0.5, 1.0, 0.1, KernelSpec()).train_test()


def test_missing_split_values_are_training(tmp_path: Path) -> None:
    path = tmp_path / "data.csv"
    path.write_text("x1,x2,y,split\n0,0,1,test\n1,1,2,\n", encoding="utf-8")
    train, test = read_csv(path).train_test()
    assert train.n == 1
    assert test.n == 1


def test_missing_coordinates(tmp_path: Path) -> None:
    path = tmp_path / "data.csv"
    path.write_text("y,lat\n1,2\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="missing coordinate column 'x1'"):
        read_csv(path)


def test_missing_response(tmp_path: Path) -> None:
    path = tmp_path / "data.csv"
    path.write_text("x1,x2\n0.1,0.2\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="missing response column 'y'"):
        read_csv(path)
    data = read_csv(path, response=False)
    assert not data.has_response
    assert list(data.to_frame().columns) == ["x1", "x2"]


def test_unknown_and_bad_columns(tmp_path: Path) -> None:
    path = tmp_path / "data.csv"
    path.write_text("x1,y,extra\n0,1,2\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="unknown columns"):
        read_csv(path)
    path.write_text("x1,y\n0,abc\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        read_csv(path)
    path.write_text("x1,y\n0,inf\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="non-finite"):
        read_csv(path)
    with pytest.raises(ConfigError):
        read_csv(tmp_path / "absent.csv")


def test_dataset_shape_checks() -> None:
    with pytest.raises(ConfigError):
        Dataset(np.zeros((3, 2)), np.zeros(4))
    with pytest.raises(ConfigError):
        Dataset(np.zeros((3, 2)), np.zeros(3), np.zeros((2, 1)))


def test_simulate_single_point() -> None:
    data = simulate(1, 0.5, 1.0, 0.1, KernelSpec(), seed=1)
    assert data.n == 1
    assert data.d == 2
    assert np.isfinite(data.y[0])


def test_simulate_pure_noise() -> None:
    data = simulate(4000, 2.0, 0.0, 0.1, KernelSpec(), seed=2)
    assert np.var(data.y) == pytest.approx(2.0, rel=0.1)


def test_simulate_is_reproducible() -> None:
    a = simulate(30, 0.5, 1.0, 0.1, KernelSpec(), seed=7)
    b = simulate(30, 0.5, 1.0, 0.1, KernelSpec(), seed=7)
    assert np.array_equal(a.y, b.y)
    assert np.array_equal(a.coords, b.coords)


def test_simulate_validation() -> None:
    with pytest.raises(DomainError):
        simulate(0, 0.5, 1.0, 0.1, KernelSpec())
    with pytest.raises(DomainError):
        simulate(10, 0.5, 1.0, 0.1, KernelSpec(), test_fraction=1.0)
    with pytest.raises(DomainError):
        simulate(10, -0.5, 1.0, 0.1, KernelSpec())
    with pytest.raises(DomainError):
        simulate(30000, 0.5, 1.0, 0.1, KernelSpec())
