"""Spatial datasets: headered CSV files with coordinates, response, covariates and split tag."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import TextIO

import numpy as np
import numpy.typing as npt
import pandas as pd
from loguru import logger
from scipy import linalg

from fsagp.errors import ConfigError, DomainError, FactorizationError
from fsagp.fsa import EXACT_MAX_N
from fsagp.kernels import Array, CovParams, KernelSpec, LocationSet, cross_cov

__all__ = ["Dataset", "read_csv", "simulate", "write_csv"]

# Digits written for every float; enough to round-trip a double.
FLOAT_FORMAT = "%.17g"


@dataclass(frozen=True)
class Dataset:
    """Coordinates, response, optional covariates and an optional train/test tag per row."""

    coords: Array
    y: Array
    covariates: Array | None = None
    covariate_names: tuple[str, ...] = ()
    split: npt.NDArray[np.str_] | None = None
    has_response: bool = True

    def __post_init__(self) -> None:
        """Check row counts and finiteness."""

        n = self.coords.shape[0]
        if self.coords.ndim != 2 or self.y.shape != (n,):
            raise ConfigError(
                f"coordinates {self.coords.shape} and response {self.y.shape} disagree"
            )
        if self.covariates is not None and self.covariates.shape[0] != n:
            raise ConfigError(f"covariates have {self.covariates.shape[0]} rows, expected {n}")
        if self.split is not None and self.split.shape != (n,):
            raise ConfigError(f"split column has {self.split.shape[0]} rows, expected {n}")
        for name, values in (("coordinates", self.coords), ("y", self.y), ("cov", self.X)):
            if values is not None and not np.all(np.isfinite(values)):
                raise ConfigError(f"non-finite values in {name}")

    @property
    def n(self) -> int:
        """Number of rows."""
        return int(self.coords.shape[0])

    @property
    def d(self) -> int:
        """Dimension of the coordinates."""
        return int(self.coords.shape[1])

    @property
    def X(self) -> Array | None:  # pylint: disable=invalid-name
        """Covariate matrix, or None without covariate columns."""
        return self.covariates

    def locs(self, workers: int = -1) -> LocationSet:
        """Return the coordinates as a `LocationSet`."""
        return LocationSet(self.coords, workers)

    def take(self, index: npt.ArrayLike) -> Dataset:
        """Return the rows at `index`."""

        idx = np.asarray(index, dtype=np.intp)
        return Dataset(
            self.coords[idx],
            self.y[idx],
            None if self.covariates is None else self.covariates[idx],
            self.covariate_names,
            None if self.split is None else self.split[idx],
            self.has_response,
        )

    def train_test(self) -> tuple[Dataset, Dataset]:
        """Split on the `split` column; rows not tagged `test` are training rows."""

        if self.split is None:
            raise ConfigError("dataset has no 'split' column")
        test = self.split == "test"
        return self.take(np.flatnonzero(~test)), self.take(np.flatnonzero(test))

    def to_frame(self) -> pd.DataFrame:
        """Return the dataset as a frame with columns x1..xd, y, cov_*, split."""

        frame = pd.DataFrame({f"x{i + 1}": self.coords[:, i] for i in range(self.d)})
        if self.has_response:
            frame["y"] = self.y
        if self.covariates is not None:
            for i, name in enumerate(self.covariate_names):
                frame[name] = self.covariates[:, i]
        if self.split is not None:
            frame["split"] = self.split
        return frame


def _coordinate_columns(columns: list[str]) -> list[str]:

    names = []
    while f"x{len(names) + 1}" in columns:
        names.append(f"x{len(names) + 1}")
    return names


def read_csv(path: str | Path, response: bool = True) -> Dataset:
    """Read a dataset from a headered CSV file.

    Coordinates are the consecutive columns `x1`, `x2`, ...; covariates are the columns named
    `cov_*`. Without `response` the `y` column may be absent (prediction locations) and is then
    filled with zeros.
    """

    try:
        frame = pd.read_csv(path, dtype={"split": str})
    except (OSError, ValueError) as err:
        raise ConfigError(f"cannot read {str(path)!r}: {err}") from err

    columns = [str(c) for c in frame.columns]
    xcols = _coordinate_columns(columns)
    if not xcols:
        raise ConfigError(f"{str(path)!r}: missing coordinate column 'x1'")
    if "y" not in columns and response:
        raise ConfigError(f"{str(path)!r}: missing response column 'y'")
    covcols = [c for c in columns if c.startswith("cov_")]
    known = set(xcols) | set(covcols) | {"y", "split"}
    if unknown := [c for c in columns if c not in known]:
        raise ConfigError(f"{str(path)!r}: unknown columns {unknown}")

    try:
        coords = frame[xcols].to_numpy(dtype=float)
        y = frame["y"].to_numpy(dtype=float) if "y" in columns else np.zeros(len(frame))
        covariates = frame[covcols].to_numpy(dtype=float) if covcols else None
    except ValueError as err:
        raise ConfigError(f"{str(path)!r}: non-numeric values: {err}") from err
    split = frame["split"].fillna("train").to_numpy(dtype=str) if "split" in columns else None

    logger.debug("read {} rows, d={} from {}", len(frame), len(xcols), path)
    return Dataset(coords, y, covariates, tuple(covcols), split, "y" in columns)


def write_csv(data: Dataset | pd.DataFrame, path: str | Path | TextIO) -> None:
    """Write a dataset or result frame as UTF-8 CSV with 17 significant digits."""

    frame = data.to_frame() if isinstance(data, Dataset) else data
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, encoding="utf-8")


def simulate(
    n: int,
    sigma2: float,
    sigma1_2: float,
    rho: float,
    kernel: KernelSpec,
    d: int = 2,
    seed: int = 0,
    test_fraction: float = 0.0,
    beta: npt.ArrayLike | None = None,
) -> Dataset:
    """Draw locations uniformly on the unit cube and a response from the full GP.

    y = Xβ + b + ε with b ~ N(0, σ₁²R) and ε ~ N(0, σ²I); b comes from a dense Cholesky factor,
    so σ₁² = 0 yields pure noise. With a nonempty `beta` the covariates are an intercept
    followed by standard normal columns.
    """

    # pylint: disable=too-many-arguments,too-many-positional-arguments,too-many-locals

    if n < 1 or d < 1:
        raise DomainError(f"n and d must be positive, got n={n}, d={d}")
    if n > EXACT_MAX_N:
        raise DomainError(f"dense sampling is limited to n <= {EXACT_MAX_N}, got {n}")
    if not 0 <= test_fraction < 1:
        raise DomainError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    if sigma2 < 0 or sigma1_2 < 0:
        raise DomainError("variances must be nonnegative")

    rng = np.random.default_rng(seed)
    coords = rng.uniform(size=(n, d))
    y = math.sqrt(sigma2) * rng.standard_normal(n)
    if sigma1_2 > 0:
        locs = LocationSet(coords)
        # The nugget does not enter the latent covariance.
        sigma = cross_cov(locs, locs, kernel, CovParams(1.0, sigma1_2, rho))
        sigma[np.diag_indices(n)] += 1e-10 * sigma1_2
        try:
            chol = linalg.cholesky(sigma, lower=True)
        except linalg.LinAlgError as err:
            raise FactorizationError("simulate", str(err)) from err
        y += chol @ rng.standard_normal(n)

    covariates = None
    names: tuple[str, ...] = ()
    coef = np.atleast_1d(np.asarray([] if beta is None else beta, dtype=float))
    if coef.size:
        covariates = np.column_stack([np.ones(n), rng.standard_normal((n, coef.size - 1))])
        names = tuple(f"cov_{i}" for i in range(coef.size))
        y += covariates @ coef

    split = None
    if test_fraction > 0:
        split = np.full(n, "train")
        split[rng.choice(n, size=int(round(test_fraction * n)), replace=False)] = "test"

    logger.info("simulated n={} d={} sigma2={} sigma1_2={} rho={}", n, d, sigma2, sigma1_2, rho)
    return Dataset(coords, y, covariates, names, split)
