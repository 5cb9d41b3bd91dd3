"""Run configuration: TOML sections mirroring the module configs, plus flag overrides."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from typing import Any, Mapping

from fsagp.errors import ConfigError, FsaError
from fsagp.estimation import FitConfig
from fsagp.inducing import InducingSet, select_inducing
from fsagp.kernels import (
    CovParams,
    KernelSpec,
    LocationSet,
    TaperSpec,
    gamma_for_n_gamma,
    rho_for_effective_range,
)
from fsagp.krylov import CgConfig
from fsagp.precond import PRECOND_KINDS
from fsagp.vecchia import VECCHIA_PRECONDS

__all__ = ["RunConfig", "parse_override", "resolve_threads"]

# Environment variable consulted when `--threads` is not given.
THREADS_ENV = "FSAGP_THREADS"


@dataclass(frozen=True)
class KernelSection:
    """Matérn smoothness."""

    nu: float = 1.5
    family: str = "matern"


@dataclass(frozen=True)
class ParamsSection:
    """Covariance parameters used for simulation and as fixed values in benchmarks.

    A positive `effective_range` replaces `rho`.
    """

    sigma2: float = 1.0
    sigma1_2: float = 1.0
    rho: float = 0.0741
    effective_range: float = 0.0
    beta: tuple[float, ...] = ()


@dataclass(frozen=True)
class TaperSection:
    """Taper range γ, or the target number of nonzeros per row when `gamma` is 0."""

    gamma: float = 0.0
    n_gamma: float = 20.0
    family: str = "wendland2"


@dataclass(frozen=True)
class InducingSection:
    """Number of inducing points and how to choose them."""

    m: int = 200
    method: str = "kmeans++"
    seed: int = 0


@dataclass(frozen=True)
class SolverSection:
    """Likelihood backend, preconditioner and CG settings."""

    # pylint: disable=too-many-instance-attributes

    backend: str = "cholesky"
    precond: str = "fitc"
    piv_chol_rank: int = 200
    tol: float = 1e-3
    max_iter: int = 1000
    num_probes: int = 50
    probe_dist: str = "gaussian"
    seed: int = 0
    cv: str = "optimal"
    require_convergence: bool = False


@dataclass(frozen=True)
class PredictionSection:
    """Predictive variance method and its Monte Carlo settings."""

    var_method: str = "exact"
    num_probes: int = 1000
    lanczos_rank: int = 50
    cv: bool = True


@dataclass(frozen=True)
class FitSection:
    """Optimizer settings."""

    optimizer: str = "lbfgs"
    max_evals: int = 200
    gtol: float = 1e-3
    memory: int = 10
    log_params: bool = True


@dataclass(frozen=True)
class SimulateSection:
    """Size and layout of simulated datasets."""

    n: int = 2000
    d: int = 2
    test_fraction: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class VecchiaSection:
    """Vecchia benchmark grid."""

    n: int = 1000
    m_v: int = 20
    ordering: str = "random"
    preconds: tuple[str, ...] = VECCHIA_PRECONDS
    num_probes: tuple[int, ...] = (5, 20, 50)
    reps: int = 10
    m: int = 200


@dataclass(frozen=True)
class BenchSection:
    """Preconditioner benchmark and FSA sweep grids."""

    # pylint: disable=too-many-instance-attributes

    n: tuple[int, ...] = (5000,)
    m: tuple[int, ...] = (200,)
    n_gamma: tuple[float, ...] = (40.0,)
    effective_range: tuple[float, ...] = (0.2,)
    preconds: tuple[str, ...] = ("none", "fitc", "piv-chol")
    piv_chol_ranks: tuple[int, ...] = (200,)
    nll_reps: int = 0
    sweep_m: tuple[int, ...] = (50, 100, 200)
    sweep_n_gamma: tuple[float, ...] = (10.0, 20.0, 40.0)


_CHOICES: dict[tuple[str, str], tuple[str, ...]] = {
    ("solver", "backend"): ("cholesky", "iterative"),
    ("solver", "precond"): PRECOND_KINDS,
    ("solver", "probe_dist"): ("gaussian", "rademacher", "precond-gaussian"),
    ("solver", "cv"): ("none", "one", "optimal"),
    ("prediction", "var_method"): ("exact", "sim", "lanczos"),
    ("fit", "optimizer"): ("lbfgs", "fisher"),
    ("inducing", "method"): ("kmeans++", "random"),
    ("vecchia", "ordering"): ("given", "random"),
    ("taper", "family"): ("wendland1", "wendland2"),
    ("bench", "preconds"): PRECOND_KINDS,
    ("vecchia", "preconds"): VECCHIA_PRECONDS,
}


def _coerce(where: str, default: Any, value: Any) -> Any:
    """Convert `value` to the type of `default`; strings come from `--set`."""

    # pylint: disable=too-many-return-statements

    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "yes", "1", "false", "no", "0"):
            return value.lower() in ("true", "yes", "1")
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    if isinstance(default, tuple):
        items = value.split(",") if isinstance(value, str) else value
        if not isinstance(items, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        item_default = default[0] if default else 0.0
        return tuple(_coerce(where, item_default, item) for item in items if item != "")
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}") from err
    if not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value.strip()


def _section(name: str, cls: type[Any], values: Mapping[str, Any]) -> Any:

    if not isinstance(values, Mapping):
        raise ConfigError(f"[{name}] must be a table")
    defaults = cls()
    known = {f.name for f in fields(cls)}
    if unknown := sorted(set(values) - known):
        raise ConfigError(f"[{name}]: unknown keys {unknown}")
    changes = {}
    for key, value in values.items():
        changes[key] = _coerce(f"{name}.{key}", getattr(defaults, key), value)
        choices = _CHOICES.get((name, key))
        picked = changes[key] if isinstance(changes[key], tuple) else (changes[key],)
        if choices and not set(picked) <= set(choices):
            raise ConfigError(f"{name}.{key}={value!r}: choose from {', '.join(choices)}")
    return replace(defaults, **changes)


def parse_override(text: str) -> tuple[str, str, str]:
    """Split `SECTION.KEY=VALUE`."""

    target, sep, value = text.partition("=")
    section, dot, key = target.strip().partition(".")
    if not sep or not dot or not section or not key:
        raise ConfigError(f"override {text!r} is not of the form SECTION.KEY=VALUE")
    return section, key, value.strip()


def resolve_threads(flag: int | None) -> int:
    """Return the k-d tree worker count: the flag, else the environment, else all cores.

    BLAS threads are not affected; numpy reads those limits from the environment at import.
    """

    if flag is not None:
        return flag
    if env := os.environ.get(THREADS_ENV):
        try:
            return int(env)
        except ValueError as err:
            raise ConfigError(f"{THREADS_ENV}={env!r} is not an integer") from err
    return -1


@dataclass(frozen=True)
class RunConfig:
    """All settings of a run, one frozen section per module."""

    # pylint: disable=too-many-instance-attributes

    kernel: KernelSection = field(default_factory=KernelSection)
    params: ParamsSection = field(default_factory=ParamsSection)
    taper: TaperSection = field(default_factory=TaperSection)
    inducing: InducingSection = field(default_factory=InducingSection)
    solver: SolverSection = field(default_factory=SolverSection)
    prediction: PredictionSection = field(default_factory=PredictionSection)
    fit: FitSection = field(default_factory=FitSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    vecchia: VecchiaSection = field(default_factory=VecchiaSection)
    bench: BenchSection = field(default_factory=BenchSection)

    @classmethod
    def from_mapping(
        cls, mapping: Mapping[str, Any], overrides: list[str] | None = None
    ) -> RunConfig:
        """Validate the tables of a parsed TOML file and apply `SECTION.KEY=VALUE` overrides.

        Top-level entries that are not tables are left to the command-line framework.
        """

        tables: dict[str, dict[str, Any]] = {
            key: dict(value) for key, value in mapping.items() if isinstance(value, Mapping)
        }
        for text in overrides or []:
            section, key, value = parse_override(text)
            tables.setdefault(section, {})[key] = value

        sections = {f.name: f.default_factory for f in fields(cls)}  # type: ignore[misc]
        if unknown := sorted(set(tables) - set(sections)):
            raise ConfigError(f"unknown configuration sections {unknown}")
        return cls(
            **{
                name: _section(name, factory, tables[name])
                for name, factory in sections.items()
                if name in tables
            }
        )

    def with_seed(self, seed: int) -> RunConfig:
        """Return a copy with every seed set to `seed`."""

        return replace(
            self,
            inducing=replace(self.inducing, seed=seed),
            solver=replace(self.solver, seed=seed),
            simulate=replace(self.simulate, seed=seed),
        )

    def kernel_spec(self) -> KernelSpec:
        """Return the kernel."""

        try:
            return KernelSpec(self.kernel.nu, self.kernel.family)  # type: ignore[arg-type]
        except FsaError as err:
            raise ConfigError(f"[kernel]: {err}") from err

    def rho(self) -> float:
        """Return ρ, converted from the effective range when one is given."""

        if self.params.effective_range > 0:
            return rho_for_effective_range(self.kernel_spec(), self.params.effective_range)
        return self.params.rho

    def cov_params(self) -> CovParams:
        """Return the covariance parameters of the [params] section."""

        p = self.params
        try:
            return CovParams(p.sigma2, p.sigma1_2, self.rho(), p.beta)
        except FsaError as err:
            raise ConfigError(f"[params]: {err}") from err

    def taper_spec(self, n: int) -> TaperSpec:
        """Return the taper, deriving γ from `n_gamma` for `n` points when `gamma` is 0."""

        t = self.taper
        try:
            gamma = t.gamma if t.gamma > 0 else gamma_for_n_gamma(n, t.n_gamma)
            return TaperSpec(gamma, t.family)  # type: ignore[arg-type]
        except FsaError as err:
            raise ConfigError(f"[taper]: {err}") from err

    def select_inducing(self, locs: LocationSet) -> InducingSet:
        """Choose min(m, n) inducing points from `locs`."""

        i = self.inducing
        return select_inducing(locs, min(i.m, locs.n), i.method, i.seed)

    def cg_config(self) -> CgConfig:
        """Return the CG settings."""

        s = self.solver
        try:
            return CgConfig(
                tol=s.tol,
                max_iter=s.max_iter,
                num_probes=s.num_probes,
                probe_dist=s.probe_dist,  # type: ignore[arg-type]
                seed=s.seed,
                require_convergence=s.require_convergence,
            )
        except FsaError as err:
            raise ConfigError(f"[solver]: {err}") from err

    def fit_config(self) -> FitConfig:
        """Return the estimation settings."""

        s, f = self.solver, self.fit
        try:
            return FitConfig(
                backend=s.backend,  # type: ignore[arg-type]
                optimizer=f.optimizer,  # type: ignore[arg-type]
                max_evals=f.max_evals,
                gtol=f.gtol,
                memory=f.memory,
                log_params=(f.log_params,) * 3,
                cg=self.cg_config(),
                precond=s.precond,
                piv_chol_rank=s.piv_chol_rank,
                cv=s.cv,  # type: ignore[arg-type]
            )
        except FsaError as err:
            raise ConfigError(f"[fit]: {err}") from err

    def to_toml(self) -> str:
        """Render every section with its current values."""

        lines = []
        for section in fields(self):
            lines.append(f"[{section.name}]")
            values = getattr(self, section.name)
            for item in fields(values):
                lines.append(f"{item.name} = {_toml_value(getattr(values, item.name))}")
            lines.append("")
        return "\n".join(lines)


def _toml_value(value: Any) -> str:

    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, tuple):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    return repr(value)
