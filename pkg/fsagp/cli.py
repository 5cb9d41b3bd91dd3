"""Command line interface."""

from __future__ import annotations

import json
import sys
from argparse import ArgumentParser
from dataclasses import replace
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from libcli import BaseCLI
from loguru import logger

from fsagp.bench import bench_precond, markdown_table, sweep_fsa, vecchia_bench
from fsagp.config import RunConfig, resolve_threads
from fsagp.dataset import Dataset, read_csv, simulate, write_csv
from fsagp.errors import ConfigError, FsaError
from fsagp.estimation import fit, score
from fsagp.fsa import assemble
from fsagp.inducing import select_inducing
from fsagp.kernels import CovParams, LocationSet, TaperSpec
from fsagp.likelihood import evaluate
from fsagp.precond import PRECOND_KINDS
from fsagp.prediction import predict, prediction_inputs

__all__ = ["FsaCLI"]

# Exit status for configuration and data-schema errors; other library errors exit with 3.
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class FsaCLI(BaseCLI):
    """Command line-interface."""

    config = {
        "config-file": "~/.fsagp.toml",
        # distribution name, not importable package name
        "dist-name": "rlane-fsagp",
    }

    def init_parser(self) -> None:
        """Initialize argument parser."""

        self.ArgumentParser(
            prog=__package__,
            description=self.dedent(
                """
    Full-scale approximation Gaussian processes: simulate spatial data, estimate
    covariance parameters with Cholesky or preconditioned iterative methods, predict,
    and benchmark preconditioners.
                """
            ),
        )

    def add_arguments(self) -> None:
        """Add arguments to parser."""

        group = self.parser.add_argument_group(
            "Run options",
            self.dedent(
                """
    These options override the values of the configuration file.
                """
            ),
        )

        arg = group.add_argument("--seed", type=int, help="Seed every random stream")
        self.add_default_to_help(arg, self.parser)

        arg = group.add_argument(
            "--backend",
            choices=("cholesky", "iterative"),
            help="Likelihood and prediction backend",
        )
        self.add_default_to_help(arg, self.parser)

        arg = group.add_argument(
            "--precond",
            choices=PRECOND_KINDS,
            help="Preconditioner of the iterative backend",
        )
        self.add_default_to_help(arg, self.parser)

        group.add_argument(
            "--threads",
            type=int,
            help="Worker threads of k-d tree neighbor searches (default: `$FSAGP_THREADS` or "
            "all cores); BLAS threading follows `OMP_NUM_THREADS`/`OPENBLAS_NUM_THREADS` "
            "at startup",
        )

        group.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="Override one configuration value; may be repeated",
        )

        arg = group.add_argument(
            "--log-level",
            choices=("DEBUG", "INFO", "WARNING", "ERROR"),
            help="Level of the log messages written to stderr",
        )
        self.add_default_to_help(arg, self.parser)

        subs = self.parser.add_subparsers(dest="command", title="Commands", metavar="COMMAND")
        self._add_simulate(subs.add_parser("simulate", help="Simulate a dataset"))
        self._add_fit(subs.add_parser("fit", help="Estimate covariance parameters"))
        self._add_predict(subs.add_parser("predict", help="Predict at new locations"))
        self._add_bench_precond(
            subs.add_parser("bench-precond", help="Count PCG iterations per preconditioner")
        )
        self._add_sweep_fsa(
            subs.add_parser("sweep-fsa", help="Exact NLL over a grid of m and n_gamma")
        )
        self._add_vecchia_bench(
            subs.add_parser("vecchia-bench", help="Vecchia SLQ accuracy per preconditioner")
        )

        group = self.parser.add_argument_group(
            "Configuration File",
            self.dedent(
                """
    The configuration file holds one table per module: `[kernel]`, `[params]`,
    `[taper]`, `[inducing]`, `[solver]`, `[prediction]`, `[fit]`, `[simulate]`,
    `[vecchia]` and `[bench]`. Unknown tables and keys are errors.
                """
            ),
        )

        group.add_argument(
            "--print-sample-config",
            action="store_true",
            help="Print a sample configuration file",
        )

    @staticmethod
    def _add_simulate(parser: ArgumentParser) -> None:
        parser.add_argument("--n", type=int, help="Number of locations")
        parser.add_argument("--d", type=int, help="Dimension of the locations")
        parser.add_argument("--test-fraction", type=float, help="Fraction tagged `split=test`")
        parser.add_argument("OUT", help="The `CSV` file to write")

    @staticmethod
    def _add_fit(parser: ArgumentParser) -> None:
        parser.add_argument("DATA", help="The `CSV` file of observations")
        parser.add_argument("--out", help="Write the result to this file instead of stdout")

    @staticmethod
    def _add_predict(parser: ArgumentParser) -> None:
        parser.add_argument("TRAIN", help="The `CSV` file of observations")
        parser.add_argument(
            "TEST",
            nargs="?",
            help="The `CSV` file of prediction locations (default: `split=test` rows of TRAIN)",
        )
        parser.add_argument("--fit", dest="fit_file", help="Parameters written by `fit`")
        parser.add_argument("--var-method", choices=("exact", "sim", "lanczos"))
        parser.add_argument("--num-probes", type=int, help="Probes of the `sim` method")
        parser.add_argument("--out", help="Write predictions to this `CSV` file")

    @staticmethod
    def _add_bench_precond(parser: ArgumentParser) -> None:
        parser.add_argument("--out", help="Write the iteration table to this `CSV` file")
        parser.add_argument("--nll-reps", type=int, help="Repetitions of the iterative NLL")
        parser.add_argument("--variance-out", help="Write the NLL table to this `CSV` file")

    @staticmethod
    def _add_sweep_fsa(parser: ArgumentParser) -> None:
        parser.add_argument(
            "DATA", nargs="?", help="The `CSV` file of observations (default: simulate)"
        )
        parser.add_argument("--out", help="Write the grid to this `CSV` file")

    @staticmethod
    def _add_vecchia_bench(parser: ArgumentParser) -> None:
        parser.add_argument(
            "DATA", nargs="?", help="The `CSV` file of observations (default: simulate)"
        )
        parser.add_argument("--out", help="Write the table to this `CSV` file")

    def main(self) -> None:
        """Command line interface entry point (method)."""

        if self.options.print_sample_config:
            self._print_sample_config()
            self.parser.exit(0)

        if not self.options.command:
            self.parser.error("a command is required")

        self._init_logging()
        try:
            run = self._run_config()
            getattr(self, "_cmd_" + self.options.command.replace("-", "_"))(run)
        except ConfigError as err:
            self.parser.exit(EXIT_CONFIG, f"{self.parser.prog}: error: {err}\n")
        except FsaError as err:
            self.parser.exit(EXIT_NUMERICAL, f"{self.parser.prog}: error: {err}\n")

    def _init_logging(self) -> None:

        level = self.options.log_level
        if level is None:
            verbose = int(getattr(self.options, "verbose", 0) or 0)
            level = ("WARNING", "INFO", "DEBUG")[min(verbose, 2)]
        logger.remove()
        logger.add(sys.stderr, level=level)

    def _run_config(self) -> RunConfig:
        """Merge the configuration file with the command line."""

        overrides = list(self.options.overrides)
        if self.options.backend:
            overrides.append(f"solver.backend={self.options.backend}")
        if self.options.precond:
            overrides.append(f"solver.precond={self.options.precond}")
        run = RunConfig.from_mapping(self.config, overrides)
        if self.options.seed is not None:
            run = run.with_seed(self.options.seed)
        return run

    @property
    def workers(self) -> int:
        """Worker count of neighbor searches."""
        return resolve_threads(self.options.threads)

    def _write_or_print(self, frame: pd.DataFrame, out: str | None) -> None:

        print(markdown_table(frame))
        if out:
            write_csv(frame, out)
            logger.info("wrote {} rows to {}", len(frame), out)

    def _cmd_simulate(self, run: RunConfig) -> None:

        sim = run.simulate
        n = self.options.n if self.options.n is not None else sim.n
        d = self.options.d if self.options.d is not None else sim.d
        frac = sim.test_fraction
        if self.options.test_fraction is not None:
            frac = self.options.test_fraction
        p = run.params
        data = simulate(
            n,
            p.sigma2,
            p.sigma1_2,
            run.rho(),
            run.kernel_spec(),
            d=d,
            seed=sim.seed,
            test_fraction=frac,
            beta=p.beta,
        )
        write_csv(data, self.options.OUT)
        logger.info("wrote {} rows to {}", data.n, self.options.OUT)

    def _cmd_fit(self, run: RunConfig) -> None:

        data = read_csv(self.options.DATA)
        if data.split is not None:
            data = data.train_test()[0]
        locs = data.locs(self.workers)
        inducing = run.select_inducing(locs)
        taper = run.taper_spec(locs.n)
        result = fit(locs, data.y, data.X, inducing, run.kernel_spec(), taper, run.fit_config())

        out: dict[str, Any] = result.to_dict()
        out["model"] = {
            "nu": run.kernel.nu,
            "gamma": taper.gamma,
            "taper_family": taper.family,
            "m": inducing.m,
            "inducing_method": run.inducing.method,
            "inducing_seed": run.inducing.seed,
            "n": locs.n,
        }
        text = json.dumps(out, indent=2, sort_keys=True)
        if self.options.out:
            Path(self.options.out).write_text(text + "\n", encoding="utf-8")
        else:
            print(text)

    def _load_fit(self, run: RunConfig) -> tuple[CovParams | None, float | None]:
        """Parameters and taper range of a `fit` result file, if one was given."""

        if not self.options.fit_file:
            return None, None
        try:
            saved = json.loads(Path(self.options.fit_file).read_text(encoding="utf-8"))
            p = saved["params"]
            params = CovParams(p["sigma2"], p["sigma1_2"], p["rho"], p["beta"])
            gamma = saved.get("model", {}).get("gamma")
        except (OSError, ValueError, KeyError, TypeError) as err:
            raise ConfigError(f"cannot read {self.options.fit_file!r}: {err}") from err
        if saved.get("model", {}).get("nu", run.kernel.nu) != run.kernel.nu:
            raise ConfigError("fit result was produced with a different kernel smoothness")
        return params, gamma

    def _predict_data(self) -> tuple[Dataset, Dataset]:

        train = read_csv(self.options.TRAIN)
        if self.options.TEST:
            test = read_csv(self.options.TEST, response=False)
            if train.split is not None:
                train = train.train_test()[0]
        else:
            train, test = train.train_test()
        if test.d != train.d:
            raise ConfigError(f"test locations have dimension {test.d}, training has {train.d}")
        if (train.X is None) != (test.X is None) or (
            train.X is not None and test.X is not None and train.X.shape[1] != test.X.shape[1]
        ):
            raise ConfigError("training and test files have different covariate columns")
        if test.n == 0:
            raise ConfigError("no prediction locations")
        return train, test

    def _cmd_predict(self, run: RunConfig) -> None:

        # pylint: disable=too-many-locals

        train, test = self._predict_data()
        locs = train.locs(self.workers)
        kernel = run.kernel_spec()
        params, gamma = self._load_fit(run)
        params = params or run.cov_params()
        taper = TaperSpec(gamma, run.taper.family) if gamma else run.taper_spec(locs.n)
        inducing = run.select_inducing(locs)
        model = assemble(locs, inducing, params, kernel, taper)

        backend, cfg = run.solver.backend, run.cg_config()
        if train.X is not None and params.beta.size != train.X.shape[1]:
            ev = evaluate(
                model,
                train.y,
                train.X,
                backend,
                run.solver.precond,
                cfg,
                with_grad=False,
                piv_chol_rank=run.solver.piv_chol_rank,
            )
            params = params.with_(beta=ev.beta)
            model = assemble(locs, inducing, params, kernel, taper, model.pattern)

        pred = run.prediction
        method = self.options.var_method or pred.var_method
        num_probes = self.options.num_probes or pred.num_probes
        out = predict(
            model,
            prediction_inputs(model, LocationSet(test.coords, self.workers), test.X),
            train.y,
            train.X,
            method=method,
            backend=backend,
            precond_kind=run.solver.precond,
            cfg=replace(cfg, num_probes=num_probes),
            cv=pred.cv,
            lanczos_rank=pred.lanczos_rank,
        )

        frame = pd.DataFrame({f"x{i + 1}": test.coords[:, i] for i in range(test.d)})
        frame["mean"] = out.mean
        frame["var"] = out.var
        if test.has_response:
            frame["y"] = test.y
        if self.options.out:
            write_csv(frame, self.options.out)
        else:
            write_csv(frame, sys.stdout)

        if test.has_response:
            scores = score(test.y, out.mean, out.var)
            print(
                f"rmse={scores['rmse']:.6g} log_score={scores['log_score']:.6g}"
                f" crps={scores['crps']:.6g} var_method={out.method}",
                file=sys.stdout if self.options.out else sys.stderr,
            )

    def _cmd_bench_precond(self, run: RunConfig) -> None:

        b, p = run.bench, run.params
        nll_reps = self.options.nll_reps if self.options.nll_reps is not None else b.nll_reps
        iters, variance = bench_precond(
            b.n,
            b.m,
            b.n_gamma,
            b.effective_range,
            b.preconds,
            run.kernel_spec(),
            sigma2=p.sigma2,
            sigma1_2=p.sigma1_2,
            piv_chol_ranks=b.piv_chol_ranks,
            cfg=run.cg_config(),
            nll_reps=nll_reps,
            seed=run.simulate.seed,
            workers=self.workers,
        )
        self._write_or_print(iters, self.options.out)
        if variance is not None:
            print()
            self._write_or_print(variance, self.options.variance_out)

    def _observations(self, run: RunConfig, n: int) -> Dataset:
        """Read DATA, or simulate `n` observations from the [params] section."""

        if self.options.DATA:
            data = read_csv(self.options.DATA)
            return data.train_test()[0] if data.split is not None else data
        p = run.params
        return simulate(
            n, p.sigma2, p.sigma1_2, run.rho(), run.kernel_spec(), seed=run.simulate.seed
        )

    def _cmd_sweep_fsa(self, run: RunConfig) -> None:

        data = self._observations(run, run.simulate.n)
        frame = sweep_fsa(
            data.locs(self.workers),
            data.y,
            data.X,
            run.cov_params(),
            run.kernel_spec(),
            run.bench.sweep_m,
            run.bench.sweep_n_gamma,
            run.inducing.method,
            run.inducing.seed,
        )
        self._write_or_print(frame, self.options.out)

    def _cmd_vecchia_bench(self, run: RunConfig) -> None:

        v = run.vecchia
        data = self._observations(run, v.n)
        locs = data.locs(self.workers)
        y = data.y - np.mean(data.y)
        frame = vecchia_bench(
            locs,
            y,
            run.cov_params(),
            run.kernel_spec(),
            v.m_v,
            v.preconds,
            v.num_probes,
            v.reps,
            select_inducing(locs, min(v.m, locs.n), run.inducing.method, run.inducing.seed),
            run.cg_config(),
            run.simulate.seed,
        )
        self._write_or_print(frame, self.options.out)

    def _print_sample_config(self) -> None:

        print(
            self.dedent(
                """
    # Sample configuration; every key shows its default value.
    # Flags such as `--backend`, `--precond` and `--set SECTION.KEY=VALUE` override it.
                """
            )
        )
        print(RunConfig().to_toml())


def main(args: list[str] | None = None) -> None:
    """Command line interface entry point (function)."""
    FsaCLI(args).main()
