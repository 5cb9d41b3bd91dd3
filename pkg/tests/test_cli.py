import io
import json
import sys
import tomllib
from pathlib import Path
from subprocess import run

import pandas as pd
import pytest

from fsagp.cli import EXIT_CONFIG, EXIT_NUMERICAL, main

SMALL = [
    "--set",
    "inducing.m=10",
    "--set",
    "taper.n_gamma=10",
    "--set",
    "params.rho=0.1",
]


def test_main() -> None:

    def _main() -> None:
        run([sys.executable, "-m", "fsagp", "--version"], check=True)
        sys.exit(0)

    with pytest.raises(SystemExit) as err:
        _main()
    assert err.value.code == 0


def test_version() -> None:
    with pytest.raises(SystemExit) as err:
        main(["--version"])
    assert err.value.code == 0


def test_help() -> None:
    with pytest.raises(SystemExit) as err:
        main(["--help"])
    assert err.value.code == 0


def test_threads_help_names_its_scope(capsys: pytest.CaptureFixture[str]) -> None:
    with pytest.raises(SystemExit) as err:
        main(["--help"])
    assert err.value.code == 0
    text = " ".join(capsys.readouterr().out.split())
    assert "k-d tree neighbor searches" in text
    assert "OMP_NUM_THREADS" in text


def test_md_help() -> None:
    with pytest.raises(SystemExit) as err:
        main(["--md-help"])
    assert err.value.code == 0


def test_bogus_option() -> None:
    with pytest.raises(SystemExit) as err:
        main(["--bogus-option"])
    assert err.value.code == 2


def test_print_config() -> None:
    with pytest.raises(SystemExit) as err:
        main(["--print-config"])
    assert err.value.code == 0


def test_print_sample_config(capsys: pytest.CaptureFixture[str]) -> None:
    with pytest.raises(SystemExit) as err:
        main(["--print-sample-config"])
    assert err.value.code == 0
    sample = tomllib.loads(capsys.readouterr().out)
    assert sample["solver"]["precond"] == "fitc"
    assert sample["taper"]["n_gamma"] == 20.0


def test_command_required() -> None:
    with pytest.raises(SystemExit) as err:
        main([])
    assert err.value.code == 2


def _simulate(tmp_path: Path, *extra: str) -> Path:
    out = tmp_path / "data.csv"
    main(["--seed", "1", *SMALL, "simulate", "--n", "80", *extra, str(out)])
    return out


def test_simulate(tmp_path: Path) -> None:
    out = _simulate(tmp_path, "--test-fraction", "0.25")
    frame = pd.read_csv(out)
    assert list(frame.columns) == ["x1", "x2", "y", "split"]
    assert len(frame) == 80
    assert (frame["split"] == "test").sum() == 20


def test_fit_and_predict(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    data = _simulate(tmp_path, "--test-fraction", "0.25")
    fitted = tmp_path / "fit.json"
    main([*SMALL, "fit", str(data), "--out", str(fitted)])
    result = json.loads(fitted.read_text(encoding="utf-8"))
    assert set(result["params"]) == {"sigma2", "sigma1_2", "rho", "beta"}
    assert result["model"]["n"] == 60
    assert result["model"]["m"] == 10

    preds = tmp_path / "pred.csv"
    main([*SMALL, "predict", str(data), "--fit", str(fitted), "--out", str(preds)])
    frame = pd.read_csv(preds)
    assert list(frame.columns) == ["x1", "x2", "mean", "var", "y"]
    assert len(frame) == 20
    assert (frame["var"] > 0).all()
    assert "rmse=" in capsys.readouterr().out


def test_predict_separate_locations(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    data = _simulate(tmp_path)
    test = tmp_path / "test.csv"
    test.write_text("x1,x2\n0.5,0.5\n0.1,0.9\n", encoding="utf-8")
    main([*SMALL, "--backend", "iterative", "predict", str(data), str(test)])
    frame = pd.read_csv(io.StringIO(capsys.readouterr().out))
    assert list(frame.columns) == ["x1", "x2", "mean", "var"]
    assert len(frame) == 2


def test_predict_dimension_mismatch(tmp_path: Path) -> None:
    data = _simulate(tmp_path)
    test = tmp_path / "test.csv"
    test.write_text("x1,x2,x3\n0.5,0.5,0.5\n", encoding="utf-8")
    with pytest.raises(SystemExit) as err:
        main([*SMALL, "predict", str(data), str(test)])
    assert err.value.code == EXIT_CONFIG


def test_missing_column_is_config_error(tmp_path: Path) -> None:
    bad = tmp_path / "bad.csv"
    bad.write_text("x1,x2\n0.1,0.2\n", encoding="utf-8")
    with pytest.raises(SystemExit) as err:
        main(["fit", str(bad)])
    assert err.value.code == EXIT_CONFIG


def test_unknown_config_key(tmp_path: Path) -> None:
    with pytest.raises(SystemExit) as err:
        main(["--set", "solver.tolerance=1", "simulate", str(tmp_path / "x.csv")])
    assert err.value.code == EXIT_CONFIG


def test_numerical_error_exit_status(tmp_path: Path) -> None:
    data = _simulate(tmp_path, "--test-fraction", "0.25")
    args = [*SMALL, "--set", "prediction.lanczos_rank=1000"]
    with pytest.raises(SystemExit) as err:
        main([*args, "predict", str(data), "--var-method", "lanczos"])
    assert err.value.code == EXIT_NUMERICAL


def test_sweep_fsa(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    data = _simulate(tmp_path)
    out = tmp_path / "sweep.csv"
    grid = ["--set", "bench.sweep_m=5,10", "--set", "bench.sweep_n_gamma=5,10"]
    main([*SMALL, *grid, "sweep-fsa", str(data), "--out", str(out)])
    assert capsys.readouterr().out.startswith("| m | n_gamma |")
    assert len(pd.read_csv(out)) == 4


def test_bench_precond(capsys: pytest.CaptureFixture[str]) -> None:
    grid = [
        "--set",
        "bench.n=150",
        "--set",
        "bench.m=10",
        "--set",
        "bench.n_gamma=10",
        "--set",
        "bench.piv_chol_ranks=5",
    ]
    main([*grid, "bench-precond", "--nll-reps", "2"])
    out = capsys.readouterr().out
    assert "piv-chol(k=5)" in out
    assert "median_rel_err" in out


def test_vecchia_bench(tmp_path: Path) -> None:
    out = tmp_path / "vecchia.csv"
    grid = [
        "--set",
        "vecchia.n=100",
        "--set",
        "vecchia.m_v=5",
        "--set",
        "vecchia.num_probes=5",
        "--set",
        "vecchia.reps=2",
        "--set",
        "vecchia.m=10",
    ]
    main([*grid, "vecchia-bench", "--out", str(out)])
    frame = pd.read_csv(out)
    assert frame["precond"].tolist() == ["none", "fitc", "obs-vecchia"]
