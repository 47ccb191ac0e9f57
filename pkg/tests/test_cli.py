import csv
import json

import pytest

from crevam.cli import main
from crevam.data import Schema, parse_long_csv


@pytest.fixture(scope="module")
def cohort_csv(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    path = d / "cohort.csv"
    assert main(["simulate", "--n", "120", "--T", "2", "--m", "5", "--mechanism", "MNAR-t", "--seed", "3",
                 "--out", str(path)]) == 0
    return path


def test_simulate_writes_cohort_and_truth(cohort_csv, capsys):
    with open(cohort_csv, "rb") as fh:
        c = parse_long_csv(fh, Schema(), 2)
    assert c.n == 120
    truth = json.loads(cohort_csv.with_suffix(".truth.json").read_text())
    assert truth["mechanism"] == "MNAR-t" and truth["m"] == [5, 5]
    assert "params" in truth


def test_fit(cohort_csv, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["fit", str(cohort_csv), "--T", "2", "--mechanism", "MNAR-t", "--out", str(out)]) == 0
    payload = json.loads((out / "params.json").read_text())
    assert payload["converged"] and payload["mechanism"] == "MNAR-t"
    with open(out / "eblups.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {"effect_id", "year", "type", "value", "sd", "lower", "upper", "classification"} <= set(rows[0])
    assert "MNAR-t" in capsys.readouterr().out

    # the report subcommand reads the run directory back
    assert main(["report", str(out)]) == 0
    assert "MNAR-t" in capsys.readouterr().out


def test_iteration_cap_exit_code(cohort_csv, tmp_path):
    assert main(["fit", str(cohort_csv), "--T", "2", "--max-iter", "2", "--no-se",
                 "--out", str(tmp_path / "r")]) == 2


def test_input_errors(tmp_path, capsys):
    assert main(["fit", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "r")]) == 1
    bad = tmp_path / "bad.csv"
    bad.write_text("student_id,year,teacher_id,score\ns1,1,t1,abc\n")
    assert main(["fit", str(bad), "--out", str(tmp_path / "r")]) == 1
    cfg = tmp_path / "x.cfg"
    cfg.write_text("colour = blue\n")
    assert main(["fit", str(bad), "--config", str(cfg)]) == 1
    assert "error:" in capsys.readouterr().err


def test_sensitivity(cohort_csv, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("T = 2\ncompute_se = no\n")
    out = tmp_path / "sens"
    assert main(["sensitivity", str(cohort_csv), "--config", str(cfg), "--mechanisms", "MAR,MNAR-t",
                 "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert set(report["models"]) == {"MAR", "MNAR-t"}
    assert (out / "quartiles_MNAR-t.csv").exists() and (out / "ci_MNAR-t.csv").exists()
    assert "comparison effect: 1 on 2" in capsys.readouterr().out


def test_oracle(tmp_path, capsys):
    path = tmp_path / "tiny.csv"
    assert main(["simulate", "--n", "3", "--T", "1", "--m", "1", "--mechanism", "MAR", "--out", str(path)]) == 0
    run = tmp_path / "run"
    assert main(["fit", str(path), "--T", "1", "--no-se", "--out", str(run)]) in (0, 2)
    capsys.readouterr()
    assert main(["oracle", str(path), "--T", "1", "--params", str(run / "params.json"),
                 "--qmc-points", "1024"]) == 0
    out = capsys.readouterr().out
    lap = float(out.split("laplace")[1].split()[0])
    closed = float(out.split("closed form")[1].split()[0])
    assert lap == pytest.approx(closed, abs=1e-8)
    assert "quadrature" in out and "qmc" in out
