import json
import re
from pathlib import Path

import pytest

from strata_bounds.cli import main

CONFIG = {
    "n_schools": 20,
    "students_per_school": [30, 4],
    "track_mix": {"V:BL": 0.5, "A:HAVO": 0.5},
    "seed": 7,
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "config.json"
    config.write_text(json.dumps(CONFIG))
    data = root / "data"
    code = main(["simulate", "--out", str(data), "--config", str(config)])
    assert code == 0
    return root


def run(workdir, *argv):
    return main(
        [
            argv[0],
            "--input",
            str(workdir / "data" / "data.csv"),
            "--schema",
            str(workdir / "data" / "schema.json"),
            "--reps",
            "10",
            *argv[1:],
        ]
    )


def test_simulate_is_byte_identical(workdir, tmp_path, capsys):
    config = workdir / "config.json"
    for name in ("a", "b"):
        assert main(["simulate", "--out", str(tmp_path / name), "--config", str(config)]) == 0
    out = capsys.readouterr().out
    assert "simulated population" in out
    for name in ("data.csv", "schema.json", "truth.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert not (tmp_path / "a" / "latent.csv").exists()
    assert main(
        ["simulate", "--out", str(tmp_path / "c"), "--config", str(config), "--debug-labels"]
    ) == 0
    assert (tmp_path / "c" / "latent.csv").exists()


def test_simulate_seed_override(workdir, tmp_path):
    config = workdir / "config.json"
    assert main(
        ["simulate", "--out", str(tmp_path / "d"), "--config", str(config), "--seed", "8"]
    ) == 0
    base = (workdir / "data" / "data.csv").read_bytes()
    assert (tmp_path / "d" / "data.csv").read_bytes() != base


def test_apce_outputs_and_determinism(workdir, tmp_path, capsys):
    for name in ("r1", "r2"):
        code = run(workdir, "apce", "--out", str(tmp_path / name), "--seed", "3")
        assert code == 0
    out = capsys.readouterr().out
    assert "stratum intervals" in out
    assert re.search(r"\d\.\d{4}", out)
    for name in ("apce_cells.csv", "apce_aggregates.csv", "apce_skipped.csv", "tables.json"):
        assert (tmp_path / "r1" / name).exists()
    assert (tmp_path / "r1" / "tables.json").read_bytes() == (
        tmp_path / "r2" / "tables.json"
    ).read_bytes()
    bundle = json.loads((tmp_path / "r1" / "tables.json").read_text())
    assert set(bundle) == {"apce_cells", "apce_aggregates", "apce_skipped"}


def test_apce_points_flag(workdir, tmp_path, capsys):
    assert run(workdir, "apce", "--points", "--out", str(tmp_path / "p")) == 0
    assert "point estimates" in capsys.readouterr().out
    bundle = json.loads((tmp_path / "p" / "tables.json").read_text())
    assert "apce_points" in bundle


def test_balance_with_inferred_schema(workdir, capsys):
    code = main(
        ["balance", "--input", str(workdir / "data" / "data.csv"), "--reps", "10"]
    )
    assert code == 0
    assert "covariate balance" in capsys.readouterr().out


def test_loss_grid_and_modes(workdir, capsys):
    assert run(workdir, "loss", "--grid", "0:1:0.5", "--p-mode", "percentile") == 0
    out = capsys.readouterr().out
    assert "loss comparison" in out
    assert run(workdir, "loss", "--grid", "0:1") == 2


def test_sensitivity_modes(workdir, capsys):
    assert run(workdir, "sensitivity", "--eta", "fixed=0.02") == 0
    out = capsys.readouterr().out
    assert "direct effect" in out and "relaxed intervals" in out
    assert run(workdir, "sensitivity", "--eta", "sweep=0:0.04:0.02") == 0
    out = capsys.readouterr().out
    assert "direct effect" not in out and "relaxed intervals" in out


def test_fairness_command(workdir, capsys):
    assert run(workdir, "fairness", "--attribute", "subgroup") == 0
    assert "fairness contrasts" in capsys.readouterr().out


def test_report_bundles_everything(workdir, tmp_path, capsys):
    code = run(
        workdir, "report", "--attribute", "subgroup", "--out", str(tmp_path / "rep")
    )
    assert code == 0
    bundle = json.loads((tmp_path / "rep" / "tables.json").read_text())
    assert set(bundle) == {
        "balance",
        "first_stage",
        "apce_cells",
        "apce_aggregates",
        "apce_skipped",
        "loss",
        "sensitivity_eta",
        "sensitivity",
        "apce_points",
        "fairness",
    }
    # NaNs must serialize as nulls, not as bare NaN tokens
    assert "NaN" not in (tmp_path / "rep" / "tables.json").read_text()


def test_bad_eta_exits_2_with_json_error(workdir, capsys):
    assert run(workdir, "sensitivity", "--eta", "later") == 2
    err = capsys.readouterr().err
    payload = json.loads(err.strip().splitlines()[-1])
    assert payload["error"] == "ConfigError"
    assert "--eta" in payload["message"]


def test_impossible_min_cell_exits_3(workdir, capsys):
    assert run(workdir, "apce", "--min-cell", "1000000") == 3
    payload = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert payload["error"] == "EstimationError"


def test_missing_input_exits_4(tmp_path, capsys):
    assert main(["balance", "--input", str(tmp_path / "nope.csv"), "--reps", "5"]) == 4
    payload = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert payload["error"] == "FileNotFoundError"


def test_bad_choice_is_a_usage_error(workdir):
    with pytest.raises(SystemExit):
        run(workdir, "apce", "--adjust", "everything")
    with pytest.raises(SystemExit):
        main(["no_such_command"])


def test_rejected_rows_are_reported_and_written(workdir, tmp_path, capsys):
    src = (workdir / "data" / "data.csv").read_text().splitlines()
    header = src[0].split(",")
    bad = src[1].split(",")
    bad[header.index("score")] = "999"
    mangled = tmp_path / "mangled.csv"
    mangled.write_text("\n".join([src[0], ",".join(bad)] + src[2:]) + "\n")
    code = main(
        [
            "balance",
            "--input",
            str(mangled),
            "--schema",
            str(workdir / "data" / "schema.json"),
            "--reps",
            "5",
            "--out",
            str(tmp_path / "out"),
        ]
    )
    assert code == 0
    assert "1 rows rejected" in capsys.readouterr().err
    lines = (tmp_path / "out" / "rejected_rows.jsonl").read_text().splitlines()
    assert len(lines) == 1
    assert json.loads(lines[0])["line"] == 2
