import csv
import json
from pathlib import Path
from unittest import mock

import numpy as np
import pytest
from scipy import special, stats

from pflalign_sim.analysis.verify import CHECKS
from pflalign_sim.cli import COMPARE_COLUMNS, build_parser, main
from pflalign_sim.export import METRIC_COLUMNS, RunManifest

CONFIG_DIR = Path(__file__).parent.parent / "configs"
SMOKE = CONFIG_DIR / "smoke.json"


def read_csv(path: Path) -> list[dict]:
    with path.open(newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture
def write_config(tmp_path):
    def write(mutate):
        raw = json.loads(SMOKE.read_text())
        mutate(raw)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(raw))
        return path

    return write


def test_smoke_run(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--config", str(SMOKE), "--out", str(out)]) == 0

    rows = read_csv(out / "metrics.csv")
    assert len(rows) == 1
    assert tuple(rows[0]) == METRIC_COLUMNS
    assert rows[0]["round"] == "0"
    assert rows[0]["test_acc"] == ""
    assert float(rows[0]["train_loss"]) >= 0

    summary = json.loads((out / "summary.json").read_text())
    assert summary["algorithm"] == "fedavg"
    assert summary["rounds"] == 1
    assert len(summary["initial"]) == 1
    assert summary["config"]["fl"]["algorithm"] == "fedavg"

    traces = json.loads((out / "traces.json").read_text())
    assert len(traces[0]["clients"][0]["loss"]) == 5

    manifest = RunManifest.read(out / "manifest.json")
    assert set(manifest.outputs) == {"metrics", "summary", "traces"}
    assert manifest.finished_at is not None


def test_repeated_runs_are_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["run", "--config", str(SMOKE), "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (
        tmp_path / "b" / "metrics.csv"
    ).read_bytes()


def test_threads_do_not_change_results(tmp_path, write_config):
    def three_clients(raw):
        raw["data"]["num_clients"] = 3
        raw["fl"]["num_clients"] = 3
        raw["fl"]["rounds"] = 2
        raw["fl"]["algorithm"] = "pflalign"

    config = write_config(three_clients)
    for name, threads in (("serial", "1"), ("pooled", "3")):
        args = ["run", "--config", str(config), "--out", str(tmp_path / name)]
        assert main([*args, "--threads", threads]) == 0
    assert (tmp_path / "serial" / "metrics.csv").read_bytes() == (
        tmp_path / "pooled" / "metrics.csv"
    ).read_bytes()


def test_missing_algorithm_exits_2(tmp_path, write_config, capsys):
    config = write_config(lambda raw: raw["fl"].pop("algorithm"))
    assert main(["run", "--config", str(config), "--out", str(tmp_path / "out")]) == 2
    err = capsys.readouterr().err
    assert "error: invalid config at fl: 'algorithm' is a required property" in err
    assert not (tmp_path / "out").exists()


def test_missing_config_file_exits_2(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2


def test_verify_subset(tmp_path):
    report = tmp_path / "report.json"
    code = main(["verify", "--out", str(report), "--checks", "gamma_range,svrg_unbiased"])
    assert code == 0
    records = json.loads(report.read_text())
    assert [r["check_name"] for r in records] == ["gamma_range", "svrg_unbiased"]
    assert all(r["pass"] for r in records)


def test_verify_unknown_check(tmp_path, capsys):
    code = main(["verify", "--out", str(tmp_path / "r.json"), "--checks", "nonsense"])
    assert code == 2
    assert "unknown checks: nonsense" in capsys.readouterr().err


def test_compare_identical_variants(tmp_path, write_config):
    def zero_mu(raw):
        raw["fl"]["local"] = {"prox_mu": 0.0}

    config = write_config(zero_mu)
    out = tmp_path / "compare"
    code = main(
        [
            "compare",
            "--config",
            str(config),
            "--algorithms",
            "fedavg,fedprox",
            "--seeds",
            "0",
            "--out",
            str(out),
        ]
    )
    assert code == 0

    rows = read_csv(out / "compare.csv")
    assert tuple(rows[0]) == COMPARE_COLUMNS
    by_algorithm = {r.pop("algorithm"): r for r in rows}
    assert by_algorithm["fedavg"] == by_algorithm["fedprox"]

    summary = json.loads((out / "compare_summary.json").read_text())
    assert summary["fair"] is True
    assert summary["seeds"] == [0]
    for entry in summary["algorithms"].values():
        assert entry["ci95_half_width"] is None
    assert (
        summary["algorithms"]["fedavg"]["mean_test_loss"]
        == summary["algorithms"]["fedprox"]["mean_test_loss"]
    )


def test_compare_learning_rate_grid(tmp_path):
    out = tmp_path / "grid"
    code = main(
        [
            "compare",
            "--config",
            str(SMOKE),
            "--algorithms",
            "fedavg",
            "--seeds",
            "0,1",
            "--lr-grid",
            "0.1,0.01",
            "--out",
            str(out),
        ]
    )
    assert code == 0
    summary = json.loads((out / "compare_summary.json").read_text())
    entry = summary["algorithms"]["fedavg"]
    assert entry["lr"] in (0.1, 0.01)
    assert len(entry["per_seed_mean_test_loss"]) == 2
    assert entry["ci95_half_width"] is not None
    assert {r["seed"] for r in read_csv(out / "compare.csv")} == {"0", "1"}


def test_compare_unknown_algorithm(tmp_path):
    args = ["compare", "--config", str(SMOKE), "--algorithms", "fedfoo", "--out", str(tmp_path)]
    assert main(args) == 2


def test_parser_lists():
    args = build_parser().parse_args(
        ["compare", "--config", "c.json", "--out", "o", "--seeds", "1, 2", "--lr-grid", "1e-2"]
    )
    assert args.seeds == [1, 2]
    assert args.lr_grid == [0.01]
    assert args.algorithms == []


def test_verify_reports_every_check(tmp_path):
    report = tmp_path / "report.json"
    assert main(["verify", "--out", str(report), "--threads", "2"]) == 0
    records = json.loads(report.read_text())
    assert [r["check_name"] for r in records] == [c.name for c in CHECKS]


def test_verify_with_broken_erf_exits_1(tmp_path):
    report = tmp_path / "report.json"
    with mock.patch("pflalign_sim.params.erf", side_effect=lambda x: special.erf(0.9 * np.asarray(x))):
        code = main(["verify", "--out", str(report), "--checks", "gamma_vs_monte_carlo"])
    assert code == 1
    assert json.loads(report.read_text())[0]["pass"] is False


def test_compare_three_seed_interval(tmp_path):
    out = tmp_path / "ci"
    args = ["compare", "--config", str(SMOKE), "--algorithms", "fedavg", "--seeds", "0,1,2"]
    assert main([*args, "--out", str(out)]) == 0
    entry = json.loads((out / "compare_summary.json").read_text())["algorithms"]["fedavg"]
    per_seed = np.array(entry["per_seed_mean_test_loss"])
    expected = stats.t.ppf(0.975, df=2) * per_seed.std(ddof=1) / np.sqrt(3)
    assert entry["ci95_half_width"] == pytest.approx(expected)
    assert entry["mean_test_loss"] == pytest.approx(per_seed.mean())
