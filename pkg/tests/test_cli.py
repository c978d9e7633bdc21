import csv

import numpy as np
import pytest

from perimeter_deepc import cli, mfd, partition as pt, scenario

import oracles


def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    cap = capsys.readouterr()
    out = cap.out.strip().splitlines()
    run_cli.err = cap.err
    return code, (out[-1] if out else "")


def fields(line):
    return dict(kv.split("=", 1) for kv in line.split())


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Collect and fit once; later tests reuse the artifacts."""
    root = tmp_path_factory.mktemp("pipe")
    cfg = scenario.stress_scenario(horizon_cycles=12, output_dir=str(root / "default"))
    cfg.save(root / "scenario.json")
    assert cli.main(["collect", str(root / "scenario.json"), "--out", str(root / "data")]) == 0
    scatters = sorted((root / "data").glob("scatter_*.csv"))
    assert cli.main(["fit-mfd", *map(str, scatters), "--out", str(root / "fit")]) == 0
    return root


def test_collect_writes_full_data_set(pipeline):
    rows = (pipeline / "data" / "data.csv").read_text().splitlines()
    assert len(rows) == 401
    assert rows[0].startswith("t,u1")


def test_collect_is_byte_deterministic(pipeline, tmp_path, capsys):
    code, line = run_cli(capsys, "collect", pipeline / "scenario.json", "--out", tmp_path)
    assert code == 0 and fields(line)["pe"] == "1" and fields(line)["status"] == "ok"
    assert (tmp_path / "data.csv").read_bytes() == (pipeline / "data" / "data.csv").read_bytes()


def test_collect_refuses_short_records(pipeline, tmp_path, capsys):
    code, line = run_cli(capsys, "collect", pipeline / "scenario.json", "--steps", 5, "--out", tmp_path)
    assert code == cli.EXIT_CONFIG and fields(line)["status"] == "config_error"


def test_fit_summary_reports_densities(tmp_path, capsys):
    rng = np.random.default_rng(2)
    r = rng.uniform(0, 80, 300)
    q = np.maximum(r * (80 - r) * (1 + 0.03 * rng.standard_normal(300)), 0.0)
    mfd.write_scatter_csv(tmp_path / "scatter_zone.csv", np.c_[r, q])
    code, line = run_cli(capsys, "fit-mfd", tmp_path / "scatter_zone.csv", "--out", tmp_path)
    f = fields(line)
    assert code == 0 and f["regions"] == "zone"
    assert float(f["rho_cr"]) == pytest.approx(40, rel=0.05)
    assert float(f["rho_max"]) == pytest.approx(80, rel=0.05)
    assert (tmp_path / "mfd_fit.csv").read_text().startswith("region,rho_cr,rho_max,rmse\n")


def test_malformed_scatter_is_config_error(tmp_path, capsys):
    (tmp_path / "bad.csv").write_text("density,flow\n1,2\n2,x\n")
    code, _ = run_cli(capsys, "fit-mfd", tmp_path / "bad.csv", "--out", tmp_path)
    assert code == cli.EXIT_CONFIG
    assert ":3:" in run_cli.err


def test_all_zero_scatter_is_domain_error(tmp_path, capsys):
    mfd.write_scatter_csv(tmp_path / "z.csv", np.c_[np.linspace(0, 1, 20), np.zeros(20)])
    code, line = run_cli(capsys, "fit-mfd", tmp_path / "z.csv", "--out", tmp_path)
    assert code == cli.EXIT_DOMAIN and fields(line)["status"] == "domain_error"


def test_partition_matches_oracle(tmp_path, capsys):
    rho, edges = oracles.two_level_fixture(np.random.default_rng(12), n_roads=12)
    g = pt.RoadGraph.from_edges(rho, edges)
    pt.write_roads_csv(tmp_path / "roads.csv", tmp_path / "edges.csv", g)
    code, line = run_cli(capsys, "partition", tmp_path / "roads.csv", tmp_path / "edges.csv",
                         "--regions", 2, "--out", tmp_path)
    assert code == 0 and fields(line)["roads"] == "12"
    with open(tmp_path / "assignment.csv") as fh:
        labels = np.array([int(r["region"]) for r in csv.DictReader(fh)])
    want, _ = oracles.best_connected_bipartition(rho, g.neighbors)
    assert np.array_equal(labels == labels[0], want == want[0])


def test_run_and_analyze_baseline(pipeline, tmp_path, capsys):
    code, line = run_cli(capsys, "run", pipeline / "scenario.json", "--controller", "baseline", "--out", tmp_path)
    assert code == 0 and fields(line)["controller"] == "baseline"
    code, line = run_cli(capsys, "analyze", tmp_path)
    assert code == 0
    for name in ("pca_components.csv", "loadings.csv", "metrics_summary.csv", "mfd_comparison.csv"):
        assert (tmp_path / name).exists()


def test_deepc_sweep_writes_one_run_per_period(pipeline, tmp_path, capsys):
    code, line = run_cli(capsys, "run", pipeline / "scenario.json", "--controller", "deepc",
                         "--data", pipeline / "data" / "data.csv", "--reference", pipeline / "fit" / "mfd_fit.csv",
                         "--sweep", "1,3", "--out", tmp_path)
    assert code == 0, line
    assert fields(line)["periods"] == "1;3"
    for p in (1, 3):
        assert (tmp_path / f"period_{p}" / "run.csv").exists()


def test_deepc_without_data_is_config_error(pipeline, tmp_path, capsys):
    code, _ = run_cli(capsys, "run", pipeline / "scenario.json", "--controller", "deepc", "--out", tmp_path)
    assert code == cli.EXIT_CONFIG
    code, _ = run_cli(capsys, "run", pipeline / "scenario.json", "--controller", "deepc",
                      "--data", pipeline / "data" / "data.csv", "--out", tmp_path)
    assert code == cli.EXIT_CONFIG


def test_bad_config_and_arguments(tmp_path, capsys):
    (tmp_path / "broken.json").write_text("{\n  \"name\": \n}")
    code, _ = run_cli(capsys, "run", tmp_path / "broken.json")
    assert code == cli.EXIT_CONFIG
    assert "broken.json:3" in run_cli.err
    assert cli.main(["no-such-command"]) == cli.EXIT_CONFIG
    capsys.readouterr()
    code, _ = run_cli(capsys, "analyze", tmp_path / "missing")
    assert code == cli.EXIT_CONFIG


def test_config_round_trip(tmp_path):
    cfg = scenario.stress_scenario()
    cfg.save(tmp_path / "a.json")
    again = scenario.ScenarioConfig.load(tmp_path / "a.json")
    assert again == cfg
    assert again.dumps() == cfg.dumps()
