import json
import subprocess
import sys

import pytest

from tsge.cli import build_parser, main
from tsge.pipeline import ExperimentPlan


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    main(["simulate", "--out-dir", str(d), "--snr-db", "15", "--seed", "4"])
    return d


def test_simulate_writes_files(simulated):
    doc = json.loads((simulated / "channel.json").read_text())
    assert doc["snr_db"] == 15.0 and doc["seed"] == 4
    lines = (simulated / "observation.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 666


def test_simulate_is_seeded(tmp_path):
    for name in ("a", "b"):
        main(["simulate", "--out-dir", str(tmp_path / name), "--seed", "9"])
    assert (tmp_path / "a" / "observation.csv").read_text() == (tmp_path / "b" / "observation.csv").read_text()


@pytest.mark.parametrize("scheme", ["turbo-bi", "tsgd", "igd"])
def test_estimate_schemes(simulated, tmp_path, scheme):
    out = tmp_path / "est.json"
    main(["estimate", "--channel", str(simulated / "channel.json"), "--observation",
          str(simulated / "observation.csv"), "--scheme", scheme, "--out", str(out)])
    doc = json.loads(out.read_text())
    assert doc["scheme"] == scheme
    assert doc["error_s"] < 5e-9


def test_estimate_tsge_with_trace(simulated, tmp_path):
    out, trace = tmp_path / "est.json", tmp_path / "trace.csv"
    main(["estimate", "--channel", str(simulated / "channel.json"), "--observation",
          str(simulated / "observation.csv"), "--particles", "30", "--iters", "60", "--e-tau", "4e-9",
          "--trace", str(trace), "--out", str(out), "--seed", "1"])
    doc = json.loads(out.read_text())
    assert {"coarse", "refined", "los_delay_s", "error_s"} <= set(doc)
    rows = trace.read_text().splitlines()
    assert rows[0] == "iter,gbest_fitness" and len(rows) > 2


def test_scan_likelihood_csv_and_metrics(simulated, tmp_path, capsys):
    truth = json.loads((simulated / "channel.json").read_text())["paths"][0]["tau_s"]
    out = tmp_path / "scan.csv"
    main(["scan-likelihood", "--channel", str(simulated / "channel.json"), "--model", "coarse",
          f"--range={truth - 50e-9}:{truth + 50e-9}:201", "--out", str(out)])
    rows = out.read_text().splitlines()
    assert rows[0] == "tau1_s,loglik" and len(rows) == 202
    info = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert info["truth_in_mainlobe"]


def test_scan_range_rejects_garbage():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["scan-likelihood", "--channel", "x", "--model", "coarse", "--range", "1:2"])


def test_benchmark_and_calibrate(tmp_path):
    plan = ExperimentPlan(values=[10.0], trials=2, schemes=["turbo_bi"], seed=2)
    (tmp_path / "plan.json").write_text(plan.to_json())
    for name in ("a", "b"):
        main(["benchmark", "--plan", str(tmp_path / "plan.json"), "--out-dir", str(tmp_path / name)])
    a = (tmp_path / "a" / "results.csv").read_text()
    assert a == (tmp_path / "b" / "results.csv").read_text()
    assert a.splitlines()[0] == "scheme,sweep_value,trial,error_s"
    out = tmp_path / "table.json"
    main(["calibrate-e", "--bandwidths", "40e6", "--snrs", "10", "--sigma-ps", "0", "--trials", "2",
          "--out", str(out)])
    entries = json.loads(out.read_text())["entries"]
    assert len(entries) == 1 and entries[0]["rmse_s"] > 0


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "tsge.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("simulate", "estimate", "benchmark", "scan-likelihood", "calibrate-e"):
        assert cmd in res.stdout
