import json

import pytest

from lineident.cli import EXIT_ANALYSIS, EXIT_IDENTIFY, EXIT_OK, EXIT_USAGE, main, manifest_path

SIM = ["--warmup", "100", "--horizon", "1000", "--reps", "1"]
PSO = {"K_p": 20, "K_n0": 3, "J_max": 30, "D": 4, "D_n": 2, "stall_patience": 10, "adapt_every_iteration": True}


def run_pipeline(d):
    d.mkdir(exist_ok=True)
    (d / "pso.json").write_text(json.dumps(PSO))
    steps = [
        ["gen-lines", "--m", "3", "--count", "150", "--seed", "4", "--out", str(d / "lines.csv")],
        ["build-dataset", "--lines", str(d / "lines.csv"), *SIM, "--seed", "2", "--out", str(d / "data.csv")],
        ["train", "--dataset", str(d / "data.csv"), "--max-iter", "5", "--hidden", "4", "--out-bundle", str(d / "bundle.json")],
        ["observe", "--lines", str(d / "lines.csv"), "--line-index", "3", *SIM, "--out", str(d / "targets.json")],
        ["identify", "--bundle", str(d / "bundle.json"), "--targets", str(d / "targets.json"),
         "--pso-config", str(d / "pso.json"), "--seed", "1", "--out", str(d / "result.json")],
        ["sensitivity", "--true-line", str(d / "lines.csv"), "--line-index", "3", "--results", str(d / "result.json"),
         "--scenarios", "double-one-N:1", *SIM, "--out", str(d / "sens.csv")],
    ]
    codes = [main(s) for s in steps]
    return codes


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    a = tmp_path_factory.mktemp("run_a")
    b = tmp_path_factory.mktemp("run_b")
    return a, run_pipeline(a), b, run_pipeline(b)


def test_pipeline_runs(pipeline):
    a, codes, _, _ = pipeline
    # sensitivity exits 6 when no estimate is valid, which an undertrained bundle may cause
    assert codes[:5] == [EXIT_OK] * 5
    assert codes[5] in (EXIT_OK, EXIT_ANALYSIS)
    res = json.loads((a / "result.json").read_text())
    assert len(res["solutions"]) == PSO["D"]
    assert res["targets"]["N"] == json.loads((a / "targets.json").read_text())["N"]


def test_outputs_are_byte_identical(pipeline):
    a, _, b, _ = pipeline
    for name in ("lines.csv", "data.csv", "bundle.json", "bundle.errors.json", "targets.json", "result.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_manifest_records_defaults_and_digests(pipeline):
    a, _, _, _ = pipeline
    man = json.loads(manifest_path(a / "data.csv").read_text())
    assert man["command"] == "build-dataset"
    assert man["config"]["sim"] == {"warmup": 100, "horizon": 1000, "replications": 1, "base_seed": 2}
    assert str(a / "lines.csv") in man["inputs"]
    train = json.loads(manifest_path(a / "bundle.json").read_text())
    # unspecified knobs are echoed with their defaults
    assert train["config"]["train"]["l2"] == 1e-4
    assert train["config"]["split"] == 0.75
    ident = json.loads(manifest_path(a / "result.json").read_text())
    assert ident["config"]["pso"]["K_p"] == 20 and ident["config"]["pso"]["W"] == 1.1
    assert "wall_clock_s" in man


def test_usage_errors(tmp_path, capsys):
    assert main(["gen-lines", "--m", "3", "--count", "5"]) == EXIT_USAGE
    assert main(["gen-lines", "--m", "3", "--count", "0", "--out", str(tmp_path / "x.csv")]) == EXIT_USAGE
    assert main(["gen-lines", "--m", "1", "--count", "5", "--out", str(tmp_path / "x.csv")]) == EXIT_USAGE
    assert main(["no-such-command"]) == EXIT_USAGE
    assert main(["build-dataset", "--lines", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "d.csv")]) == EXIT_USAGE
    assert main(["--threads", "0", "gen-lines", "--m", "3", "--count", "5", "--out", str(tmp_path / "x.csv")]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_identify_flag_conflicts(pipeline, tmp_path):
    a, _, _, _ = pipeline
    base = ["identify", "--bundle", str(a / "bundle.json"), "--targets", str(a / "targets.json"), "--out", str(tmp_path / "r.json")]
    assert main(base + ["--t-bar", "9"]) == EXIT_USAGE
    assert main(base + ["--t-bar", "9", "--cv-bar", "0.5", "--exponential"]) == EXIT_USAGE
    assert main(base + ["--pso-config", str(tmp_path / "missing.json")]) == EXIT_USAGE


def test_require_valid_exit_code(pipeline, tmp_path):
    a, _, _, _ = pipeline
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps({"K_p": 5, "K_n0": 1, "J_max": 0, "D": 1, "D_n": 1}))
    bounds = tmp_path / "bounds.json"
    # a box far from anything plausible cannot reach the validity threshold
    bounds.write_text(json.dumps({"e": [0.7, 0.701], "T_down": [19.9, 20.0], "cv": [0.99, 1.0]}))
    code = main([
        "identify", "--bundle", str(a / "bundle.json"), "--targets", str(a / "targets.json"), "--pso-config", str(cfg),
        "--bounds", str(bounds), "--require-valid", "--out", str(tmp_path / "r.json"),
    ])
    assert code == EXIT_IDENTIFY
    assert (tmp_path / "r.json").exists()


def test_analyze_exits_6_without_enough_valid(tmp_path):
    res = {
        "solutions": [[0.8] * 3 + [5.0] * 3 + [0.5] * 6] * 2,
        "valid": [True, False],
        "config": {"bounds": {"T_down": [2, 20]}},
    }
    (tmp_path / "r.json").write_text(json.dumps(res))
    code = main(["analyze", "--results", str(tmp_path / "r.json"), "--points", str(tmp_path / "p.csv"), "--out", str(tmp_path / "a.json")])
    assert code == EXIT_ANALYSIS
    report = json.loads((tmp_path / "a.json").read_text())
    assert "error" in report["results"][0]
    assert len((tmp_path / "p.csv").read_text().splitlines()) == 3


def test_analyze_fits_valid_cloud(tmp_path):
    sols = [[0.8] * 3 + [t] * 3 + [1.2 - 0.05 * t] * 6 for t in (4.0, 6.0, 8.0, 10.0)]
    res = {"solutions": sols, "valid": [True] * 4, "config": {"bounds": {"T_down": [2, 20]}}}
    (tmp_path / "r.json").write_text(json.dumps(res))
    assert main(["analyze", "--results", str(tmp_path / "r.json"), "--out", str(tmp_path / "a.json")]) == EXIT_OK
    entry = json.loads((tmp_path / "a.json").read_text())["results"][0]
    assert entry["fit"]["overall"]["b1"] == pytest.approx(-0.05)
    assert entry["exp_feasibility"]["feasible"] and entry["exp_feasibility"]["T_bar"] == pytest.approx(4.0)
