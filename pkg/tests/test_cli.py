import json
import subprocess
import sys

import numpy as np
import pytest

from drsurv.cli import load_config, main
from drsurv.simlab import draw_dataset, read_raw_csv
from drsurv.survdata import SurvivalDataset, write_csv


@pytest.fixture
def hand_csv(tmp_path):
    path = tmp_path / "hand.csv"
    write_csv(SurvivalDataset(np.zeros((3, 1)), [1, 1, 1], [1, 0, 1], [1, 2, 3], 3, 3), path)
    return path


@pytest.fixture(scope="module")
def sim_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("sim") / "sim.csv"
    write_csv(draw_dataset(300, 17), path)
    return path


def test_km_on_hand_dataset(hand_csv, tmp_path, capsys):
    out = tmp_path / "km.json"
    assert main(["estimate", "--input", str(hand_csv), "--method", "km", "--tau", "3", "--output", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["arms"]["1"]["theta"] == 0.0
    assert capsys.readouterr().out.startswith("arm 1 km: theta=0.000000")


def test_unknown_method_is_usage_error(hand_csv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["estimate", "--input", str(hand_csv), "--method", "magic"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_parse_error_reports_line(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("w1,A,time,event\n0.1,1,2,1\n0.3,1,x,0\n")
    assert main(["estimate", "--input", str(bad), "--method", "km"]) == 2
    assert "line 3" in capsys.readouterr().err


def test_missing_input_and_bad_alpha(hand_csv):
    assert main(["estimate", "--method", "km"]) == 2
    assert main(["estimate", "--input", str(hand_csv), "--alpha", "1.5"]) == 2
    assert main(["estimate", "--input", str(hand_csv), "--tau", "9"]) == 2


def test_invalid_scenario_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--scenario", "zz"])
    assert exc.value.code == 2


def test_config_file_and_override(hand_csv, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# settings\nmethod = km\ntau = 2\ninput = {hand_csv}\nalpha=0.1\n")
    assert load_config(cfg, "estimate") == {"method": "km", "tau": 2, "input": str(hand_csv), "alpha": 0.1}
    out = tmp_path / "o.json"
    assert main(["estimate", "--config", str(cfg), "--tau", "1", "--output", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["tau"] == 1 and doc["alpha"] == 0.1 and doc["method"] == "km"
    cfg.write_text("colour = blue\n")
    assert main(["estimate", "--config", str(cfg)]) == 2


def test_contrast_se(sim_csv, tmp_path):
    out = tmp_path / "c.json"
    assert main(["estimate", "--input", str(sim_csv), "--method", "aipw", "--learner", "glm", "--contrast",
                 "--output", str(out)]) == 0
    doc = json.loads(out.read_text())
    s1, s0 = doc["arms"]["1"]["se"], doc["arms"]["0"]["se"]
    assert doc["contrast"]["se"] == pytest.approx(np.hypot(s1, s0))
    assert doc["contrast"]["theta"] == pytest.approx(doc["arms"]["1"]["theta"] - doc["arms"]["0"]["theta"])


def test_estimate_is_byte_identical(sim_csv, tmp_path):
    paths = [tmp_path / "a.json", tmp_path / "b.json"]
    for p in paths:
        assert main(["estimate", "--input", str(sim_csv), "--method", "dtmle", "--learner", "glm", "--seed", "5",
                     "--output", str(p)]) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()
    doc = json.loads(paths[0].read_text())
    assert 0.0 <= doc["arms"]["1"]["theta"] <= 1.0


def test_simulate_outputs(tmp_path, capsys):
    prefixes = [tmp_path / "r1", tmp_path / "r2"]
    for p in prefixes:
        assert main(["simulate", "--n", "400", "--reps", "1", "--method", "km,aipw,tmle", "--seed", "3",
                     "--output", str(p)]) == 0
    assert "estimator" in capsys.readouterr().out
    for suffix in (".metrics.csv", ".raw.csv", ".txt"):
        a = (tmp_path / f"r1{suffix}").read_bytes()
        assert a == (tmp_path / f"r2{suffix}").read_bytes()
    rows = read_raw_csv((tmp_path / "r1.raw.csv").read_text())
    assert [r["estimator"] for r in rows] == ["km", "aipw", "tmle"]
    text = dict(line.split("=", 1) for line in (tmp_path / "r1.txt").read_text().splitlines())
    assert text["config.n"] == "400" and "tmle.coverage_95" in text


def test_module_entry_point(hand_csv):
    proc = subprocess.run(
        [sys.executable, "-m", "drsurv", "estimate", "--input", str(hand_csv), "--method", "km"],
        capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 0 and proc.stderr == ""
    assert "theta=0.000000" in proc.stdout
