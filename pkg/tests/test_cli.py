import json
import logging

import pytest

from apsim import __version__
from apsim.cases import load_case_data
from apsim.cli import main
from apsim.models import model_from_dict, save_model


def lines(path):
    return path.read_text().splitlines()


@pytest.fixture(scope="module")
def office_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("models") / "office.json"
    save_model(model_from_dict(load_case_data("office")["concrete"]), p)
    return p


@pytest.fixture(scope="module")
def demo2(tmp_path_factory):
    d = tmp_path_factory.mktemp("demo")
    assert main(["--out-dir", str(d), "demo", "case2", "--trials", "3000"]) == 0
    return d / "case2"


def test_lift_min_delta_inline(tmp_path, capsys):
    rc = main(["--out-dir", str(tmp_path), "lift-min-delta", "--nu", "0.5,0.5", "--theta", "0.3,0.7",
               "--relation", "1,0;0,1"])
    assert rc == 0
    assert float(capsys.readouterr().out.strip().split("=")[1]) == pytest.approx(0.2)
    head = lines(tmp_path / "lifting.csv")[:4]
    assert head[0].startswith("#config-hash=") and head[1] == "#seed=2017"
    assert head[2] == f"#tool-version={__version__}" and head[3] == "i,j,mass,related"
    assert json.loads((tmp_path / "lifting.json").read_text())["delta"] == pytest.approx(0.2)


def test_usage_errors(tmp_path, capsys):
    assert main(["--out-dir", str(tmp_path), "no-such-command"]) == 2
    assert main(["--out-dir", str(tmp_path), "lift-min-delta", "--nu", "0.5,0.5"]) == 2
    assert main(["--out-dir", str(tmp_path), "lift-min-delta", "--nu", "0.5,0.5", "--theta", "1",
                 "--relation", "1,0;0,1"]) == 2
    assert main(["--out-dir", str(tmp_path), "verify"]) == 2
    capsys.readouterr()
    missing = tmp_path / "nope.json"
    assert main(["--out-dir", str(tmp_path), "reduce", "--model", str(missing), "--order", "2"]) == 2
    assert f"file not found: {missing}" in capsys.readouterr().err


def test_linear_commands_chain(tmp_path, office_file, capsys):
    o = str(tmp_path)
    assert main(["--out-dir", o, "reduce", "--model", str(office_file), "--order", "2"]) == 0
    assert (tmp_path / "hankel.csv").is_file()
    assert main(["--out-dir", o, "interface", "--concrete", str(office_file),
                 "--abstract", str(tmp_path / "reduced.json")]) == 0
    assert main(["--out-dir", o, "tradeoff", "--concrete", str(office_file),
                 "--abstract", str(tmp_path / "reduced.json"), "--interface", str(tmp_path / "interface.json"),
                 "--method", "normbound", "--deltas", "0.01,0.1", "--certificate-delta", "0.01"]) == 0
    rows = [r for r in lines(tmp_path / "tradeoff.csv") if not r.startswith("#")]
    assert len(rows) == 3
    cert_path = tmp_path / "certificate.json"
    assert main(["--out-dir", o, "certify", "--certificate", str(cert_path), "--samples", "20000"]) == 0
    capsys.readouterr()
    bad = json.loads(cert_path.read_text())
    bad["certificate"]["epsilon"] /= 10
    bad_path = tmp_path / "bad.json"
    bad_path.write_text(json.dumps(bad))
    assert main(["--out-dir", o, "certify", "--certificate", str(bad_path), "--samples", "20000"]) == 1
    assert "ok=False" in capsys.readouterr().out


def test_grid_dp_and_refine_simulate(tmp_path, demo2, capsys):
    o = str(tmp_path)
    reduced = tmp_path / "abstract.json"
    reduced.write_text(json.dumps(json.loads((demo2 / "certificate.json").read_text())["abstract"]))
    assert main(["--out-dir", o, "grid-dp", "--model", str(reduced), "--cells", "900", "--inputs", "5",
                 "--epsilon", "0.2"]) == 0
    assert "V0=" in capsys.readouterr().out
    assert main(["--out-dir", o, "refine-simulate", "--certificate", str(demo2 / "certificate.json"),
                 "--value-function", str(tmp_path / "value_function.json"), "--trials", "200",
                 "--recovery", "hold"]) == 0
    rows = [r for r in lines(tmp_path / "refine_trials.csv") if not r.startswith("#")]
    assert rows[0] == "trial,safe,exits,first_exit" and len(rows) == 201
    assert main(["--out-dir", o, "refine-simulate", "--certificate", str(demo2 / "certificate.json"),
                 "--value-function", str(tmp_path / "value_function.json"), "--horizon", "9"]) == 2


def test_verify_suite(tmp_path, capsys):
    assert main(["--out-dir", str(tmp_path), "verify", "--sandwich", "--instances", "12"]) == 0
    assert "failed=0" in capsys.readouterr().out
    rows = [r for r in lines(tmp_path / "sandwich_suite.csv") if not r.startswith("#")]
    assert len(rows) == 13


def test_demo_case1_curve_and_rerun(tmp_path):
    for sub in ("a", "b"):
        assert main(["--out-dir", str(tmp_path / sub), "demo", "case1", "--trials", "50"]) == 0
    rows = [r.split(",") for r in lines(tmp_path / "a" / "case1" / "tradeoff.csv") if not r.startswith("#")]
    at = {float(r[0]): float(r[1]) for r in rows[1:]}
    assert abs(at[0.16] - 0.073) <= 0.005
    for name in ("tradeoff.csv", "excursions.csv", "trace.csv", "summary.json"):
        assert (tmp_path / "a" / "case1" / name).read_bytes() == (tmp_path / "b" / "case1" / name).read_bytes()


def test_demo_case2_reports(demo2):
    cert = json.loads((demo2 / "certificate.json").read_text())["certificate"]
    assert cert["delta"] == 0.01 and 0.2014 <= cert["epsilon"] <= 0.2316
    rows = dict(r.split(",", 1) for r in lines(demo2 / "sandwich.csv") if not r.startswith("#"))
    assert rows["sandwich"] == "PASS"


def test_pipeline_matches_demo_and_resumes(tmp_path, demo2, office_file, caplog):
    caplog.set_level(logging.INFO, logger="apsim")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"trials": 3000, "concrete_model": str(office_file)}))
    out = tmp_path / "p"
    assert main(["--out-dir", str(out), "pipeline", "--config", str(cfg)]) == 0
    for f in sorted(demo2.iterdir()):
        assert (out / f.name).read_bytes() == f.read_bytes(), f.name
    caplog.clear()
    assert main(["--out-dir", str(out), "pipeline", "--config", str(cfg)]) == 0
    assert caplog.text.count("checksum match") == 6
    cfg.write_text(json.dumps({"trials": 2000, "concrete_model": str(office_file)}))
    caplog.clear()
    assert main(["--out-dir", str(out), "pipeline", "--config", str(cfg)]) == 0
    for stage in ("reduce", "interface", "tradeoff", "grid-dp"):
        assert f"stage {stage}: checksum match" in caplog.text
    assert "stage refine-simulate: running" in caplog.text


def test_pipeline_config_errors(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"trails": 10}))
    assert main(["--out-dir", str(tmp_path), "pipeline", "--config", str(cfg)]) == 2
    assert "unknown config keys" in capsys.readouterr().err
    cfg.write_text(json.dumps({"concrete_model": str(tmp_path / "gone.json")}))
    assert main(["--out-dir", str(tmp_path), "pipeline", "--config", str(cfg)]) == 2
    assert "file not found" in capsys.readouterr().err
    cfg.write_text(json.dumps({"recovery": "pray"}))
    assert main(["--out-dir", str(tmp_path), "pipeline", "--config", str(cfg)]) == 2
