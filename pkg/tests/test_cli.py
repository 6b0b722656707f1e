import json

import pytest
import yaml

from magneto_bo import cli, fieldio


def _write(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


PROJECT = {
    "kind": "project",
    "name": "mixing-project",
    "model": {"kind": "mixing", "h": 0.1},
    "pipeline": {"fields": True},
    "assertions": {"max_projector_error": 1e-9, "max_defect": 1e-8},
}


def test_run_writes_report(tmp_path):
    out = tmp_path / "out"
    code = cli.main(["run", _write(tmp_path, PROJECT), "--output-dir", str(out)])
    assert code == cli.EXIT_OK
    index = json.loads((out / "index.json").read_text())
    kinds = {e["kind"] for e in index["artifacts"]}
    assert kinds == {"table", "field", "figure"}
    for e in index["artifacts"]:
        assert (out / e["path"]).exists()
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["status"] == "pass" and len(meta["config_hash"]) == 16
    assert "numpy" in meta["versions"]
    assert (out / "config.resolved.yaml").exists()
    pi0 = fieldio.read_field(out / "fields" / "pi_0.mbo")
    assert pi0.shape[-2:] == (2, 2)


def test_failed_assertion_exit_code(tmp_path):
    cfg = dict(PROJECT, assertions={"max_projector_error": 1e-30})
    code = cli.main(["run", _write(tmp_path, cfg), "--output-dir", str(tmp_path / "o"), "--no-figures"])
    assert code == cli.EXIT_ASSERT
    checks = fieldio.read_csv(tmp_path / "o" / "checks.csv")
    assert checks[0]["passed"] == "0"


def test_config_errors(tmp_path, capsys):
    assert cli.main(["run", _write(tmp_path, {"kind": "project", "bogus": 1})]) == cli.EXIT_CONFIG
    assert cli.main(["run", str(tmp_path / "missing.yaml")]) == cli.EXIT_CONFIG
    bad = {"kind": "project", "assertions": {"min_leakage_slope": 1.5}}
    assert cli.main(["validate", _write(tmp_path, bad)]) == cli.EXIT_CONFIG
    assert cli.main(["scan-h", _write(tmp_path, {"kind": "project"})]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_gap_failure_is_a_precondition_error(tmp_path):
    cfg = {"kind": "project", "model": {"kind": "crossing", "h": 0.1}}
    out = tmp_path / "o"
    assert cli.main(["run", _write(tmp_path, cfg), "--output-dir", str(out)]) == cli.EXIT_PRECONDITION
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["status"] == "precondition failure" and "GapError" in meta["error"]
    assert json.loads((out / "index.json").read_text()) == {"artifacts": []}


def test_validate(tmp_path, capsys):
    cfg = {"kind": "propagate-grid", "model": {"kind": "mixing"}, "grid": {"tensor_nx": 64}}
    assert cli.main(["validate", _write(tmp_path, cfg)]) == cli.EXIT_OK
    assert "tensor_points" in capsys.readouterr().out


def test_scan_h_reruns_are_bit_identical(tmp_path):
    cfg = {"kind": "project", "model": {"kind": "mixing"},
           "pipeline": {"h_list": [0.1, 0.05, 0.025], "leakage": False}}
    path = _write(tmp_path, cfg)
    outs = [tmp_path / "a", tmp_path / "b"]
    for o in outs:
        assert cli.main(["scan-h", path, "--output-dir", str(o), "--no-figures"]) == cli.EXIT_OK
    for name in ("scan.csv", "fits.csv"):
        assert (outs[0] / "tables" / name).read_bytes() == (outs[1] / "tables" / name).read_bytes()


def test_version_flag(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--version"])
    assert "magneto-bo" in capsys.readouterr().out
