import numpy as np
import pytest

from magneto_bo import fieldio
from magneto_bo.config import ConfigError, config_hash, load, resolve


def test_field_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    a = rng.normal(size=(5, 4, 3)) + 1j * rng.normal(size=(5, 4, 3))
    a[0, 0, 0] = complex(np.nan, -0.0)
    path = tmp_path / "a.mbo"
    fieldio.write_field(path, a, {"h": 0.1, "frame": "gauged", "x": np.arange(3)})
    b, meta = fieldio.read_field(path, with_meta=True)
    assert a.tobytes() == b.tobytes()
    assert meta["h"] == 0.1 and meta["x"] == [0, 1, 2]


def test_field_rejects_corruption(tmp_path):
    path = tmp_path / "a.mbo"
    fieldio.write_field(path, np.ones((2, 2)))
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(fieldio.FieldFormatError):
        fieldio.read_field(path)
    path.write_bytes(raw[:-8])
    with pytest.raises(fieldio.FieldFormatError):
        fieldio.read_field(path)


def test_csv_keeps_full_precision(tmp_path):
    rows = [{"h": 0.1, "v": 1 / 3, "ok": True, "n": 7, "none": None}]
    fieldio.write_csv(tmp_path / "t.csv", rows)
    back = fieldio.read_csv(tmp_path / "t.csv")[0]
    assert float(back["v"]) == 1 / 3
    assert back["ok"] == "1" and back["n"] == "7" and back["none"] == ""


def test_resolve_fills_defaults():
    cfg = resolve({"kind": "project", "model": {"kind": "pair", "h": 0.2}})
    assert cfg["model"]["b"] == 1.0 and cfg["model"]["n"] == 4
    assert cfg["pipeline"]["x0"] == [0.0, 0.0]
    assert cfg["grid"]["x_range"] == [-4.0, 4.0]
    assert resolve({"kind": "project"})["model"]["kind"] == "mixing"


@pytest.mark.parametrize("raw", [
    {"kind": "nonsense"},
    {"kind": "project", "colour": 1},
    {"kind": "project", "grid": {"nx": 30}},
    {"kind": "project", "pipeline": {"frame": "lab"}},
    {"kind": "scan-h", "pipeline": {"h_list": [0.1, 0.05]}},
    {"kind": "scan-h", "pipeline": {"h_list": [0.1, 0.05, 0.01]}},
    {"kind": "project", "model": {"h": 1.5}},
    {"kind": "project", "assertions": {"max_wobble": 1}},
    {"kind": "project", "pipeline": {"x0": [0.0, 1.0]}},
    {"kind": "project", "pipeline": {"samples": 0}},
])
def test_resolve_rejects(raw):
    with pytest.raises(ConfigError):
        resolve(raw)


def test_hash_tracks_content(tmp_path):
    a = resolve({"kind": "project"})
    b = resolve({"kind": "project", "model": {"h": 0.05}})
    assert config_hash(a) == config_hash(resolve({"kind": "project"}))
    assert config_hash(a) != config_hash(b)
    path = tmp_path / "c.yaml"
    path.write_text("kind: project\nmodel:\n  h: 0.05\n")
    assert config_hash(load(path)) == config_hash(b)
    path.write_text("kind: [project\n")
    with pytest.raises(ConfigError):
        load(path)
