import json
import struct

import numpy as np
import pytest

from gmsage.channel import ChannelTensor, trace_scene_paths
from gmsage.cli import EXIT_CONFIG, EXIT_FORMAT, EXIT_OK, main
from gmsage.config import ConfigError, load_config, load_preset, parse_config
from gmsage.tensorio import TensorFormatError, read_tensor, write_tensor

SMALL = """
room: {width: 3.5, height: 3.5}
walls:
  - {label: left, start: [0, 0], end: [0, 3]}
  - {label: upper, start: [0, 3], end: [3, 3]}
  - {label: right, start: [3, 0], end: [3, 3]}
obstacle: {vertices: [[1.5, 1.0], [1.7, 1.0], [1.7, 1.2], [1.5, 1.2]]}
tx: {reference_point: [1.0, 1.9], count: 2, spacing_m: 0.15}
rx: {reference_point: [2.0, 0.6], count: 4, spacing_m: 0.15}
rf: {sub_bandwidth: 30.0e+6, sub_band_count: 16, bandwidth: 4.5e+8, snr_db: 25}
synthesis: {include_los: false}
estimator: {grid1: 0.25, grid2: 0.5, max_iters: 5}
seed: 3
"""


@pytest.fixture
def small(tmp_path):
    path = tmp_path / "small.scene"
    path.write_text(SMALL)
    return path


def run(*argv):
    return main([str(a) for a in argv])


# --- configuration -----------------------------------------------------------------


def test_presets_differ_only_in_obstacle():
    a, b = load_preset("blocked"), load_preset("unblocked")
    assert a.scene.obstacle is not None and b.scene.obstacle is None
    assert a.rf == b.rf and a.estimator == b.estimator and a.seed == b.seed
    assert len(a.scene.tx.positions) == 16 and len(a.scene.rx.positions) == 121
    assert a.estimator.refine is False


@pytest.mark.parametrize("patch,field", [
    ({"tx": {"reference_point": [9, 9], "count": 2}}, "scene"),
    ({"rx": {"reference_point": [1, 1], "count": 0}}, "rx.count"),
    ({"estimator": {"grid7": 1}}, "grid7"),
    ({"rf": {"sub_band_count": 500}}, "rf"),
    ({"seed": "one"}, "seed"),
    ({"room": None}, "room"),
])
def test_config_errors_name_the_field(patch, field):
    import yaml
    doc = yaml.safe_load(SMALL)
    doc.update(patch)
    with pytest.raises(ConfigError, match=field):
        parse_config(doc)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.scene")


# --- tensor files --------------------------------------------------------------------


def _tensor():
    rng = np.random.default_rng(0)
    return ChannelTensor(rng.standard_normal((2, 3, 4)) + 1j * rng.standard_normal((2, 3, 4)),
                         10e6, 20.0, meta={"noise_variance": 0.5, "seed": 1})


def test_tensor_round_trip(tmp_path):
    t = _tensor()
    write_tensor(tmp_path / "t.gmct", t)
    back = read_tensor(tmp_path / "t.gmct", expected_dims=(2, 3, 4))
    np.testing.assert_array_equal(back.values, t.values)
    assert back.sub_bandwidth == 10e6 and back.snr_db == 20.0
    assert back.meta == {"noise_variance": 0.5, "seed": 1}


def test_tensor_format_errors(tmp_path):
    path = tmp_path / "t.gmct"
    write_tensor(path, _tensor())
    raw = path.read_bytes()
    with pytest.raises(TensorFormatError, match="expected dims"):
        read_tensor(path, expected_dims=(2, 3, 5))
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(TensorFormatError, match="magic"):
        read_tensor(path)
    path.write_bytes(raw[:-16])
    with pytest.raises(TensorFormatError, match="payload"):
        read_tensor(path)
    path.write_bytes(raw[:10])
    with pytest.raises(TensorFormatError, match="header"):
        read_tensor(path)
    path.write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(TensorFormatError, match="version"):
        read_tensor(path)


# --- commands ------------------------------------------------------------------------


def test_simulate_writes_tensor_and_truth(small, tmp_path):
    out = tmp_path / "out"
    assert run("simulate", "--config", small, "--out", out) == EXIT_OK
    t = read_tensor(out / "channel.gmct")
    assert t.dims == (2, 4, 16)
    truth = json.loads((out / "truth.json").read_text())
    assert truth["schema"] == "gmsage-truth/1" and truth["seed"] == 3
    assert len(truth["paths"]) == 7


def test_unblocked_variant_has_same_truth(small, tmp_path):
    text = small.read_text().replace(
        "obstacle: {vertices: [[1.5, 1.0], [1.7, 1.0], [1.7, 1.2], [1.5, 1.2]]}", "obstacle: null")
    free = tmp_path / "free.scene"
    free.write_text(text)
    assert run("simulate", "--config", small, "--out", tmp_path / "a", "--no-noise") == EXIT_OK
    assert run("simulate", "--config", free, "--out", tmp_path / "b", "--no-noise") == EXIT_OK
    a = json.loads((tmp_path / "a" / "truth.json").read_text())["paths"]
    b = json.loads((tmp_path / "b" / "truth.json").read_text())["paths"]
    assert [p["scatterers"] for p in a] == [p["scatterers"] for p in b]
    # without the obstacle only channels lacking a specular point stay masked
    for pa, pb in zip(a, b):
        assert np.all(np.asarray(pa["blockage_mask"]) <= np.asarray(pb["blockage_mask"]))
    assert sum(np.sum(p["blockage_mask"]) for p in a) < sum(np.sum(p["blockage_mask"]) for p in b)


def test_default_presets_masks():
    blocked = trace_scene_paths(load_preset("blocked").scene)
    free = trace_scene_paths(load_preset("unblocked").scene)
    assert all(p.blockage_mask.all() for p in free)
    assert [p.label for p in blocked] == [p.label for p in free]
    assert {p.label for p in blocked if not p.blockage_mask.all()} == {"upper", "upper->right"}


def test_zero_walls(small, tmp_path):
    import yaml
    doc = yaml.safe_load(SMALL)
    doc["walls"] = []
    doc["obstacle"] = None
    cfg = tmp_path / "bare.scene"
    cfg.write_text(yaml.safe_dump(doc))
    assert run("simulate", "--config", cfg, "--out", tmp_path / "x") == EXIT_CONFIG
    doc["synthesis"]["include_los"] = True
    cfg.write_text(yaml.safe_dump(doc))
    assert run("simulate", "--config", cfg, "--out", tmp_path / "y") == EXIT_OK
    truth = json.loads((tmp_path / "y" / "truth.json").read_text())
    assert [p["bounce_order"] for p in truth["paths"]] == [0]


def test_noisy_simulation_needs_seed(small, tmp_path):
    cfg = tmp_path / "noseed.scene"
    cfg.write_text(SMALL.replace("seed: 3", ""))
    assert run("simulate", "--config", cfg, "--out", tmp_path / "o") == EXIT_CONFIG
    assert run("simulate", "--config", cfg, "--out", tmp_path / "o", "--no-noise") == EXIT_OK
    assert run("simulate", "--config", cfg, "--out", tmp_path / "o", "--seed", "5") == EXIT_OK


def test_bad_config_exit_code(tmp_path):
    cfg = tmp_path / "bad.scene"
    cfg.write_text("room: [1, 2\n")
    assert run("simulate", "--config", cfg, "--out", tmp_path) == EXIT_CONFIG
    assert run("simulate", "--config", tmp_path / "missing.scene", "--out", tmp_path) == EXIT_CONFIG


def test_estimate_rejects_corrupt_tensor(small, tmp_path):
    out = tmp_path / "out"
    assert run("simulate", "--config", small, "--out", out) == EXIT_OK
    path = out / "channel.gmct"
    raw = path.read_bytes()
    path.write_bytes(b"JUNK" + raw[4:])
    assert run("estimate", "--config", small, "--out", out) == EXIT_FORMAT
    path.write_bytes(raw)
    other = tmp_path / "other.scene"
    other.write_text(SMALL.replace("count: 4", "count: 5"))
    assert run("estimate", "--config", other, "--out", out) == EXIT_FORMAT


def test_estimate_ignores_truth(small, tmp_path):
    out = tmp_path / "out"
    assert run("simulate", "--config", small, "--out", out) == EXIT_OK
    (out / "truth.json").unlink()
    assert run("estimate", "--config", small, "--out", out) == EXIT_OK
    doc = json.loads((out / "estimates.json").read_text())
    assert doc["schema"] == "gmsage-estimates/1" and doc["estimates"]
    # evaluation does need the truth
    assert run("evaluate", "--config", small, "--out", out) == EXIT_FORMAT


def test_export_pdp_range(small, tmp_path):
    out = tmp_path / "out"
    assert run("simulate", "--config", small, "--out", out) == EXIT_OK
    assert run("export-pdp", "--out", out, "--tx", "3") == EXIT_CONFIG
    assert run("export-pdp", "--out", out, "--tx", "0") == EXIT_CONFIG
    assert run("export-pdp", "--out", out, "--tx", "2") == EXIT_OK
    lines = (out / "pdp_tx2.csv").read_text().splitlines()
    assert lines[0].startswith("rx_index,0.000000m") and len(lines) == 1 + 4


def test_run_all_is_deterministic(small, tmp_path):
    for name in ("a", "b"):
        assert run("run-all", "--config", small, "--out", tmp_path / name) == EXIT_OK
    for rel in ("report/report.json", "report/report.txt", "channel.gmct", "truth.json"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    report = json.loads((tmp_path / "a" / "report" / "report.json").read_text())
    assert report["schema_version"] == 1 and report["config"]["seed"] == 3


def test_output_dir_from_environment(small, tmp_path, monkeypatch):
    monkeypatch.setenv("GMSAGE_OUT", str(tmp_path / "envout"))
    assert run("simulate", "--config", small, "--no-noise") == EXIT_OK
    assert (tmp_path / "envout" / "channel.gmct").exists()


def test_estimator_flags_override(small, tmp_path):
    out = tmp_path / "out"
    assert run("simulate", "--config", small, "--out", out) == EXIT_OK
    assert run("estimate", "--config", small, "--out", out, "--max-iters", "1",
               "--grid1", "0.5", "--tol", "0.5") == EXIT_OK
    doc = json.loads((out / "estimates.json").read_text())
    assert doc["iterations"] == 1
    assert doc["config"]["estimator"]["grid1"] == 0.5
    assert run("estimate", "--config", small, "--out", out, "--grid1", "-1") == EXIT_CONFIG


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    text = capsys.readouterr().out
    for cmd in ("simulate", "estimate", "evaluate", "export-pdp", "run-all"):
        assert cmd in text
