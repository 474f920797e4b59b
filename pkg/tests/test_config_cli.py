from __future__ import annotations

import csv
import json

import numpy as np
import pytest
import yaml

from sdfinspect import cli
from sdfinspect.config import RunConfig
from sdfinspect.errors import ConfigError
from sdfinspect.field import EnvField, FieldConfig

SMALL = ["--set", "sampling.n_near=8000", "--set", "sampling.n_far=2000", "--set", "field.epochs=10"]


# -- configuration ------------------------------------------------------------------------

def test_yaml_round_trip():
    cfg = RunConfig().with_overrides(["planner.alpha=3.5", "sensor.width=20", "scene.path=bundled:cube"])
    back = RunConfig.from_yaml(cfg.to_yaml())
    assert back.to_dict() == cfg.to_dict()
    assert back.config_hash() == cfg.config_hash()
    assert back.planner.local is back.local


def test_overrides_parse_yaml_values():
    cfg = RunConfig().with_overrides(["planner.root=[0.5, 1, 2]", "field.hidden=[16, 16]"])
    assert cfg.planner.root == (0.5, 1, 2)
    assert cfg.field.hidden == (16, 16)


@pytest.mark.parametrize("text", ["planner: {alpah: 1}", "bogus: 1", "field: {hashgrid: {levls: 3}}"])
def test_unknown_keys_rejected(text):
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_yaml(text)


def test_bad_override_and_values():
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["planner.nope=1"])
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["sensor.width=wide"])
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["planner.alpha=-1"])
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["planner.xi=0.5"]).validate()


def test_empty_yaml_gives_defaults():
    assert RunConfig.from_yaml("").to_dict() == RunConfig().to_dict()


def test_print_default_config_is_loadable(capsys):
    assert cli.main(["print-default-config"]) == 0
    out = capsys.readouterr().out
    assert RunConfig.from_dict(yaml.safe_load(out)).to_dict() == RunConfig().to_dict()


# -- CLI ---------------------------------------------------------------------------------------

@pytest.fixture()
def config_file(tmp_path):
    p = tmp_path / "cfg.yaml"
    RunConfig().with_overrides(["scene.path=bundled:sphere"]).save(p)
    return p


@pytest.fixture(scope="module")
def small_field(tmp_path_factory):
    d = tmp_path_factory.mktemp("field")
    cfg = d / "cfg.yaml"
    RunConfig().with_overrides(["scene.path=bundled:sphere"]).save(cfg)
    assert cli.main(["train-env", "--config", str(cfg), *SMALL, "--out", str(d / "run")]) == 0
    return cfg, d / "run"


def test_train_env_outputs(small_field):
    _, run = small_field
    for name in ("field.ckpt", "loss.csv", "loss.png", "train_report.json", "config.yaml", "manifest.json"):
        assert (run / name).exists(), name
    report = json.loads((run / "train_report.json").read_text())
    assert report["n_params"] == EnvField.load(run / "field.ckpt").n_params
    rows = list(csv.DictReader(open(run / "loss.csv")))
    assert len(rows) == 10
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["outputs"]["field.ckpt"] == cli.sha256_file(run / "field.ckpt")


def test_missing_scene_exits_3(tmp_path, config_file, capsys):
    code = cli.main(["train-env", "--config", str(config_file), "--set", "scene.path=/no/such/mesh.obj",
                     "--out", str(tmp_path / "o")])
    assert code == 3
    assert "scene not found" in capsys.readouterr().err


def test_unknown_bundled_scene_exits_3(tmp_path, config_file):
    assert cli.main(["train-env", "--config", str(config_file), "--set", "scene.path=bundled:nope",
                     "--out", str(tmp_path / "o")]) == 3


def test_missing_config_exits_2(tmp_path):
    assert cli.main(["train-env", "--config", str(tmp_path / "nope.yaml")]) == 2


def test_checkpoint_config_mismatch_exits_2(tmp_path, small_field, capsys):
    cfg, run = small_field
    code = cli.main(["plan", "--config", str(cfg), "--field", str(run / "field.ckpt"),
                     "--set", "field.tr=0.2", "--out", str(tmp_path / "p")])
    assert code == 2
    assert "does not match" in capsys.readouterr().err


def test_corrupt_checkpoint_exits_3(tmp_path, small_field):
    cfg, run = small_field
    bad = tmp_path / "bad.ckpt"
    data = bytearray((run / "field.ckpt").read_bytes())
    data[-10] ^= 0xFF
    bad.write_bytes(bytes(data))
    assert cli.main(["plan", "--config", str(cfg), "--field", str(bad), "--out", str(tmp_path / "p")]) == 3


def test_constant_field_has_no_isosurface_exits_4(tmp_path, capsys):
    fcfg = FieldConfig(box_min=(-1, -1, -1), box_max=(1, 1, 1), cell_size=0.1)
    fld = EnvField.create(fcfg, seed=0)
    for p in fld.head.params:
        p[...] = 0.0
    fld.head.params[-1][...] = 1.0  # constant +1 -> clamped to +tr everywhere
    fld.save(tmp_path / "const.ckpt")
    code = cli.main(["export-isosurface", "--field", str(tmp_path / "const.ckpt"), "--out", str(tmp_path / "m.ply")])
    assert code == 4
    assert "no isosurface" in capsys.readouterr().err


def test_export_isosurface_writes_mesh(tmp_path, small_field):
    _, run = small_field
    out = tmp_path / "iso.ply"
    assert cli.main(["export-isosurface", "--field", str(run / "field.ckpt"), "--out", str(out), "--ascii"]) == 0
    from sdfinspect.mesh import load_mesh
    m = load_mesh(out)
    r = np.linalg.norm(m.vertices, axis=1)
    assert abs(np.median(r) - 1.0) < 0.1


def test_plan_node_budget_one_is_root_only(tmp_path, small_field):
    cfg, run = small_field
    out = tmp_path / "p"
    code = cli.main(["plan", "--config", str(cfg), "--field", str(run / "field.ckpt"),
                     "--set", "planner.node_budget=1", "--set", "planner.root=[1.3, 0, 0]", "--out", str(out)])
    assert code == 0
    traj = json.loads((out / "trajectory.json").read_text())
    assert len(traj["configs"]) == 1 and traj["configs"][0]["x"] == 1.3 and traj["cost"] == 0.0
    report = json.loads((out / "plan_report.json").read_text())
    assert report["iterations"] == 0 and report["nodes_created"] == 1
    for name in ("coverage_history.csv", "coverage.png", "topdown.png", "memory.json", "covered.ply",
                 "uncovered.ply", "trajectory.csv", "manifest.json"):
        assert (out / name).exists(), name


def test_root_in_collision_exits_3(tmp_path, small_field):
    cfg, run = small_field
    code = cli.main(["plan", "--config", str(cfg), "--field", str(run / "field.ckpt"),
                     "--set", "planner.root=[0, 0, 0]", "--out", str(tmp_path / "p")])
    assert code == 3


def test_output_root_environment_variable(tmp_path, monkeypatch, small_field):
    cfg, run = small_field
    monkeypatch.setenv("SDFINSPECT_OUTPUT_ROOT", str(tmp_path / "root"))
    assert cli.main(["export-isosurface", "--field", str(run / "field.ckpt"), "--out", str(tmp_path / "x.ply")]) == 0
    assert cli.output_dir(RunConfig(), None) == tmp_path / "root" / "runs" / "default"


def test_verify_passes_and_fails_on_corrupt_checkpoint(tmp_path, small_field, capsys):
    _, run = small_field
    assert cli.main(["verify", "--quick", "--field", str(run / "field.ckpt")]) == 0
    assert "7/7 checks passed" in capsys.readouterr().out
    bad = tmp_path / "bad.ckpt"
    data = bytearray((run / "field.ckpt").read_bytes())
    data[-10] ^= 0xFF
    bad.write_bytes(bytes(data))
    assert cli.main(["verify", "--quick", "--field", str(bad)]) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and "6/7 checks passed" in out
