"""Unit tests for experiment-config validation and artifact plumbing."""

import json
import os

import pytest

from fewview import artifacts
from fewview.config import load_config, validate_config
from fewview.errors import ConfigError, StateError


def minimal_raw():
    return {"world": {"kind": "classification"}}


# ---------------------------------------------------------------------------
# config schema


def test_defaults_fill_in_paper_hyperparameters():
    cfg = validate_config(minimal_raw())
    train = dict(cfg.raw["train"] or {})
    assert train == {}  # no train section -> none synthesized
    cfg2 = validate_config({"world": {"kind": "classification"},
                            "train": {"regime": "joint", "epochs": 2, "T": 2}})
    t = cfg2.raw["train"]
    assert t["gamma"] == 0.99
    assert t["epsilon_start"] == 0.95
    assert t["epsilon_end"] == 0.05
    assert t["joint_task_lr_factor"] == pytest.approx(0.2)


def test_unknown_keys_rejected_at_every_level():
    with pytest.raises(ConfigError, match="unknown key: mystery"):
        validate_config({"world": {"kind": "classification"}, "mystery": 1})
    with pytest.raises(ConfigError, match="unknown key: world.flux"):
        validate_config({"world": {"kind": "classification", "flux": 1}})
    with pytest.raises(ConfigError, match="unknown key: eval.turbo"):
        validate_config({"world": {"kind": "classification"}, "eval": {"turbo": 1}})
    with pytest.raises(ConfigError, match="unknown key: network.depth"):
        validate_config({"world": {"kind": "classification"}, "network": {"depth": 9}})


def test_world_kind_required_and_validated():
    with pytest.raises(ConfigError, match="world.kind"):
        validate_config({"world": {}})
    with pytest.raises(ConfigError, match="world.kind"):
        validate_config({"world": {"kind": "surveillance"}})
    with pytest.raises(ConfigError, match="missing required key: world"):
        validate_config({})


def test_world_invariants_run_at_validation_time():
    with pytest.raises(ConfigError):
        validate_config({"world": {"kind": "detection", "min_targets": 0}})


def test_train_config_materializes_and_names_missing_keys():
    cfg = validate_config({"world": {"kind": "classification"},
                           "train": {"regime": "task", "epochs": 3, "T": 12,
                                     "train_view_counts": [1, 2]}})
    tc = cfg.train_config()
    assert tc.train_view_counts == (1, 2)
    assert tc.gamma == 0.99
    cfg2 = validate_config({"world": {"kind": "classification"},
                            "train": {"regime": "task", "T": 2}})
    with pytest.raises(ConfigError, match="missing required key: train.epochs"):
        cfg2.train_config()
    cfg3 = validate_config(minimal_raw())
    with pytest.raises(ConfigError, match="missing required key: train.regime"):
        cfg3.train_config()


def test_require_walks_dotted_paths():
    cfg = validate_config({"world": {"kind": "classification"},
                           "eval": {"T": 3}})
    assert cfg.require("eval.T") == 3
    with pytest.raises(ConfigError, match="missing required key: eval.policy"):
        cfg.require("eval.policy")


def test_config_hash_is_stable_and_covers_defaults():
    a = validate_config({"world": {"kind": "classification"}})
    b = validate_config({"world": {"kind": "classification", "n_views": 12}})
    # n_views=12 is the default, so the normalized configs coincide
    assert a.config_hash() == b.config_hash()
    c = validate_config({"world": {"kind": "classification", "noise": 0.2}})
    assert c.config_hash() != a.config_hash()


def test_world_config_builds_both_kinds():
    cls = validate_config({"world": {"kind": "classification", "n_views": 6,
                                     "n_classes": 4}}).world_config()
    assert cls.n_views == 6
    det = validate_config({"world": {"kind": "detection", "n_cameras": 4}}).world_config()
    assert det.n_cameras == 4


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "ghost.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("[:::")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(bad)
    scalar = tmp_path / "scalar.yaml"
    scalar.write_text("42")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(scalar)


# ---------------------------------------------------------------------------
# artifacts


def test_atomic_write_leaves_no_temp_files(tmp_path):
    path = artifacts.atomic_write_text(tmp_path / "deep" / "a.txt", "hello")
    assert path.read_text() == "hello"
    assert list(path.parent.glob("*.tmp")) == []


def test_content_addressed_names_equal_bytes(tmp_path):
    p1 = artifacts.write_content_addressed(tmp_path, "report", ".json", b"{}")
    p2 = artifacts.write_content_addressed(tmp_path, "report", ".json", b"{}")
    p3 = artifacts.write_content_addressed(tmp_path, "report", ".json", b"{1}")
    assert p1 == p2
    assert p1 != p3
    assert p1.name.startswith("report-") and p1.suffix == ".json"


def test_manifest_refuses_missing_files(tmp_path):
    m = artifacts.RunManifest(command="train", config={}, config_hash="x", seed=0)
    with pytest.raises(StateError, match="missing"):
        m.add(tmp_path, tmp_path / "ghost.bin")
    real = artifacts.atomic_write_text(tmp_path / "real.txt", "data")
    m.add(tmp_path, real)
    m.write(tmp_path)
    loaded = artifacts.load_manifest(tmp_path)
    assert loaded["outputs"][0]["path"] == "real.txt"
    # deleting a listed file invalidates a rewrite
    real.unlink()
    with pytest.raises(StateError, match="missing"):
        m.write(tmp_path)


def test_run_directory_collision_semantics(tmp_path):
    d1 = artifacts.run_directory(tmp_path, "train", "abcdef123456", 0, force=False)
    # no manifest yet: re-entry is fine (an interrupted run is resumable)
    d2 = artifacts.run_directory(tmp_path, "train", "abcdef123456", 0, force=False)
    assert d1 == d2
    artifacts.atomic_write_text(d1 / artifacts.MANIFEST_NAME, "{}")
    with pytest.raises(ConfigError, match="--force"):
        artifacts.run_directory(tmp_path, "train", "abcdef123456", 0, force=False)
    d3 = artifacts.run_directory(tmp_path, "train", "abcdef123456", 0, force=True)
    assert d3 == d1


def test_jsonl_rows_are_sorted_and_line_delimited():
    text = artifacts.jsonl([{"b": 1, "a": 2}, {"x": 0.5}])
    lines = text.strip().split("\n")
    assert lines[0] == '{"a": 2, "b": 1}'
    assert json.loads(lines[1]) == {"x": 0.5}


def test_output_root_precedence(tmp_path, monkeypatch):
    monkeypatch.delenv(artifacts.OUTPUT_ROOT_ENV, raising=False)
    assert artifacts.output_root(None, "cfgdir") == artifacts.Path("cfgdir")
    monkeypatch.setenv(artifacts.OUTPUT_ROOT_ENV, "envdir")
    assert artifacts.output_root(None, "cfgdir") == artifacts.Path("envdir")
    assert artifacts.output_root("flagdir", "cfgdir") == artifacts.Path("flagdir")
