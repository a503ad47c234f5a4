"""Experiment configuration: one YAML file per experiment.

The file has up to five parts: a ``world`` section (required), optional
``network``, ``train``, and ``eval`` sections, plus top-level ``output_dir``
and ``seed``. Every key is schema-checked before any computation; unknown
keys are rejected with their dotted path, and missing required keys are
reported the same way. Hyperparameter defaults: discount 0.99, exploration
linearly annealed 0.95 -> 0.05, joint fine-tuning runs the task network at a
fifth of its learning rate.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from .envs import ClassificationConfig, DetectionConfig
from .errors import ConfigError
from .training import DEFAULT_ENUM_BUDGET, JOINT_TASK_LR_FACTOR, TrainConfig

WORLD_KINDS = ("classification", "detection")

# keys that live outside the world/train dataclasses
_NETWORK_KEYS = {
    "task_hidden": int,
    "task_feat_dim": int,
    "selector_hidden": int,
    "selector_seed": int,
    "use_camera_branch": bool,
    "use_feature_branch": bool,
}
_EVAL_KEYS = {
    "split": str,
    "policy": str,
    "T": int,
    "budget": int,
    "task_checkpoint": str,
    "selector_checkpoint": str,
    "selector_checkpoints": dict,   # {str(T): path} for sweeps
    "study": str,
    "T_values": list,
    "k": int,
    "n_random": int,
    "rank_split": str,
    "policies": list,
}
_EVAL_DEFAULTS = {"split": "eval", "budget": DEFAULT_ENUM_BUDGET,
                  "rank_split": "val", "n_random": 5, "k": 0}
_NETWORK_DEFAULTS = {"selector_seed": None, "use_camera_branch": True,
                     "use_feature_branch": True}  # selector_seed None -> run seed
_TRAIN_DEFAULTS = {
    "batch_size": 8,
    "task_lr": 1e-3,
    "selector_lr": 1e-3,
    "gamma": 0.99,
    "epsilon_start": 0.95,
    "epsilon_end": 0.05,
    "joint_task_lr_factor": JOINT_TASK_LR_FACTOR,
    "seed": 0,
    "train_view_counts": None,
}
_TRAIN_EXTRA_KEYS = {"task_checkpoint": str}  # checkpoint dependency for
# select-fixed and joint regimes


def _fields_of(cls) -> dict:
    return {f.name: f for f in dataclasses.fields(cls)}


def _reject_unknown(section: str, raw: dict, allowed) -> None:
    for key in raw:
        if key not in allowed:
            path = f"{section}.{key}" if section else key
            raise ConfigError(f"unknown key: {path}")


def _as_tuple_of_tuples(value):
    if value is None:
        return None
    return tuple(tuple(int(x) for x in row) for row in value)


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description; ``raw`` is the normalized dict with
    all defaults filled in, which is what the config hash covers."""

    raw: dict

    # -- section accessors

    @property
    def world_kind(self) -> str:
        return self.raw["world"]["kind"]

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def output_dir(self) -> str:
        return self.raw["output_dir"]

    def world_config(self):
        section = {k: v for k, v in self.raw["world"].items() if k != "kind"}
        if self.world_kind == "classification":
            if section.get("discriminative_views") is not None:
                section["discriminative_views"] = _as_tuple_of_tuples(
                    section["discriminative_views"])
            return ClassificationConfig(**section)
        return DetectionConfig(**section)

    def train_config(self, regime: str | None = None, seed: int | None = None) -> TrainConfig:
        section = dict(self.raw.get("train") or {})
        section.pop("task_checkpoint", None)
        if regime is not None:
            section["regime"] = regime
        if seed is not None:
            section["seed"] = seed
        if section.get("train_view_counts") is not None:
            section["train_view_counts"] = tuple(int(c) for c in section["train_view_counts"])
        missing = [k for k in ("regime", "epochs", "T") if k not in section]
        if missing:
            raise ConfigError(f"missing required key: train.{missing[0]}")
        return TrainConfig(**section)

    def network(self) -> dict:
        return dict(self.raw.get("network") or {})

    def eval_section(self) -> dict:
        return dict(self.raw.get("eval") or {})

    def require(self, dotted: str):
        """Fetch ``section.key``; absent or None -> ConfigError naming the path."""
        node = self.raw
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node or node[part] is None:
                raise ConfigError(f"missing required key: {dotted}")
            node = node[part]
        return node

    def config_hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _validate_world(raw) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("world section must be a mapping")
    if "kind" not in raw:
        raise ConfigError("missing required key: world.kind")
    kind = raw["kind"]
    if kind not in WORLD_KINDS:
        raise ConfigError(f"world.kind must be one of {WORLD_KINDS}, got {kind!r}")
    cls = ClassificationConfig if kind == "classification" else DetectionConfig
    fields = _fields_of(cls)
    _reject_unknown("world", {k: v for k, v in raw.items() if k != "kind"}, fields)
    out = {"kind": kind}
    for name, f in fields.items():
        if name in raw:
            out[name] = raw[name]
        elif f.default is not dataclasses.MISSING:
            out[name] = f.default
        else:
            raise ConfigError(f"missing required key: world.{name}")
    # construct once so dataclass invariants run at validation time
    probe = dict(out)
    probe.pop("kind")
    if kind == "classification" and probe.get("discriminative_views") is not None:
        probe["discriminative_views"] = _as_tuple_of_tuples(probe["discriminative_views"])
    cls(**probe)
    return out


def _validate_train(raw) -> dict | None:
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise ConfigError("train section must be a mapping")
    allowed = dict(_fields_of(TrainConfig))
    allowed.update(_TRAIN_EXTRA_KEYS)
    _reject_unknown("train", raw, allowed)
    out = dict(_TRAIN_DEFAULTS)
    out.update(raw)
    if out.get("train_view_counts") is not None:
        out["train_view_counts"] = [int(c) for c in out["train_view_counts"]]
    return out


def _validate_network(raw) -> dict:
    if raw is None:
        return dict(_NETWORK_DEFAULTS)
    if not isinstance(raw, dict):
        raise ConfigError("network section must be a mapping")
    _reject_unknown("network", raw, _NETWORK_KEYS)
    out = dict(_NETWORK_DEFAULTS)
    out.update(raw)
    return out


def _validate_eval(raw) -> dict:
    if raw is None:
        return dict(_EVAL_DEFAULTS)
    if not isinstance(raw, dict):
        raise ConfigError("eval section must be a mapping")
    _reject_unknown("eval", raw, _EVAL_KEYS)
    out = dict(_EVAL_DEFAULTS)
    out.update(raw)
    return out


def validate_config(raw) -> ExperimentConfig:
    """Normalize a parsed YAML mapping into an ExperimentConfig."""
    if not isinstance(raw, dict):
        raise ConfigError("experiment config must be a mapping")
    allowed_top = {"world", "network", "train", "eval", "output_dir", "seed"}
    _reject_unknown("", raw, allowed_top)
    if "world" not in raw:
        raise ConfigError("missing required key: world")
    normalized = {
        "world": _validate_world(raw["world"]),
        "network": _validate_network(raw.get("network")),
        "train": _validate_train(raw.get("train")),
        "eval": _validate_eval(raw.get("eval")),
        "output_dir": raw.get("output_dir", "runs"),
        "seed": int(raw.get("seed", 0)),
    }
    return ExperimentConfig(normalized)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    return validate_config(raw)
