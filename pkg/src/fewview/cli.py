"""Command-line experiment driver.

Subcommands: ``train`` (task / select-fixed / joint regimes), ``eval`` (one
policy on one split), ``study`` (sweep-T, shutoff, random-pose, ablation),
and ``oracle`` (export a policy table). Every run writes into a deterministic
content-addressed directory under the output root and finishes by writing a
manifest that lists each produced file with its hash.

Exit codes: 0 success, 2 configuration error, 3 compatibility error
(world/model mismatch), 4 enumeration-budget error, 1 anything else.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import artifacts, evaluation, studies, training
from .config import ExperimentConfig, load_config
from .envs import ClassificationWorld, DetectionWorld
from .errors import BudgetError, CompatibilityError, ConfigError
from .mvselect import QNetwork
from .studies import STUDIES
from .tasknet import MVClassifier, MVDetector
from .training import POLICIES, REGIMES

ORACLE_POLICIES = ("dataset-oracle", "instance-oracle")


# ---------------------------------------------------------------------------
# shared plumbing


def _build_world(cfg: ExperimentConfig):
    wc = cfg.world_config()
    if cfg.world_kind == "classification":
        return ClassificationWorld(wc)
    return DetectionWorld(wc)


def _build_task_net(cfg: ExperimentConfig, world, seed: int):
    net = cfg.network()
    if cfg.world_kind == "classification":
        return training.build_classifier(
            world, hidden=net.get("task_hidden") or 64,
            feat_dim=net.get("task_feat_dim") or 32, seed=seed)
    return training.build_detector(
        world, hidden=net.get("task_hidden") or 32,
        feat_dim=net.get("task_feat_dim") or 16, seed=seed)


def _build_selector(cfg: ExperimentConfig, world, task_net, seed: int):
    net = cfg.network()
    sel_seed = net.get("selector_seed")
    return training.build_selector(
        world, task_net, hidden=net.get("selector_hidden") or 64,
        seed=seed if sel_seed is None else sel_seed,
        use_camera_branch=net.get("use_camera_branch", True),
        use_feature_branch=net.get("use_feature_branch", True))


def _check_world_hash(meta: dict, world, path) -> None:
    got, want = meta.get("world_hash"), world.world_hash()
    if got != want:
        raise CompatibilityError(
            f"world hash mismatch for {path}: checkpoint has {got}, config has {want}")


def _load_task_net(cfg: ExperimentConfig, world, path):
    cls = MVClassifier if cfg.world_kind == "classification" else MVDetector
    if not Path(path).exists():
        raise ConfigError(f"task checkpoint not found: {path}")
    net, meta = cls.load(path)
    _check_world_hash(meta, world, path)
    return net


def _load_selector(world, path) -> QNetwork:
    if not Path(path).exists():
        raise ConfigError(f"selector checkpoint not found: {path}")
    q_net, meta = QNetwork.load(path)
    _check_world_hash(meta, world, path)
    return q_net


def _save_addressed_checkpoint(run_dir: Path, stem: str, save_fn) -> Path:
    """Save via ``save_fn(tmp_path)`` then rename to ``<stem>-<sha12>.ckpt``."""
    tmp = run_dir / f".{stem}.part.ckpt"
    save_fn(tmp)
    digest = artifacts.sha256_file(tmp)[:12]
    final = run_dir / f"{stem}-{digest}.ckpt"
    tmp.replace(final)
    return final


def _effective_seed(args, cfg: ExperimentConfig) -> int:
    return args.seed if args.seed is not None else cfg.seed


def _start_run(args, cfg: ExperimentConfig, command: str):
    seed = _effective_seed(args, cfg)
    root = artifacts.output_root(args.out, cfg.output_dir)
    run_dir = artifacts.run_directory(root, command, cfg.config_hash(), seed,
                                      getattr(args, "force", False))
    manifest = artifacts.RunManifest(command=command, config=cfg.raw,
                                     config_hash=cfg.config_hash(), seed=seed)
    return seed, run_dir, manifest


def _finish_run(run_dir: Path, manifest: artifacts.RunManifest, started: float,
                paths) -> None:
    for path in paths:
        manifest.add(run_dir, path)
    manifest.timing_seconds = time.perf_counter() - started
    manifest.write(run_dir)
    print(f"run directory: {run_dir}")
    for entry in sorted(manifest.outputs, key=lambda o: o["path"]):
        print(f"  {entry['path']}  sha256:{entry['sha256'][:12]}")


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    regime = args.regime or cfg.require("train.regime")
    if regime not in REGIMES:
        raise ConfigError(f"regime must be one of {REGIMES}, got {regime!r}")
    started = time.perf_counter()
    seed, run_dir, manifest = _start_run(args, cfg, f"train-{regime}")
    world = _build_world(cfg)
    train_cfg = cfg.train_config(regime=regime, seed=seed)
    world_hash = world.world_hash()
    extra = {"regime": regime, "train_config": asdict(train_cfg),
             "config_hash": cfg.config_hash()}
    outputs = []

    if regime == "task":
        net = _build_task_net(cfg, world, seed)
        result = training.train_task_network(world, net, train_cfg)
        outputs.append(_save_addressed_checkpoint(
            run_dir, "task", lambda p: net.save(p, world_hash, extra)))
    else:
        task_path = cfg.require("train.task_checkpoint")
        task_net = _load_task_net(cfg, world, task_path)
        q_net = _build_selector(cfg, world, task_net, seed)
        if regime == "select-fixed":
            result = training.train_selector_fixed(world, task_net, q_net, train_cfg)
        else:
            result = training.train_joint(world, task_net, q_net, train_cfg)
            outputs.append(_save_addressed_checkpoint(
                run_dir, "task-joint", lambda p: task_net.save(p, world_hash, extra)))
        outputs.append(_save_addressed_checkpoint(
            run_dir, "selector", lambda p: q_net.save(p, world_hash, extra)))

    outputs.append(artifacts.atomic_write_text(
        run_dir / "metrics.jsonl", artifacts.jsonl(result.epoch_logs)))
    outputs.append(artifacts.atomic_write_text(
        run_dir / "counters.json", artifacts.jsonl([{
            "counters": result.counters, "total_steps": result.total_steps}])))
    _finish_run(run_dir, manifest, started, outputs)
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    ev_sec = cfg.eval_section()
    policy = args.policy or ev_sec.get("policy") or cfg.require("eval.policy")
    if policy not in POLICIES:
        raise ConfigError(f"policy must be one of {POLICIES}, got {policy!r}")
    started = time.perf_counter()
    seed, run_dir, manifest = _start_run(args, cfg, f"eval-{policy}")
    world = _build_world(cfg)
    if args.T is not None:
        T = args.T
    elif policy == "full-views":
        T = int(ev_sec.get("T") or world.n_cameras)
    else:
        T = int(cfg.require("eval.T"))
    task_net = _load_task_net(cfg, world, cfg.require("eval.task_checkpoint"))
    q_net = None
    if policy == "mvselect":
        q_net = _load_selector(world, cfg.require("eval.selector_checkpoint"))

    run = training.evaluate_policy(world, task_net, T, policy,
                                   split=ev_sec["split"], q_net=q_net, seed=seed,
                                   budget=int(ev_sec["budget"]))
    cost = evaluation.cost_account(world, task_net, q_net, run.T)
    report = evaluation.build_report(run, cost, cfg.config_hash(), [seed])
    outputs = [artifacts.write_content_addressed(
        run_dir, f"report-{policy}", ".json", report.to_json().encode("utf-8"))]
    if report.frequency is not None:
        outputs.append(artifacts.write_content_addressed(
            run_dir, f"frequency-{policy}", ".csv",
            evaluation.frequency_csv(report.frequency).encode("utf-8")))
    _finish_run(run_dir, manifest, started, outputs)
    print(f"{policy} T={run.T} {run.split}: " + ", ".join(
        f"{k}={v:.4f}" for k, v in sorted(report.metrics.items())))
    return 0


# ---------------------------------------------------------------------------
# study


def cmd_study(args) -> int:
    cfg = load_config(args.config)
    study = args.study
    started = time.perf_counter()
    seed, run_dir, manifest = _start_run(args, cfg, f"study-{study}")
    world = _build_world(cfg)
    ev_sec = cfg.eval_section()
    task_net = _load_task_net(cfg, world, cfg.require("eval.task_checkpoint"))
    selector_cfg = None
    if (cfg.raw.get("train") or {}).get("epochs") is not None:
        selector_cfg = cfg.train_config(regime="select-fixed", seed=seed)
    outputs = []

    if study == "sweep-T":
        t_values = [int(t) for t in cfg.require("eval.T_values")]
        policies = tuple(ev_sec.get("policies") or studies.SWEEP_POLICIES)
        q_nets = {}
        for key, path in (ev_sec.get("selector_checkpoints") or {}).items():
            q_nets[int(key)] = _load_selector(world, path)
        rows = studies.sweep_view_budget(
            world, task_net, t_values, policies=policies, q_nets=q_nets,
            selector_cfg=selector_cfg, split=ev_sec["split"], seed=seed,
            budget=int(ev_sec["budget"]))
        payload = artifacts.jsonl(rows)
        outputs.append(artifacts.write_content_addressed(
            run_dir, "study-sweep", ".jsonl", payload.encode("utf-8")))
        outputs.append(artifacts.write_content_addressed(
            run_dir, "study-sweep", ".csv", studies.sweep_csv(rows).encode("utf-8")))
    elif study == "shutoff":
        q_net = _load_selector(world, cfg.require("eval.selector_checkpoint"))
        out = studies.camera_shutoff_study(
            world, task_net, q_net, T=int(cfg.require("eval.T")),
            k=int(ev_sec["k"]), rank_split=ev_sec["rank_split"],
            eval_split=ev_sec["split"], n_random=int(ev_sec["n_random"]), seed=seed)
        outputs.append(artifacts.write_content_addressed(
            run_dir, "study-shutoff", ".json", _study_json(out)))
    elif study == "random-pose":
        if selector_cfg is None:
            raise ConfigError("missing required key: train.epochs "
                              "(random-pose retrains the selector)")
        out = studies.random_pose_study(
            world, task_net, T=int(cfg.require("eval.T")),
            selector_cfg=selector_cfg, split=ev_sec["split"], seed=seed,
            budget=int(ev_sec["budget"]))
        outputs.append(artifacts.write_content_addressed(
            run_dir, "study-random-pose", ".json", _study_json(out)))
        outputs.append(artifacts.write_content_addressed(
            run_dir, "study-random-pose", ".csv",
            evaluation.table_csv(out["rows"], _row_fields(out["rows"])).encode("utf-8")))
    else:  # ablation
        if selector_cfg is None:
            raise ConfigError("missing required key: train.epochs "
                              "(the ablation retrains the selector per variant)")
        rows = studies.selector_ablation_study(
            world, task_net, T=int(cfg.require("eval.T")),
            selector_cfg=selector_cfg, split=ev_sec["split"])
        outputs.append(artifacts.write_content_addressed(
            run_dir, "study-ablation", ".json", _study_json(rows)))
        outputs.append(artifacts.write_content_addressed(
            run_dir, "study-ablation", ".csv",
            evaluation.table_csv(rows, _row_fields(rows)).encode("utf-8")))

    _finish_run(run_dir, manifest, started, outputs)
    return 0


def _study_json(payload) -> bytes:
    import json
    return (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8")


def _row_fields(rows: list[dict]) -> list[str]:
    head = [k for k in ("variant", "policy", "T") if k in rows[0]]
    return head + sorted(k for k in rows[0] if k not in head)


# ---------------------------------------------------------------------------
# oracle


def cmd_oracle(args) -> int:
    cfg = load_config(args.config)
    policy = args.policy or cfg.require("eval.policy")
    if policy not in ORACLE_POLICIES:
        raise ConfigError(f"oracle policy must be one of {ORACLE_POLICIES}, got {policy!r}")
    started = time.perf_counter()
    seed, run_dir, manifest = _start_run(args, cfg, f"oracle-{policy}")
    world = _build_world(cfg)
    ev_sec = cfg.eval_section()
    T = args.T if args.T is not None else int(cfg.require("eval.T"))
    task_net = _load_task_net(cfg, world, cfg.require("eval.task_checkpoint"))
    build = (training.dataset_oracle_table if policy == "dataset-oracle"
             else training.instance_oracle_table)
    table = build(world, task_net, T, ev_sec["split"], int(ev_sec["budget"]))
    outputs = [artifacts.write_content_addressed(
        run_dir, f"table-{table.kind}-T{T}", ".json", table.to_json().encode("utf-8"))]
    _finish_run(run_dir, manifest, started, outputs)
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewview",
        description="Train, evaluate, and study camera-view selection policies.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment YAML path")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's run seed")
        p.add_argument("--out", default=None,
                       help=f"output root (beats ${artifacts.OUTPUT_ROOT_ENV} and config)")
        p.add_argument("--force", action="store_true",
                       help="overwrite a finished run directory")

    p_train = sub.add_parser("train", help="train a network per the config")
    common(p_train)
    p_train.add_argument("--regime", choices=REGIMES, default=None)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate one policy on one split")
    common(p_eval)
    p_eval.add_argument("--policy", choices=POLICIES, default=None)
    p_eval.add_argument("--T", type=int, default=None, help="view budget")
    p_eval.set_defaults(fn=cmd_eval)

    p_study = sub.add_parser("study", help="run a named study")
    p_study.add_argument("study", choices=STUDIES)
    common(p_study)
    p_study.set_defaults(fn=cmd_study)

    p_oracle = sub.add_parser("oracle", help="export an oracle policy table")
    common(p_oracle)
    p_oracle.add_argument("--policy", choices=ORACLE_POLICIES, default=None)
    p_oracle.add_argument("--T", type=int, default=None, help="view budget")
    p_oracle.set_defaults(fn=cmd_oracle)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CompatibilityError as exc:
        print(f"compatibility error: {exc}", file=sys.stderr)
        return 3
    except BudgetError as exc:
        print(f"budget error: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not raises
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
