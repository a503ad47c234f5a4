"""Experiment studies layered on training and evaluation.

Four studies ship:

- ``sweep_view_budget``: metrics for each policy across a range of view
  budgets T, as plot-ready rows.
- ``camera_shutoff_study``: rank cameras by how often the selector uses them
  on validation, disable the bottom k, and compare against disabling random
  k-subsets.
- ``random_pose_study``: retrain the selector on a pose-randomized world and
  compare random / dataset-oracle / selector policies, where fixed view sets
  lose their edge.
- ``selector_ablation_study``: retrain the selector with each input branch
  removed in turn.
"""

from __future__ import annotations

import copy
from dataclasses import replace

import numpy as np

from . import evaluation, training
from .envs import shut_off_cameras
from .errors import ConfigError

Array = np.ndarray

SWEEP_POLICIES = ("random", "dataset-oracle", "instance-oracle", "mvselect")
ABLATION_VARIANTS = ("full", "no-camera-branch", "no-feature-branch")
STUDIES = ("sweep-T", "shutoff", "random-pose", "ablation")


def world_with_layout(world, layout):
    """Shallow world copy whose selection layout is replaced; instances and
    the world hash are untouched (shut-off changes masks, not observations)."""
    clone = copy.copy(world)
    clone.layout = layout
    return clone


def _flatten_row(head: dict, metrics: dict) -> dict:
    row = dict(head)
    row.update({k: float(v) for k, v in sorted(metrics.items())})
    return row


# ---------------------------------------------------------------------------
# view-budget sweep


def sweep_view_budget(world, task_net, T_values, *, policies=SWEEP_POLICIES,
                      q_nets: dict | None = None,
                      selector_cfg: training.TrainConfig | None = None,
                      split: str = "eval", seed: int = 0,
                      budget: int = training.DEFAULT_ENUM_BUDGET) -> list[dict]:
    """Metric rows for every (T, policy) pair.

    The selector policy needs a trained network per T: pass them in
    ``q_nets`` keyed by T, or pass ``selector_cfg`` to have each one trained
    here. At T = 1 no selection step happens and at T = N masking forces the
    complete view set whatever the Q values, so an untrained selector is
    substituted at those budgets when neither is given.
    """
    T_values = [int(t) for t in T_values]
    q_nets = dict(q_nets or {})
    rows = []
    for t in T_values:
        for policy in policies:
            if policy not in training.POLICIES:
                raise ConfigError(f"unknown policy {policy!r} in sweep")
            q_net = None
            if policy == "mvselect":
                q_net = q_nets.get(t)
                if q_net is None and selector_cfg is not None:
                    q_net = training.build_selector(world, task_net, seed=selector_cfg.seed)
                    training.train_selector_fixed(
                        world, task_net, q_net,
                        replace(selector_cfg, regime="select-fixed", T=t))
                    q_nets[t] = q_net
                elif q_net is None and t in (1, world.n_cameras):
                    # selection is vacuous at T = 1 (no step happens) and at
                    # T = N (masking forces the complete set): any Q works
                    q_net = training.build_selector(world, task_net, seed=seed)
                elif q_net is None:
                    raise ConfigError(
                        f"sweep needs a selector for T={t}: pass q_nets or selector_cfg")
            run = training.evaluate_policy(world, task_net, t, policy, split=split,
                                           q_net=q_net, seed=seed, budget=budget)
            cost = evaluation.cost_account(
                world, task_net, q_net if policy == "mvselect" else None, t)
            row = _flatten_row({"T": t, "policy": policy}, run.metrics())
            row["cost_ratio"] = cost.ratio
            rows.append(row)
    return rows


def sweep_csv(rows: list[dict]) -> str:
    """Plot-ready CSV of sweep rows."""
    if not rows:
        raise ConfigError("sweep produced no rows")
    head = ["T", "policy"]
    metric_keys = sorted(k for k in rows[0] if k not in head)
    return evaluation.table_csv(rows, head + metric_keys)


# ---------------------------------------------------------------------------
# camera shut-off


def rank_cameras_by_usage(world, task_net, q_net, T: int,
                          split: str = "val") -> tuple[Array, Array]:
    """(ranking, usage): cameras ordered least-used first by selector rollouts
    over a split, ties broken by lower camera id."""
    run = training.evaluate_policy(world, task_net, T, "mvselect", split=split,
                                   q_net=q_net)
    usage = evaluation.camera_usage(run.chosen, world.n_cameras)
    ranking = np.argsort(usage, kind="stable")
    return ranking, usage


def camera_shutoff_study(world, task_net, q_net, T: int, k: int, *,
                         rank_split: str = "val", eval_split: str = "eval",
                         n_random: int = 5, seed: int = 0) -> dict:
    """Disable the k least-used cameras (ranked on ``rank_split``) and
    re-evaluate the selector on ``eval_split``; compare against ``n_random``
    random k-subsets of the currently enabled cameras. k = 0 is a no-op."""
    n_cams = world.n_cameras
    enabled = list(world.layout.enabled)
    if not 0 <= k <= len(enabled):
        raise ConfigError(f"cannot disable k={k} of {len(enabled)} enabled cameras")
    if len(enabled) - k < T:
        raise ConfigError(
            f"disabling {k} cameras leaves fewer usable cameras than T={T}")

    baseline = training.evaluate_policy(world, task_net, T, "mvselect",
                                        split=eval_split, q_net=q_net)
    ranking, usage = rank_cameras_by_usage(world, task_net, q_net, T, rank_split)
    ranked_off = [int(c) for c in ranking if int(c) in set(enabled)][:k]

    def _metrics_with_disabled(cams):
        if not cams:
            return training.evaluate_policy(world, task_net, T, "mvselect",
                                            split=eval_split, q_net=q_net).metrics()
        shut_world = world_with_layout(world, shut_off_cameras(world.layout, cams))
        run = training.evaluate_policy(shut_world, task_net, T, "mvselect",
                                       split=eval_split, q_net=q_net)
        return run.metrics()

    ranked_metrics = _metrics_with_disabled(ranked_off)
    random_rows = []
    for r in range(n_random):
        rng = np.random.default_rng([seed, 29, r])
        subset = sorted(int(c) for c in rng.choice(enabled, size=k, replace=False))
        random_rows.append({"disabled": subset,
                            "metrics": _metrics_with_disabled(subset)})
    random_primaries = [row["metrics"]["primary"] for row in random_rows]
    return {
        "T": T,
        "k": k,
        "usage": [float(u) for u in usage],
        "baseline": baseline.metrics(),
        "ranked": {"disabled": ranked_off, "metrics": ranked_metrics},
        "random": random_rows,
        "random_mean_primary": float(np.mean(random_primaries)) if random_rows else None,
    }


# ---------------------------------------------------------------------------
# pose randomization


def random_pose_study(world, task_net, T: int, *,
                      selector_cfg: training.TrainConfig,
                      split: str = "eval", seed: int = 0,
                      budget: int = training.DEFAULT_ENUM_BUDGET) -> dict:
    """Retrain the selector on a pose-randomized world and compare the three
    deployable policies. Randomized object pose breaks any fixed mapping from
    initial view to informative views, which is exactly the regime where
    per-instance selection must outperform fixed sets."""
    if not getattr(world.config, "random_pose", False):
        raise ConfigError("random-pose study needs a world built with random_pose=True")
    q_net = training.build_selector(world, task_net, seed=selector_cfg.seed)
    training.train_selector_fixed(
        world, task_net, q_net, replace(selector_cfg, regime="select-fixed", T=T))
    rows = []
    for policy in ("random", "dataset-oracle", "mvselect"):
        run = training.evaluate_policy(world, task_net, T, policy, split=split,
                                       q_net=q_net if policy == "mvselect" else None,
                                       seed=seed, budget=budget)
        rows.append(_flatten_row({"policy": policy}, run.metrics()))
    return {"T": T, "rows": rows}


# ---------------------------------------------------------------------------
# selector input ablation


def selector_ablation_study(world, task_net, T: int, *,
                            selector_cfg: training.TrainConfig,
                            split: str = "eval") -> list[dict]:
    """Train matched selectors with each state branch removed in turn and
    evaluate them identically. Emits one row per variant: full,
    no-camera-branch, no-feature-branch."""
    flags = {
        "full": {},
        "no-camera-branch": {"use_camera_branch": False},
        "no-feature-branch": {"use_feature_branch": False},
    }
    rows = []
    for variant in ABLATION_VARIANTS:
        q_net = training.build_selector(world, task_net, seed=selector_cfg.seed,
                                        **flags[variant])
        training.train_selector_fixed(
            world, task_net, q_net, replace(selector_cfg, regime="select-fixed", T=T))
        run = training.evaluate_policy(world, task_net, T, "mvselect", split=split,
                                       q_net=q_net)
        rows.append(_flatten_row({"variant": variant}, run.metrics()))
    return rows
