"""Training regimes and reference policies.

Three regimes: task-network training on all views, selector training against
a frozen task network, and joint training where every iteration rolls out
epsilon-greedy selections, regresses the taken action values onto inline TD
targets, adds the terminal task loss, and updates both networks (the task
network at a fifth of its usual learning rate).

Reference policies: uniform-random completion, a dataset-level oracle that
fixes the best view set per initial view on a designated split, and an
instance-level oracle that picks the best set per instance. Both oracles
enumerate view sets rather than sequences; pooling is order-invariant, so the
sequence space collapses to the binomial one.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from . import evaluation
from .envs import EVAL, TRAIN, VAL
from .errors import BudgetError, ConfigError, StateError, TrainingDiverged
from .mvselect import (
    SelectionState,
    Trajectory,
    QNetwork,
    epsilon_schedule,
    q_gradients,
    rl_loss,
    select_action,
    td_targets,
    terminal_reward,
)
from .numcore import Adam, cross_entropy
from .tasknet import MVClassifier, MVDetector, pool_with_argmax, route_pooled_grad, task_loss

Array = np.ndarray

REGIMES = ("task", "select-fixed", "joint")
POLICIES = ("mvselect", "random", "dataset-oracle", "instance-oracle", "full-views")
SPLITS = {"train": TRAIN, "val": VAL, "eval": EVAL}
JOINT_TASK_LR_FACTOR = 0.2  # the task network learns at a fifth of its rate
DEFAULT_ENUM_BUDGET = 5_000_000


@dataclass(frozen=True)
class TrainConfig:
    regime: str
    epochs: int
    T: int
    batch_size: int = 8
    task_lr: float = 1e-3
    selector_lr: float = 1e-3
    gamma: float = 0.99
    epsilon_start: float = 0.95
    epsilon_end: float = 0.05
    joint_task_lr_factor: float = JOINT_TASK_LR_FACTOR
    seed: int = 0
    # view-count mix for task-only training; None trains on all N views
    train_view_counts: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.T < 1:
            raise ConfigError("T must be at least 1")
        if self.regime != "task" and self.T < 2:
            raise ConfigError("selection regimes need T >= 2")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.joint_task_lr_factor <= 0:
            raise ConfigError("joint_task_lr_factor must be positive")


@dataclass
class TrainResult:
    epoch_logs: list[dict]
    counters: dict[str, int]
    total_steps: int

    @property
    def final_loss(self) -> float:
        return self.epoch_logs[-1]["loss"] if self.epoch_logs else float("nan")


def params_hash(net) -> str:
    digest = hashlib.sha256()
    for name, param in sorted(net.named_params()):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(param, dtype="<f8").tobytes())
    return digest.hexdigest()


def build_classifier(world, hidden: int = 64, feat_dim: int = 32, seed: int = 0) -> MVClassifier:
    return MVClassifier(
        obs_dim=world.config.feat_dim,
        feat_dim=feat_dim,
        n_classes=world.config.n_classes,
        hidden=hidden,
        seed=seed,
    )


def build_detector(world, hidden: int = 32, feat_dim: int = 16, seed: int = 0) -> MVDetector:
    return MVDetector(channels=world.config.channels, feat_dim=feat_dim, hidden=hidden, seed=seed)


def build_selector(world, task_net, hidden: int = 64, seed: int = 0, **flags) -> QNetwork:
    return QNetwork(
        n_cameras=world.n_cameras,
        feat_dim=task_net.feat_dim,
        hidden=hidden,
        seed=seed,
        **flags,
    )


def _mode_of(task_net) -> str:
    return "classification" if task_net.kind == "classifier" else "detection"


def _check_t(world, T: int) -> None:
    if not 1 <= T <= world.n_cameras:
        raise ConfigError(f"T={T} is outside the {world.n_cameras}-camera layout")
    usable = len(world.layout.enabled)
    if usable < T:
        raise ConfigError(f"shut-off leaves {usable} usable cameras, fewer than T={T}")


def _require_finite_loss(value: float, where: str) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at {where}")


def _split_tag(split: str) -> int:
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {sorted(SPLITS)}, got {split!r}")
    return SPLITS[split]


def _split_size(world, split: str) -> int:
    return world.split_size(_split_tag(split))


# ---------------------------------------------------------------------------
# per-instance features and predictions


def _instance_features(task_net, instance) -> Array:
    """Features for every view of one instance: (N, D) or (N, D, H, W)."""
    return task_net.features(instance.observations)


def _predict_sets(task_net, feats: Array, view_sets: Array):
    """Predictions for many view subsets of one instance.

    view_sets is (S, k) integer view ids. Classification returns logits
    (S, C); detection returns heatmaps (S, H, W).
    """
    pooled = feats[view_sets].max(axis=1)  # (S, D, ...) max over the k views
    if pooled.ndim == 2:
        return task_net.head(pooled)
    return np.stack([task_net.head(p) for p in pooled])


# ---------------------------------------------------------------------------
# task-network training


def train_task_network(world, net, cfg: TrainConfig) -> TrainResult:
    """Train the task network alone; every batch uses all views unless the
    config asks for a mix of view counts."""
    if cfg.regime != "task":
        raise ConfigError("train_task_network expects the task regime")
    rng = np.random.default_rng([cfg.seed, 11])
    n = world.n_train
    n_cams = world.n_cameras
    counts = cfg.train_view_counts
    if counts is not None and any(not 1 <= c <= n_cams for c in counts):
        raise ConfigError("train_view_counts entries must lie in [1, N]")
    mode = _mode_of(net)
    opt = Adam(net.named_params(), lr=cfg.task_lr)
    logs: list[dict] = []
    counters = {"task_terms": 0, "rl_terms": 0}
    steps = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        batch = cfg.batch_size if mode == "classification" else 1
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            if counts is None:
                views = np.arange(n_cams)
            else:
                size = int(counts[rng.integers(len(counts))])
                views = np.sort(rng.permutation(n_cams)[:size])
            if mode == "classification":
                loss, grads = _classifier_loss_on_views(net, world, idx, views)
            else:
                loss, grads = _detector_loss_on_views(net, world, int(idx[0]), views)
            _require_finite_loss(loss, f"epoch {epoch}")
            opt.step(grads)
            counters["task_terms"] += 1
            losses.append(loss)
            steps += 1
        logs.append({"epoch": epoch, "loss": float(np.mean(losses))})
    return TrainResult(logs, counters, steps)


def _classifier_loss_on_views(net: MVClassifier, world, idx, views) -> tuple[float, dict]:
    obs = np.stack([world.train_instance(int(i)).observations for i in idx])
    labels = np.array([world.train_instance(int(i)).class_id for i in idx])
    feats, fcache = net.features_cache(obs[:, views])          # (B, V, D)
    pooled, amax = pool_with_argmax(feats.transpose(1, 0, 2))  # pool over views
    logits, hcache = net.head_cache(pooled)
    loss, d_logits = cross_entropy(logits, labels)
    grads, d_pooled = net.head_backward(hcache, d_logits)
    d_feats = route_pooled_grad(d_pooled, amax, len(views)).transpose(1, 0, 2)
    grads.update(net.features_backward(fcache, d_feats))
    return loss, grads


def _detector_loss_on_views(net: MVDetector, world, index: int, views) -> tuple[float, dict]:
    inst = world.train_instance(index)
    feats, fcache = net.features_cache(inst.observations[views])
    pooled, amax = pool_with_argmax(feats)
    heat, hcache = net.head_cache(pooled)
    loss, d_heat = task_loss(heat, inst.target, "detection")
    grads, d_pooled = net.head_backward(hcache, d_heat)
    d_feats = route_pooled_grad(d_pooled, amax, len(views))
    grads.update(net.features_backward(fcache, d_feats))
    return loss, grads


# ---------------------------------------------------------------------------
# rollouts (training side)


def _state_from_history(history, pooled_feature, n_cams) -> SelectionState:
    cam = np.zeros(n_cams)
    for c in history:
        cam[c] += 1.0
    obs = pooled_feature
    if obs.ndim > 1:
        obs = obs.mean(axis=tuple(range(1, obs.ndim)))
    return SelectionState(cam, obs.copy(), tuple(history))


def _rollout_training_batch(task_net, q_net, world, indices, initial, T, epsilon, rng):
    """Epsilon-greedy rollouts for a batch of training instances.

    Returns (trajectories, feats, fcache, truth, pooled): per-view features
    with their forward cache (needed to push gradients back into the feature
    extractor), ground truth, and the terminal pooled features per instance.
    """
    mode = _mode_of(task_net)
    disabled = world.layout.disabled
    n_cams = world.n_cameras
    batch = len(indices)
    insts = [world.instance(TRAIN, int(i)) for i in indices]
    if mode == "classification":
        obs = np.stack([inst.observations for inst in insts])
        feats, fcache = task_net.features_cache(obs)            # (B, N, D)
        truth = [inst.class_id for inst in insts]
    else:
        per_view, fcache = task_net.features_cache(insts[0].observations)
        feats = per_view[None]                                  # (1, N, D, H, W)
        truth = [insts[0].target]
    histories = [[int(v)] for v in initial]
    pooled = [feats[b, histories[b][0]].copy() for b in range(batch)]
    states: list[list[SelectionState]] = [[] for _ in range(batch)]
    actions: list[list[int]] = [[] for _ in range(batch)]
    for _step in range(T - 1):
        for b in range(batch):
            s = _state_from_history(histories[b], pooled[b], n_cams)
            states[b].append(s)
            mask = set(histories[b]) | set(disabled)
            a = select_action(q_net, s, epsilon, mask, rng)
            actions[b].append(a)
            histories[b].append(a)
            pooled[b] = np.maximum(pooled[b], feats[b, a])
    if mode == "classification":
        predictions = list(task_net.head(np.stack(pooled)))
    else:
        predictions = [task_net.head(p) for p in pooled]
    trajectories: list[Trajectory] = []
    for b in range(batch):
        reward = terminal_reward(predictions[b], truth[b], mode)
        rewards = [0.0] * (T - 2) + [reward]
        q_taken = [float(q_net.q_values(states[b][t])[actions[b][t]]) for t in range(T - 1)]
        trajectories.append(Trajectory(states[b], actions[b], rewards, q_taken, predictions[b]))
    return trajectories, feats, fcache, truth, pooled


def _route_to_views(d_feats_b, feats_b, views, d_pooled) -> None:
    """Add the gradient of a max-pooled feature over `views` back onto the
    per-view feature buffer, at the lowest-index attaining view."""
    views = np.asarray(views)
    sub = feats_b[views]                 # (k, D, *cells)
    amax = sub.argmax(axis=0)            # (D, *cells)
    if amax.ndim == 0:
        amax = amax[None]
    if amax.ndim == 1:
        d_feats_b[views[amax], np.arange(amax.shape[0])] += d_pooled
    else:
        np.add.at(d_feats_b, (views[amax],) + tuple(np.indices(amax.shape)), d_pooled)


def _accumulate_selection_grads(feats, trajectories, d_obs_rows, row_of_step):
    """Scatter RL observation-vector gradients back onto per-view features.

    The state observation is the (spatially averaged) running max over the
    views chosen so far; each entry flows to the lowest attaining view.
    """
    d_feats = np.zeros_like(feats)
    cells = feats.shape[3:]
    cell_count = int(np.prod(cells)) if cells else 1
    for b, traj in enumerate(trajectories):
        for t, state in enumerate(traj.states):
            d_obs = d_obs_rows[row_of_step[(b, t)]]
            if cells:
                d_pooled = np.broadcast_to(
                    (d_obs / cell_count).reshape((-1,) + (1,) * len(cells)),
                    (d_obs.shape[0],) + cells,
                )
            else:
                d_pooled = d_obs
            _route_to_views(d_feats[b], feats[b], state.chosen, d_pooled)
    return d_feats


# ---------------------------------------------------------------------------
# selector training (fixed task network) and joint training


def train_selector_fixed(world, task_net, q_net, cfg: TrainConfig) -> TrainResult:
    """Train the selector while the task network stays byte-frozen."""
    if cfg.regime != "select-fixed":
        raise ConfigError("train_selector_fixed expects the select-fixed regime")
    frozen = params_hash(task_net)
    result = _selection_training(world, task_net, q_net, cfg, update_task=False)
    if params_hash(task_net) != frozen:
        raise StateError("task network changed during select-fixed training")
    return result


def train_joint(world, task_net, q_net, cfg: TrainConfig) -> TrainResult:
    """Per batch: roll out T-1 epsilon-greedy selections, regress the taken
    action values on inline TD targets, add the terminal task loss, and step
    both networks (task network at a fifth of its learning rate)."""
    if cfg.regime != "joint":
        raise ConfigError("train_joint expects the joint regime")
    return _selection_training(world, task_net, q_net, cfg, update_task=True)


def _selection_training(world, task_net, q_net, cfg, update_task: bool) -> TrainResult:
    _check_t(world, cfg.T)
    mode = _mode_of(task_net)
    batch = cfg.batch_size if mode == "classification" else 1
    rng = np.random.default_rng([cfg.seed, 13])
    n = world.n_train
    iters_per_epoch = (n + batch - 1) // batch
    total_steps = cfg.epochs * iters_per_epoch
    opt_q = Adam(q_net.named_params(), lr=cfg.selector_lr)
    opt_task = (
        Adam(task_net.named_params(), lr=cfg.task_lr * cfg.joint_task_lr_factor)
        if update_task
        else None
    )
    disabled = world.layout.disabled
    logs: list[dict] = []
    counters = {"task_terms": 0, "rl_terms": 0}
    step = 0
    eps = cfg.epsilon_start
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        rl_losses, task_losses = [], []
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            eps = epsilon_schedule(step, total_steps, cfg.epsilon_start, cfg.epsilon_end)
            initial = rng.integers(world.n_cameras, size=len(idx))
            trajectories, feats, fcache, truth, pooled = _rollout_training_batch(
                task_net, q_net, world, idx, initial, cfg.T, eps, rng
            )
            # TD targets from the current network, then one regression step
            flat_states, flat_actions, flat_q, flat_targets = [], [], [], []
            row_of_step = {}
            for b, traj in enumerate(trajectories):
                targets = td_targets(traj, q_net, cfg.gamma, disabled)
                for t in range(len(traj.states)):
                    row_of_step[(b, t)] = len(flat_states)
                    flat_states.append(traj.states[t])
                    flat_actions.append(traj.actions[t])
                    flat_q.append(traj.q_taken[t])
                    flat_targets.append(targets[t])
            loss_rl, d_terms = rl_loss(flat_q, flat_targets)
            loss_rl /= len(trajectories)
            d_terms = d_terms / len(trajectories)
            counters["rl_terms"] += len(flat_states)
            _require_finite_loss(loss_rl, f"epoch {epoch} selection loss")
            q_grads, d_obs_rows = q_gradients(q_net, flat_states, flat_actions, d_terms)
            loss_task = 0.0
            if update_task:
                d_feats = _accumulate_selection_grads(feats, trajectories, d_obs_rows, row_of_step)
                loss_task, task_grads = _terminal_task_grads(
                    task_net, mode, trajectories, truth, pooled, feats, d_feats, fcache
                )
                _require_finite_loss(loss_task, f"epoch {epoch} task loss")
                counters["task_terms"] += 1
                opt_task.step(task_grads)
                task_losses.append(loss_task)
            opt_q.step(q_grads)
            rl_losses.append(loss_rl)
            step += 1
        entry = {"epoch": epoch, "loss": float(np.mean(rl_losses)), "epsilon": float(eps)}
        if update_task:
            entry["task_loss"] = float(np.mean(task_losses))
        logs.append(entry)
    return TrainResult(logs, counters, step)


def _terminal_task_grads(task_net, mode, trajectories, truth, pooled, feats, d_feats, fcache):
    """Task loss at the terminal pooled features. Its pooled gradient is
    routed per view and merged with the selection gradients already in
    d_feats, so the feature extractor takes a single combined step."""
    final_sets = [traj.states[-1].chosen + (traj.actions[-1],) for traj in trajectories]
    if mode == "classification":
        logits, hcache = task_net.head_cache(np.stack(pooled))
        loss, d_logits = cross_entropy(logits, np.asarray(truth))
        grads, d_pooled = task_net.head_backward(hcache, d_logits)
        for b in range(len(trajectories)):
            _route_to_views(d_feats[b], feats[b], final_sets[b], d_pooled[b])
        grads.update(task_net.features_backward(fcache, d_feats))
    else:
        heat, hcache = task_net.head_cache(pooled[0])
        loss, d_heat = task_loss(heat, truth[0], "detection")
        grads, d_pooled = task_net.head_backward(hcache, d_heat)
        _route_to_views(d_feats[0], feats[0], final_sets[0], d_pooled)
        grads.update(task_net.features_backward(fcache, d_feats[0]))
    return loss, grads


# ---------------------------------------------------------------------------
# policy tables (oracles and their export format)


@dataclass(frozen=True)
class PolicyTable:
    """Fixed selections: dataset tables map an initial view to one sequence;
    instance tables map (instance index, initial view) to one sequence."""

    kind: str  # "dataset" | "instance"
    T: int
    entries: dict

    def sequence(self, instance_index: int, initial_view: int) -> tuple[int, ...]:
        if self.kind == "dataset":
            return self.entries[initial_view]
        return self.entries[(instance_index, initial_view)]

    def to_json(self) -> str:
        if self.kind == "dataset":
            body = {str(v): list(seq) for v, seq in sorted(self.entries.items())}
        else:
            body = {f"{i}:{v}": list(self.entries[(i, v)]) for (i, v) in sorted(self.entries)}
        return json.dumps({"kind": self.kind, "T": self.T, "entries": body},
                          sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(text: str) -> "PolicyTable":
        raw = json.loads(text)
        if raw.get("kind") not in ("dataset", "instance"):
            raise ConfigError("policy table kind must be dataset or instance")
        entries = {}
        for key, seq in raw["entries"].items():
            if raw["kind"] == "dataset":
                entries[int(key)] = tuple(int(a) for a in seq)
            else:
                i, v = key.split(":")
                entries[(int(i), int(v))] = tuple(int(a) for a in seq)
        return PolicyTable(raw["kind"], int(raw["T"]), entries)


def check_enumeration_budget(world, T: int, split: str, budget: int = DEFAULT_ENUM_BUDGET) -> int:
    """Subset-evaluation count for an oracle run; raises when over budget."""
    count = _split_size(world, split) * math.comb(world.n_cameras, T)
    if count > budget:
        raise BudgetError(
            f"oracle enumeration needs {count} subset evaluations "
            f"(> budget {budget}); reduce N, T, or the split size"
        )
    return count


def _subset_table(n_cams: int, T: int) -> Array:
    return np.array(list(itertools.combinations(range(n_cams), T)), dtype=int)


def _score_subsets(task_net, world, split: str, T: int):
    """Per-instance scores for every size-T view subset.

    Classification: score = correctness indicator per (instance, subset).
    Detection: score = frame-level accuracy proxy (MODA), with the task loss
    kept for tie-breaking.
    """
    tag = _split_tag(split)
    n = _split_size(world, split)
    subsets = _subset_table(world.n_cameras, T)
    mode = _mode_of(task_net)
    if mode == "classification":
        correct = np.zeros((n, len(subsets)))
        for i in range(n):
            inst = world.instance(tag, i)
            feats = _instance_features(task_net, inst)
            logits = _predict_sets(task_net, feats, subsets)
            correct[i] = (np.argmax(logits, axis=1) == inst.class_id).astype(float)
        return subsets, {"score": correct}
    thr = world.match_threshold_cells
    moda = np.zeros((n, len(subsets)))
    loss = np.zeros((n, len(subsets)))
    for i in range(n):
        inst = world.instance(tag, i)
        feats = _instance_features(task_net, inst)
        heats = _predict_sets(task_net, feats, subsets)
        for s, heat in enumerate(heats):
            loss[i, s] = task_loss(heat, inst.target, "detection")[0]
            frame = evaluation.frame_counts(heat, inst.positions, thr)
            moda[i, s] = evaluation.frame_moda(frame)
    return subsets, {"score": moda, "loss": loss}


def dataset_oracle_table(world, task_net, T: int, split: str,
                         budget: int = DEFAULT_ENUM_BUDGET) -> PolicyTable:
    """Best fixed view set per initial view, judged by the mean score over
    the designated split; ties break to the first subset in sorted order."""
    _check_t(world, T)
    check_enumeration_budget(world, T, split, budget)
    subsets, scores = _score_subsets(task_net, world, split, T)
    mean_score = scores["score"].mean(axis=0)
    entries = {}
    for v0 in range(world.n_cameras):
        member = np.array([v0 in set(s) for s in subsets])
        masked = np.where(member, mean_score, -np.inf)
        best = int(np.argmax(masked))
        entries[v0] = tuple(int(a) for a in subsets[best] if a != v0)
    return PolicyTable("dataset", T, entries)


def instance_oracle_table(world, task_net, T: int, split: str,
                          budget: int = DEFAULT_ENUM_BUDGET) -> PolicyTable:
    """Best view set per (instance, initial view). Classification maximizes
    correctness; detection maximizes frame MODA with task loss as the
    tie-break; remaining ties go to the first subset in sorted order."""
    _check_t(world, T)
    check_enumeration_budget(world, T, split, budget)
    subsets, scores = _score_subsets(task_net, world, split, T)
    n = scores["score"].shape[0]
    tie = scores.get("loss")
    entries = {}
    for i in range(n):
        for v0 in range(world.n_cameras):
            member = np.array([v0 in set(s) for s in subsets])
            primary = np.where(member, scores["score"][i], -np.inf)
            best_val = primary.max()
            candidates = np.flatnonzero(primary == best_val)
            if tie is not None and len(candidates) > 1:
                best = int(candidates[np.argmin(tie[i][candidates])])
            else:
                best = int(candidates[0])
            entries[(i, v0)] = tuple(int(a) for a in subsets[best] if a != v0)
    return PolicyTable("instance", T, entries)


def random_sequence(n_cams: int, initial_view: int, T: int, seed: int,
                    instance_index: int, disabled=frozenset()) -> tuple[int, ...]:
    """Uniform distinct completion of an initial view, avoiding disabled
    cameras; deterministic per (seed, instance, initial view)."""
    rng = np.random.default_rng([seed, 17, instance_index, initial_view])
    open_cams = [c for c in range(n_cams) if c != initial_view and c not in disabled]
    picks = rng.permutation(len(open_cams))[: T - 1]
    return tuple(int(open_cams[p]) for p in picks)


# ---------------------------------------------------------------------------
# greedy rollout (evaluation side) and policy evaluation


def greedy_sequences(q_net, feats: Array, n_cams: int, T: int,
                     disabled=frozenset()) -> Array:
    """Greedy selections for every initial view of one instance: (N, T) ids,
    column 0 the initial view. Runs all initial views as one batch."""
    histories = [[v0] for v0 in range(n_cams)]
    pooled = [feats[v0].copy() for v0 in range(n_cams)]
    for _ in range(T - 1):
        states = [_state_from_history(histories[r], pooled[r], n_cams) for r in range(n_cams)]
        values = q_net.q_values_batch(states)
        for r in range(n_cams):
            mask = set(histories[r]) | set(disabled)
            open_vals = values[r].copy()
            open_vals[list(mask)] = -np.inf
            if not np.isfinite(open_vals).any():
                raise StateError("no selectable camera remains")
            a = int(np.argmax(open_vals))
            histories[r].append(a)
            pooled[r] = np.maximum(pooled[r], feats[a])
    return np.array(histories, dtype=int)


@dataclass
class EvalRun:
    """Raw per-(instance, initial view) evaluation records for one policy."""

    mode: str
    policy: str
    split: str
    T: int
    n_cameras: int
    chosen: Array          # (n, N, T) selected view ids, column 0 = initial
    labels: Array | None = None       # (n,) classification ground truth
    preds: Array | None = None        # (n, N) predicted classes
    frame_counts: Array | None = None  # (n, N, 4) tp, fp, fn, gt
    distance_credit: Array | None = None  # (n, N) sum of (1 - d/thr) over matches

    @property
    def n_instances(self) -> int:
        return self.chosen.shape[0]

    def metrics(self) -> dict:
        if self.mode == "classification":
            return evaluation.classification_metrics(self.preds, self.labels)
        return evaluation.detection_metrics_arrays(self.frame_counts, self.distance_credit)


def evaluate_policy(world, task_net, T: int, policy: str, split: str = "eval",
                    q_net=None, table: PolicyTable | None = None, seed: int = 0,
                    budget: int = DEFAULT_ENUM_BUDGET) -> EvalRun:
    """Evaluate one policy over a split, averaging over every initial view.

    Every camera serves as the initial view once per instance (including
    disabled ones: shut-off constrains selection, not the handed-out start).
    The full-views policy uses all cameras regardless of T.
    """
    if policy not in POLICIES:
        raise ConfigError(f"policy must be one of {POLICIES}, got {policy!r}")
    _check_t(world, T if policy != "full-views" else world.n_cameras)
    mode = _mode_of(task_net)
    tag = _split_tag(split)
    n = _split_size(world, split)
    n_cams = world.n_cameras
    disabled = world.layout.disabled
    if policy == "mvselect" and q_net is None:
        raise ConfigError("mvselect evaluation needs a selector network")
    if policy == "dataset-oracle" and table is None:
        table = dataset_oracle_table(world, task_net, T, split, budget)
    if policy == "instance-oracle" and table is None:
        table = instance_oracle_table(world, task_net, T, split, budget)
    if table is not None and table.T != T:
        raise ConfigError(f"policy table was built for T={table.T}, not T={T}")

    eff_T = n_cams if policy == "full-views" else T
    chosen = np.zeros((n, n_cams, eff_T), dtype=int)
    labels = np.zeros(n, dtype=int) if mode == "classification" else None
    preds = np.zeros((n, n_cams), dtype=int) if mode == "classification" else None
    counts = np.zeros((n, n_cams, 4)) if mode == "detection" else None
    credit = np.zeros((n, n_cams)) if mode == "detection" else None
    thr = world.match_threshold_cells if mode == "detection" else None

    for i in range(n):
        inst = world.instance(tag, i)
        feats = _instance_features(task_net, inst)
        if policy == "full-views":
            sets = np.tile(np.arange(n_cams), (n_cams, 1))
        elif policy == "mvselect":
            sets = greedy_sequences(q_net, feats, n_cams, T, disabled)
        elif policy == "random":
            sets = np.array([
                (v0,) + random_sequence(n_cams, v0, T, seed, i, disabled)
                for v0 in range(n_cams)
            ])
        else:
            sets = np.array([
                (v0,) + table.sequence(i, v0) for v0 in range(n_cams)
            ])
        chosen[i] = sets
        outputs = _predict_sets(task_net, feats, sets)
        if mode == "classification":
            labels[i] = inst.class_id
            preds[i] = np.argmax(outputs, axis=1)
        else:
            for v0 in range(n_cams):
                frame = evaluation.frame_counts(outputs[v0], inst.positions, thr)
                counts[i, v0] = frame[:4]
                credit[i, v0] = frame[4]
    return EvalRun(mode, policy, split, eff_T, n_cams, chosen,
                   labels=labels, preds=preds,
                   frame_counts=counts, distance_credit=credit)


# ---------------------------------------------------------------------------
# exact solver for tiny worlds


def exact_q_table(world, task_net, T: int, split: str = "train",
                  gamma: float = 0.99) -> dict:
    """Exhaustive optimal action values for tiny worlds.

    Keys are (instance index, frozenset of chosen views, action). A value is
    the terminal task reward of the best completion, discounted by gamma per
    remaining step. Only meant for layouts small enough to enumerate."""
    tag = _split_tag(split)
    n = _split_size(world, split)
    n_cams = world.n_cameras
    mode = _mode_of(task_net)
    disabled = world.layout.disabled
    table: dict = {}
    for i in range(n):
        inst = world.instance(tag, i)
        feats = _instance_features(task_net, inst)
        target = inst.class_id if mode == "classification" else inst.target

        def reward_of(view_set: frozenset) -> float:
            sets = np.array([sorted(view_set)])
            pred = _predict_sets(task_net, feats, sets)[0]
            return terminal_reward(pred, target, mode)

        def q_star(chosen: frozenset, action: int) -> float:
            key = (i, chosen, action)
            if key in table:
                return table[key]
            nxt = chosen | {action}
            if len(nxt) == T:
                value = reward_of(nxt)
            else:
                options = [a for a in range(n_cams) if a not in nxt and a not in disabled]
                value = gamma * max(q_star(nxt, a) for a in options)
            table[key] = value
            return value

        for size in range(1, T):
            for combo in itertools.combinations(range(n_cams), size):
                chosen_set = frozenset(combo)
                for a in range(n_cams):
                    if a not in chosen_set and a not in disabled:
                        q_star(chosen_set, a)
    return table


def optimal_actions(table: dict, instance_index: int, chosen) -> set[int]:
    """Actions attaining the optimal value from a chosen-set (tie set)."""
    chosen_set = frozenset(chosen)
    vals = {a: v for (i, s, a), v in table.items()
            if i == instance_index and s == chosen_set}
    if not vals:
        raise StateError("chosen-set missing from the exact table")
    best = max(vals.values())
    return {a for a, v in vals.items() if v == best}
