"""View-selection agent.

The state pairs a camera-count vector (sum of one-hots of the views taken so
far) with a running elementwise max of their features, reduced to a fixed
D-vector so state dimensionality never depends on how many views were taken.
A two-branch value network embeds the camera vector, runs it and the feature
vector through separate branches, sums the branch outputs, and maps them to
one action value per camera. Selection is epsilon-greedy over unmasked
cameras; repeats are forbidden by masking. Temporal-difference targets are
computed inline with the current network: no replay buffer, no target copy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CompatibilityError, ShapeError, StateError
from .numcore import DenseNet, LayerSpec, bev_mse
from .tasknet import aggregate_max

Array = np.ndarray


@dataclass(frozen=True)
class SelectionState:
    cam_vector: Array       # (N,) counts of chosen cameras
    obs_vector: Array       # (D,) running max of chosen features, reduced
    chosen: tuple[int, ...]


def build_state(chosen, features, n_cameras: int) -> SelectionState:
    """State from the chosen cameras and their aligned feature arrays.

    Features may be vectors (used directly) or feature maps (D, H, W...),
    which are max-combined and then averaged over the spatial axes so the
    observation summary stays a D-vector.
    """
    chosen = tuple(int(c) for c in chosen)
    if not chosen:
        raise ShapeError("state needs at least the initial view")
    if len(set(chosen)) != len(chosen):
        raise StateError(f"duplicate camera in history {chosen}")
    if any(not 0 <= c < n_cameras for c in chosen):
        raise ShapeError(f"camera id outside range in {chosen}")
    features = list(features)
    if len(features) != len(chosen):
        raise ShapeError("one feature array per chosen camera required")
    cam = np.zeros(n_cameras)
    for c in chosen:
        cam[c] += 1.0
    pooled = aggregate_max(features)
    if pooled.ndim > 1:
        pooled = pooled.mean(axis=tuple(range(1, pooled.ndim)))
    return SelectionState(cam, pooled, chosen)


def reduce_feature(feature: Array) -> Array:
    """Per-view feature reduced the same way build_state reduces pooled maps."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.ndim > 1:
        return feature.mean(axis=tuple(range(1, feature.ndim)))
    return feature


class QNetwork:
    """Two-branch action-value network over selection states.

    Camera counts are expanded through learnable per-camera embeddings (their
    weighted sum is the branch input), the observation vector feeds the other
    branch, and the elementwise sum of branch outputs drives a combiner that
    emits one value per camera. Either branch can be switched off, in which
    case it contributes an exact zero vector.
    """

    kind = "selector"

    def __init__(
        self,
        n_cameras: int,
        feat_dim: int,
        hidden: int,
        seed: int,
        use_camera_branch: bool = True,
        use_feature_branch: bool = True,
    ):
        if not (use_camera_branch or use_feature_branch):
            raise ShapeError("at least one branch must stay enabled")
        self.n_cameras = n_cameras
        self.feat_dim = feat_dim
        self.hidden = hidden
        self.seed = seed
        self.use_camera_branch = use_camera_branch
        self.use_feature_branch = use_feature_branch
        rng = np.random.default_rng([seed, 0])
        limit = np.sqrt(1.0 / n_cameras)
        self.embeddings = rng.uniform(-limit, limit, size=(n_cameras, feat_dim))
        self.camera_branch = DenseNet([LayerSpec(feat_dim, hidden, "relu")], seed=[seed, 1])
        self.feature_branch = DenseNet([LayerSpec(feat_dim, hidden, "relu")], seed=[seed, 2])
        self.combiner = DenseNet(
            [LayerSpec(hidden, hidden, "relu"), LayerSpec(hidden, n_cameras, "linear")],
            seed=[seed, 3],
        )

    def named_params(self):
        return (
            [("embeddings", self.embeddings)]
            + self.camera_branch.named_params("camera.")
            + self.feature_branch.named_params("feature.")
            + self.combiner.named_params("combiner.")
        )

    def mac_count(self) -> int:
        """Cost of valuing one state: embedding sum plus both branches plus
        the combiner."""
        return (
            self.n_cameras * self.feat_dim
            + self.camera_branch.mac_count()
            + self.feature_branch.mac_count()
            + self.combiner.mac_count()
        )

    def _stack(self, states) -> tuple[Array, Array]:
        cams = np.stack([s.cam_vector for s in states])
        obs = np.stack([s.obs_vector for s in states])
        if cams.shape[1] != self.n_cameras or obs.shape[1] != self.feat_dim:
            raise ShapeError("state dimensions do not match this network")
        return cams, obs

    def q_values_batch(self, states) -> Array:
        cams, obs = self._stack(states)
        hidden = np.zeros((len(states), self.hidden))
        if self.use_camera_branch:
            hidden = hidden + self.camera_branch.forward(cams @ self.embeddings)
        if self.use_feature_branch:
            hidden = hidden + self.feature_branch.forward(obs)
        return self.combiner.forward(hidden)

    def q_values(self, state: SelectionState) -> Array:
        return self.q_values_batch([state])[0]

    def forward_cache(self, states):
        cams, obs = self._stack(states)
        hidden = np.zeros((len(states), self.hidden))
        cam_cache = feat_cache = None
        if self.use_camera_branch:
            hc, cam_cache = self.camera_branch.forward_cache(cams @ self.embeddings)
            hidden = hidden + hc
        if self.use_feature_branch:
            hf, feat_cache = self.feature_branch.forward_cache(obs)
            hidden = hidden + hf
        q, comb_cache = self.combiner.forward_cache(hidden)
        return q, (cams, cam_cache, feat_cache, comb_cache)

    def backward(self, cache, d_q: Array) -> tuple[dict[str, Array], Array]:
        """Gradients for all parameters plus the gradient w.r.t. the states'
        observation vectors (zero when the feature branch is off)."""
        cams, cam_cache, feat_cache, comb_cache = cache
        grads = {name: np.zeros_like(p) for name, p in self.named_params()}
        comb_grads, d_hidden = self.combiner.backward(comb_cache, d_q)
        for k, g in comb_grads.items():
            grads[f"combiner.{k}"] = g
        d_obs = np.zeros((cams.shape[0], self.feat_dim))
        if self.use_camera_branch:
            cam_grads, d_cam_in = self.camera_branch.backward(cam_cache, d_hidden)
            for k, g in cam_grads.items():
                grads[f"camera.{k}"] = g
            grads["embeddings"] = cams.T @ d_cam_in
        if self.use_feature_branch:
            feat_grads, d_obs = self.feature_branch.backward(feat_cache, d_hidden)
            for k, g in feat_grads.items():
                grads[f"feature.{k}"] = g
        return grads, d_obs

    def save(self, path, world_hash: str, extra_meta: dict | None = None) -> None:
        meta = {
            "kind": self.kind,
            "world_hash": world_hash,
            "dims": {
                "n_cameras": self.n_cameras,
                "feat_dim": self.feat_dim,
                "hidden": self.hidden,
                "seed": self.seed,
                "use_camera_branch": self.use_camera_branch,
                "use_feature_branch": self.use_feature_branch,
            },
        }
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, dict(self.named_params()), meta)

    @classmethod
    def load(cls, path) -> tuple["QNetwork", dict]:
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != cls.kind:
            raise CompatibilityError(f"{path}: checkpoint holds a {meta.get('kind')}, not a {cls.kind}")
        net = cls(**meta["dims"])
        for name, param in net.named_params():
            if name not in tensors or tensors[name].shape != param.shape:
                raise CompatibilityError(f"{path}: tensor {name!r} missing or misshaped")
            param[...] = tensors[name]
        return net, meta


def masked_argmax(values: Array, mask) -> int:
    """Index of the largest unmasked value; ties go to the lowest index."""
    work = np.asarray(values, dtype=np.float64).copy()
    work[list(mask)] = -np.inf
    if not np.isfinite(work).any():
        raise StateError("every camera is masked")
    return int(np.argmax(work))


def select_action(net, state: SelectionState, epsilon: float, mask, rng) -> int:
    """Epsilon-greedy selection over unmasked cameras.

    With probability epsilon the action is uniform over unmasked cameras;
    otherwise it is the masked argmax of the network's values. The rng is
    consumed once for the coin and once more only on the random arm, so
    replaying with the same generator state reproduces the choice.
    """
    mask = set(int(m) for m in mask)
    open_cams = [a for a in range(net.n_cameras) if a not in mask]
    if not open_cams:
        raise StateError("every camera is masked")
    if epsilon > 0 and rng.random() < epsilon:
        return int(open_cams[rng.integers(len(open_cams))])
    return masked_argmax(net.q_values(state), mask)


def terminal_reward(prediction: Array, ground_truth, mode: str) -> float:
    """Classification pays 1 for a correct argmax and 0 otherwise; detection
    pays the negative heatmap loss."""
    if mode == "classification":
        return 1.0 if int(np.argmax(prediction)) == int(ground_truth) else 0.0
    if mode == "detection":
        loss, _ = bev_mse(prediction, ground_truth)
        return -loss
    raise ValueError(f"unknown task mode {mode!r}")


@dataclass
class Trajectory:
    """One rollout: states s_1..s_{T-1}, the actions taken from them, the
    rewards observed after each action, and the value the network assigned to
    each taken action."""

    states: list[SelectionState]
    actions: list[int]
    rewards: list[float]
    q_taken: list[float]
    prediction: Array | None = None
    initial_view: int = field(init=False)

    def __post_init__(self):
        n = len(self.states)
        if n == 0:
            raise StateError("empty trajectory")
        if not (len(self.actions) == len(self.rewards) == len(self.q_taken) == n):
            raise StateError("trajectory fields disagree on step count")
        if any(r != 0.0 for r in self.rewards[:-1]):
            raise StateError("rewards before the terminal step must be zero")
        self.initial_view = self.states[0].chosen[0]
        seen = set(self.states[0].chosen)
        for action in self.actions:
            if action in seen:
                raise StateError(f"camera {action} selected twice")
            seen.add(action)


def td_targets(traj: Trajectory, net, gamma: float, disabled=frozenset()) -> Array:
    """Regression targets: the terminal step takes its reward verbatim;
    earlier steps take reward plus the discounted best next-state value over
    cameras not yet chosen and not disabled."""
    n = len(traj.states)
    targets = np.zeros(n)
    targets[-1] = traj.rewards[-1]
    for t in range(n - 1):
        nxt = traj.states[t + 1]
        mask = set(nxt.chosen) | set(disabled)
        values = net.q_values(nxt)
        best = values[masked_argmax(values, mask)]
        targets[t] = traj.rewards[t] + gamma * best
    return targets


def rl_loss(q_taken, targets) -> tuple[float, Array]:
    """Summed squared error between taken-action values and their targets,
    with targets held constant; returns the per-term gradient d/dq."""
    q_taken = np.asarray(q_taken, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if q_taken.shape != targets.shape:
        raise ShapeError("one target per recorded action value required")
    diff = q_taken - targets
    return float(np.sum(diff * diff)), 2.0 * diff


def q_gradients(net: QNetwork, states, actions, d_terms) -> tuple[dict[str, Array], Array]:
    """Backpropagate per-step value gradients through fresh forward passes.

    d_terms[i] is the loss gradient w.r.t. Q(states[i], actions[i]). Returns
    summed parameter gradients and the per-state observation-vector gradient.
    """
    q, cache = net.forward_cache(states)
    d_q = np.zeros_like(q)
    for i, (action, term) in enumerate(zip(actions, d_terms)):
        d_q[i, action] = term
    return net.backward(cache, d_q)


def epsilon_schedule(step: int, total_steps: int, start: float = 0.95, end: float = 0.05) -> float:
    """Linear decay from start to end across the planned training steps."""
    if total_steps <= 1:
        return end
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return start + (end - start) * frac
