"""Selection-agent checks: state construction, a hand-traced two-branch value
network, masked epsilon-greedy statistics, TD targets, and the RL loss
gradient against finite differences."""

import numpy as np
import pytest

from fewview.errors import ShapeError, StateError
from fewview.mvselect import (
    QNetwork,
    SelectionState,
    Trajectory,
    build_state,
    epsilon_schedule,
    masked_argmax,
    q_gradients,
    reduce_feature,
    rl_loss,
    select_action,
    td_targets,
    terminal_reward,
)
from fewview.numcore import max_relative_error, numeric_gradient

GRAD_TOL = 1e-4


# ---------------------------------------------------------------------------
# state construction


def test_build_state_one_hot_examples():
    s = build_state([2], [np.zeros(3)], n_cameras=4)
    np.testing.assert_array_equal(s.cam_vector, [0, 0, 1, 0])
    s = build_state([0, 2], [np.zeros(3), np.zeros(3)], n_cameras=4)
    np.testing.assert_array_equal(s.cam_vector, [1, 0, 1, 0])
    assert s.chosen == (0, 2)


def test_build_state_running_max():
    s = build_state([0, 1], [np.array([1.0, 5.0]), np.array([3.0, 2.0])], n_cameras=3)
    np.testing.assert_array_equal(s.obs_vector, [3.0, 5.0])


def test_build_state_reduces_feature_maps():
    a = np.arange(8.0).reshape(2, 2, 2)
    b = a[:, ::-1, :]
    s = build_state([0, 1], [a, b], n_cameras=2)
    expected = np.maximum(a, b).mean(axis=(1, 2))
    np.testing.assert_array_equal(s.obs_vector, expected)
    np.testing.assert_array_equal(reduce_feature(a), a.mean(axis=(1, 2)))


def test_build_state_order_insensitive():
    feats = {0: np.array([1.0, 0.0]), 3: np.array([0.0, 2.0]), 4: np.array([5.0, -1.0])}
    a = build_state([0, 3, 4], [feats[0], feats[3], feats[4]], n_cameras=6)
    b = build_state([4, 0, 3], [feats[4], feats[0], feats[3]], n_cameras=6)
    np.testing.assert_array_equal(a.cam_vector, b.cam_vector)
    np.testing.assert_array_equal(a.obs_vector, b.obs_vector)


def test_build_state_guards():
    with pytest.raises(StateError):
        build_state([1, 1], [np.zeros(2), np.zeros(2)], n_cameras=3)
    with pytest.raises(ShapeError):
        build_state([], [], n_cameras=3)
    with pytest.raises(ShapeError):
        build_state([5], [np.zeros(2)], n_cameras=3)
    with pytest.raises(ShapeError):
        build_state([0, 1], [np.zeros(2)], n_cameras=3)


# ---------------------------------------------------------------------------
# value network


def hand_set_qnet():
    net = QNetwork(n_cameras=2, feat_dim=2, hidden=2, seed=0)
    net.embeddings[...] = np.eye(2)
    net.camera_branch.weights[0][...] = np.eye(2)
    net.camera_branch.biases[0][...] = 0.0
    net.feature_branch.weights[0][...] = np.eye(2)
    net.feature_branch.biases[0][...] = 0.0
    net.combiner.weights[0][...] = np.eye(2)
    net.combiner.biases[0][...] = 0.0
    net.combiner.weights[1][...] = np.array([[1.0, 1.0], [2.0, -1.0]])
    net.combiner.biases[1][...] = np.array([0.5, 0.0])
    return net


def test_hand_traced_two_branch_values():
    # cam [1,0] -> embedding sum [1,0] -> relu [1,0]; obs [0.3,0.7] -> relu
    # [0.3,0.7]; summed [1.3,0.7] -> relu -> rows [1.3+0.7+0.5, 2*1.3-0.7]
    net = hand_set_qnet()
    state = build_state([0], [np.array([0.3, 0.7])], n_cameras=2)
    np.testing.assert_allclose(net.q_values(state), [2.5, 1.9], atol=1e-15)


def test_feature_branch_off_ignores_observations():
    net = QNetwork(n_cameras=3, feat_dim=4, hidden=5, seed=1, use_feature_branch=False)
    a = build_state([1], [np.full(4, 9.0)], n_cameras=3)
    b = build_state([1], [np.full(4, -9.0)], n_cameras=3)
    np.testing.assert_array_equal(net.q_values(a), net.q_values(b))


def test_camera_branch_off_ignores_history_beyond_observation():
    net = QNetwork(n_cameras=4, feat_dim=3, hidden=5, seed=2, use_camera_branch=False)
    obs = np.array([0.5, -0.2, 1.0])
    a = SelectionState(np.array([1.0, 1, 0, 0]), obs, (0, 1))
    b = SelectionState(np.array([0.0, 0, 1, 1]), obs, (2, 3))
    np.testing.assert_array_equal(net.q_values(a), net.q_values(b))


def test_both_branches_off_rejected():
    with pytest.raises(ShapeError):
        QNetwork(2, 2, 2, 0, use_camera_branch=False, use_feature_branch=False)


def test_batched_values_match_singletons():
    net = QNetwork(n_cameras=5, feat_dim=3, hidden=6, seed=3)
    rng = np.random.default_rng(4)
    states = [
        build_state([i], [rng.normal(size=3)], n_cameras=5) for i in range(4)
    ]
    batch = net.q_values_batch(states)
    for i, s in enumerate(states):
        np.testing.assert_allclose(batch[i], net.q_values(s), rtol=1e-12, atol=1e-14)


def test_qnetwork_checkpoint_round_trip(tmp_path):
    net = QNetwork(n_cameras=4, feat_dim=3, hidden=5, seed=9, use_camera_branch=False)
    path = tmp_path / "q.ckpt"
    net.save(path, world_hash="wh")
    loaded, meta = QNetwork.load(path)
    assert meta["world_hash"] == "wh"
    assert loaded.use_camera_branch is False
    state = build_state([2], [np.array([1.0, 2.0, 3.0])], n_cameras=4)
    np.testing.assert_array_equal(loaded.q_values(state), net.q_values(state))


# ---------------------------------------------------------------------------
# action selection


class StubNet:
    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)
        self.n_cameras = len(self.values)

    def q_values(self, state):
        return self.values


def any_state(n):
    return SelectionState(np.zeros(n), np.zeros(2), (0,))


def test_masked_argmax_examples():
    assert masked_argmax(np.array([0.1, 0.9, 0.5]), set()) == 1
    assert masked_argmax(np.array([0.1, 0.9, 0.5]), {1}) == 2
    assert masked_argmax(np.array([0.7, 0.7, 0.1]), set()) == 0  # tie -> lowest
    with pytest.raises(StateError):
        masked_argmax(np.array([1.0, 2.0]), {0, 1})


def test_select_action_greedy():
    net = StubNet([0.1, 0.9, 0.5])
    rng = np.random.default_rng(0)
    assert select_action(net, any_state(3), 0.0, set(), rng) == 1
    assert select_action(net, any_state(3), 0.0, {1}, rng) == 2


def test_select_action_all_masked():
    net = StubNet([0.1, 0.9])
    with pytest.raises(StateError):
        select_action(net, any_state(2), 0.0, {0, 1}, np.random.default_rng(0))


def test_select_action_uniform_frequencies():
    # epsilon 1, one camera masked: the three open cameras should each appear
    # with frequency 1/3 within 3 sigma of the multinomial spread
    net = StubNet([5.0, 1.0, 1.0, 1.0])
    rng = np.random.default_rng(123)
    draws = 100_000
    counts = np.zeros(4)
    state = any_state(4)
    for _ in range(draws):
        counts[select_action(net, state, 1.0, {2}, rng)] += 1
    assert counts[2] == 0
    sigma = np.sqrt((1 / 3) * (2 / 3) / draws)
    for cam in (0, 1, 3):
        assert abs(counts[cam] / draws - 1 / 3) <= 3 * sigma


def test_select_action_deterministic_given_rng_state():
    net = StubNet([0.0, 0.0, 0.0])
    a = select_action(net, any_state(3), 0.7, set(), np.random.default_rng(5))
    b = select_action(net, any_state(3), 0.7, set(), np.random.default_rng(5))
    assert a == b


# ---------------------------------------------------------------------------
# rewards, targets, loss


def test_terminal_reward_classification():
    assert terminal_reward(np.array([0.2, 0.9, 0.1]), 1, "classification") == 1.0
    assert terminal_reward(np.array([0.2, 0.9, 0.1]), 0, "classification") == 0.0


def test_terminal_reward_detection():
    target = np.random.default_rng(6).uniform(size=(3, 3))
    assert terminal_reward(target.copy(), target, "detection") == 0.0
    assert terminal_reward(np.zeros((3, 3)), target, "detection") < 0.0


def test_terminal_reward_mode_guard():
    with pytest.raises(ValueError):
        terminal_reward(np.zeros(2), 0, "other")


def two_step_trajectory():
    obs = np.zeros(2)
    s1 = SelectionState(np.array([1.0, 0, 0]), obs, (0,))
    s2 = SelectionState(np.array([1.0, 1, 0]), obs, (0, 1))
    return Trajectory(states=[s1, s2], actions=[1, 2], rewards=[0.0, 1.0], q_taken=[0.2, 0.3])


def test_td_targets_terminal_and_discounted():
    traj = two_step_trajectory()
    # best next value must come from unmasked cameras only: cameras 0 and 1
    # are already chosen in s2, so the 9.9 entries cannot be picked
    net = StubNet([9.9, 9.9, 0.8])
    targets = td_targets(traj, net, gamma=0.5)
    np.testing.assert_allclose(targets, [0.5 * 0.8, 1.0], atol=1e-15)


def test_td_targets_zero_discount():
    traj = two_step_trajectory()
    targets = td_targets(traj, StubNet([1.0, 1.0, 1.0]), gamma=0.0)
    np.testing.assert_array_equal(targets, [0.0, 1.0])


def test_td_targets_respect_disabled_cameras():
    traj = two_step_trajectory()
    net = StubNet([9.9, 9.9, 0.8])
    # disabling camera 2 leaves no unmasked camera at s2
    with pytest.raises(StateError):
        td_targets(traj, net, gamma=0.5, disabled={2})


def test_trajectory_validation():
    obs = np.zeros(2)
    s1 = SelectionState(np.array([1.0, 0, 0]), obs, (0,))
    s2 = SelectionState(np.array([1.0, 1, 0]), obs, (0, 1))
    with pytest.raises(StateError):
        Trajectory([s1, s2], [1, 2], [0.5, 1.0], [0.0, 0.0])  # interim reward
    with pytest.raises(StateError):
        Trajectory([s1, s2], [1, 1], [0.0, 1.0], [0.0, 0.0])  # repeat
    with pytest.raises(StateError):
        Trajectory([s1, s2], [0, 2], [0.0, 1.0], [0.0, 0.0])  # initial again
    with pytest.raises(StateError):
        Trajectory([], [], [], [])


def test_rl_loss_values():
    loss, grad = rl_loss([0.4], [0.9])
    assert abs(loss - 0.25) < 1e-15
    np.testing.assert_allclose(grad, [-1.0], atol=1e-15)
    loss, _ = rl_loss([0.3, 0.7], [0.3, 0.7])
    assert loss == 0.0


def test_rl_loss_gradient_matches_finite_differences():
    net = QNetwork(n_cameras=4, feat_dim=3, hidden=5, seed=7)
    rng = np.random.default_rng(8)
    states = [build_state([i], [rng.normal(size=3)], n_cameras=4) for i in range(3)]
    actions = [1, 3, 2]
    targets = rng.normal(size=3)

    def loss_fn():
        q = net.q_values_batch(states)
        taken = [q[i, a] for i, a in enumerate(actions)]
        return rl_loss(taken, targets)[0]

    q = net.q_values_batch(states)
    _, d_terms = rl_loss([q[i, a] for i, a in enumerate(actions)], targets)
    grads, d_obs = q_gradients(net, states, actions, d_terms)
    for name, param in net.named_params():
        num = numeric_gradient(loss_fn, param)
        assert max_relative_error(grads[name], num) < GRAD_TOL, name
    # observation-vector gradient, probed through the frozen state arrays
    for i, state in enumerate(states):
        num = numeric_gradient(loss_fn, state.obs_vector)
        assert max_relative_error(d_obs[i], num) < GRAD_TOL


def test_epsilon_schedule():
    assert epsilon_schedule(0, 100) == 0.95
    assert abs(epsilon_schedule(99, 100) - 0.05) < 1e-12
    assert abs(epsilon_schedule(50, 101) - 0.5) < 1e-12
    assert epsilon_schedule(0, 1) == 0.05
    assert abs(epsilon_schedule(500, 100) - 0.05) < 1e-12
