import json

import numpy as np
import pytest

from seqbc.data import (
    Trajectory, LabeledTrajectory, DatasetStats, DatasetError,
    compute_rtg, label_subgoals, label_dataset, compute_stats,
    normalize_states, denormalize_states, sample_batch,
    save_dataset, load_dataset, stats_path,
)


def make_traj(rng, t, d_s=3, d_a=2, rewards=None):
    return Trajectory(
        states=rng.normal(0.0, 1.0, (t, d_s)),
        actions=rng.normal(0.0, 1.0, (t, d_a)),
        rewards=rng.normal(0.0, 1.0, t) if rewards is None else np.asarray(rewards, float))


# ---------------------------------------------------------------------------
# returns-to-go


def test_rtg_hand_oracles():
    np.testing.assert_array_equal(compute_rtg([1, 1, 1]), [3, 2, 1])
    np.testing.assert_array_equal(compute_rtg([0, 0, 0]), [0, 0, 0])
    np.testing.assert_array_equal(compute_rtg([2, -1, 4]), [5, 3, 4])


def test_rtg_recurrence_exact():
    rng = np.random.default_rng(0)
    for _ in range(50):
        r = rng.normal(0.0, 2.0, int(rng.integers(1, 40)))
        rtg = compute_rtg(r)
        assert rtg[-1] == r[-1]
        # each entry is literally built as r[t] + rtg[t+1], so the addition
        # form of the recurrence holds bit-exactly
        np.testing.assert_array_equal(rtg[:-1], r[:-1] + rtg[1:])


# ---------------------------------------------------------------------------
# subgoal labeling vs brute force


def brute_force_subgoals(states, rewards):
    """O(T^2) reference with the same accumulation order (sequential sums)."""
    t = len(rewards)
    out = np.empty_like(states)
    for p in range(t):
        best_q = p
        best_w = -np.inf
        acc = 0.0
        for q in range(p, t):
            acc = acc + rewards[q]
            w = acc / (q - p + 1)
            if w > best_w:
                best_w = w
                best_q = q
        out[p] = states[best_q]
    return out


def test_subgoal_spec_example():
    # rewards [0, 1, 0, 5]: from the first position the running means are
    # [0, 0.5, 1/3, 1.5], so the subgoal is the final state
    states = np.arange(4, dtype=float).reshape(4, 1)
    sg = label_subgoals(states, [0.0, 1.0, 0.0, 5.0])
    assert sg[0, 0] == 3.0


def test_subgoal_constant_rewards_tie_break():
    # equal scores everywhere: earliest candidate wins, which is the
    # position itself
    states = np.arange(5, dtype=float).reshape(5, 1)
    sg = label_subgoals(states, np.full(5, 2.5))
    np.testing.assert_array_equal(sg[:, 0], np.arange(5.0))


def test_subgoal_single_step():
    states = np.array([[7.0, 1.0]])
    sg = label_subgoals(states, [0.3])
    np.testing.assert_array_equal(sg, states)


def test_subgoal_last_position_is_final_state():
    rng = np.random.default_rng(1)
    tr = make_traj(rng, 9)
    sg = label_subgoals(tr.states, tr.rewards)
    np.testing.assert_array_equal(sg[-1], tr.states[-1])


def test_subgoals_match_brute_force_1000_trajectories():
    rng = np.random.default_rng(2)
    for i in range(1000):
        t = int(rng.integers(1, 61))
        states = rng.normal(0.0, 1.0, (t, 2))
        kind = i % 5
        if kind == 0:
            rewards = rng.integers(-1, 2, t).astype(float)  # heavy exact ties
        elif kind == 1:
            rewards = np.full(t, float(rng.integers(-3, 4)))
        else:
            rewards = rng.normal(0.0, 1.0, t)
        fast = label_subgoals(states, rewards)
        slow = brute_force_subgoals(states, rewards)
        np.testing.assert_array_equal(fast, slow, err_msg=f"trajectory {i}")


# ---------------------------------------------------------------------------
# labeling and stats


def test_label_dataset_idempotent():
    rng = np.random.default_rng(3)
    trajs = [make_traj(rng, 6), make_traj(rng, 11)]
    once = label_dataset(trajs)
    twice = label_dataset(once)
    for a, b in zip(once, twice):
        np.testing.assert_array_equal(a.rtg, b.rtg)
        np.testing.assert_array_equal(a.subgoals, b.subgoals)


def test_stats_and_normalization():
    states = np.array([[-2.0, 5.0], [2.0, 5.0], [1.0, 5.0]])
    trajs = [Trajectory(states=states, actions=np.zeros((3, 1)),
                        rewards=np.array([1.0, 2.0, 3.0]))]
    stats = compute_stats(trajs)
    np.testing.assert_array_equal(stats.state_min, [-2.0, 5.0])
    np.testing.assert_array_equal(stats.state_max, [2.0, 5.0])
    assert stats.max_return == 6.0
    norm = normalize_states(states, stats)
    # min=-2, max=2: value 1 maps to 0.5; constant dimension maps to 0
    assert norm[2, 0] == 0.5
    np.testing.assert_array_equal(norm[:, 1], 0.0)
    assert norm.min() >= -1.0 and norm.max() <= 1.0


def test_normalize_roundtrip():
    rng = np.random.default_rng(4)
    trajs = [make_traj(rng, 20, d_s=4)]
    stats = compute_stats(trajs)
    x = trajs[0].states
    back = denormalize_states(normalize_states(x, stats), stats)
    np.testing.assert_allclose(back, x, atol=1e-12)


def test_max_return_is_max_over_trajectories():
    rng = np.random.default_rng(5)
    trajs = [make_traj(rng, 5, rewards=[1, 1, 1, 1, 1]),
             make_traj(rng, 3, rewards=[4, 4, 4])]
    assert compute_stats(trajs).max_return == 12.0


# ---------------------------------------------------------------------------
# batch sampling


def test_sample_batch_padding_layout():
    rng_data = np.random.default_rng(6)
    trajs = label_dataset([make_traj(rng_data, 5)])
    batch = sample_batch(trajs, batch_size=64, k=20, conditioning="rtg",
                         rng=np.random.default_rng(0))
    assert batch.states.shape == (64, 20, 3)
    assert batch.conditioning.shape == (64, 20, 1)
    for b in range(64):
        n = int(batch.padding_mask[b].sum())
        assert 1 <= n <= 5
        # real data first, then zero padding
        assert batch.padding_mask[b, :n].all()
        assert not batch.padding_mask[b, n:].any()
        assert (batch.states[b, n:] == 0).all()
        assert (batch.target_actions[b, n:] == 0).all()
        # timesteps strictly increasing over the real region
        ts = batch.timesteps[b, :n]
        assert (np.diff(ts) == 1).all()
        # window ends at position ts[-1] of the trajectory
        np.testing.assert_array_equal(batch.states[b, :n],
                                      trajs[0].states[ts[0]:ts[-1] + 1])


def test_sample_batch_window_is_inclusive_suffix():
    # T > K: window is the K positions ending at t
    rng_data = np.random.default_rng(7)
    trajs = label_dataset([make_traj(rng_data, 30)])
    batch = sample_batch(trajs, batch_size=32, k=8, conditioning="none",
                         rng=np.random.default_rng(1))
    for b in range(32):
        n = int(batch.padding_mask[b].sum())
        t_end = batch.timesteps[b, n - 1]
        assert n == min(t_end + 1, 8)


def test_sample_batch_conditioning_variants():
    rng_data = np.random.default_rng(8)
    trajs = label_dataset([make_traj(rng_data, 10)])
    rtg_batch = sample_batch(trajs, 4, 6, "rtg", np.random.default_rng(2))
    assert rtg_batch.conditioning.shape[-1] == 1
    sg_batch = sample_batch(trajs, 4, 6, "subgoal", np.random.default_rng(2))
    assert sg_batch.conditioning.shape[-1] == 3
    none_batch = sample_batch(trajs, 4, 6, "none", np.random.default_rng(2))
    assert none_batch.conditioning is None
    # same rng seed -> same windows regardless of conditioning kind
    np.testing.assert_array_equal(rtg_batch.states, sg_batch.states)


def test_sample_batch_deterministic_given_seed():
    rng_data = np.random.default_rng(9)
    trajs = label_dataset([make_traj(rng_data, 12), make_traj(rng_data, 4)])
    b1 = sample_batch(trajs, 16, 10, "rtg", np.random.default_rng(33))
    b2 = sample_batch(trajs, 16, 10, "rtg", np.random.default_rng(33))
    np.testing.assert_array_equal(b1.states, b2.states)
    np.testing.assert_array_equal(b1.conditioning, b2.conditioning)
    np.testing.assert_array_equal(b1.timesteps, b2.timesteps)


def test_sample_batch_never_reads_out_of_bounds():
    # fuzz tiny trajectories around the context length
    for t in range(1, 26):
        rng_data = np.random.default_rng(t)
        trajs = label_dataset([make_traj(rng_data, t)])
        batch = sample_batch(trajs, 8, 20, "rtg", np.random.default_rng(t))
        n = batch.padding_mask.sum(axis=1)
        assert (n >= 1).all() and (n <= min(t, 20)).all()
        assert (batch.timesteps < t).all()


def test_sample_batch_errors():
    rng_data = np.random.default_rng(10)
    trajs = label_dataset([make_traj(rng_data, 5)])
    with pytest.raises(ValueError):
        sample_batch(trajs, 4, 0, "rtg", np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_batch(trajs, 4, 5, "banana", np.random.default_rng(0))
    raw = [make_traj(rng_data, 5)]
    with pytest.raises(DatasetError):
        sample_batch(raw, 4, 5, "rtg", np.random.default_rng(0))


# ---------------------------------------------------------------------------
# persistence


def test_dataset_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(11)
    trajs = label_dataset([make_traj(rng, 7), make_traj(rng, 3)])
    stats = compute_stats(trajs)
    path = tmp_path / "demo.jsonl"
    save_dataset(trajs, path, stats=stats)
    loaded, loaded_stats = load_dataset(path)
    assert len(loaded) == 2
    for a, b in zip(trajs, loaded):
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_array_equal(a.rewards, b.rewards)
        np.testing.assert_array_equal(a.rtg, b.rtg)
        np.testing.assert_array_equal(a.subgoals, b.subgoals)
    np.testing.assert_array_equal(loaded_stats.state_min, stats.state_min)
    assert loaded_stats.max_return == stats.max_return


def test_load_reports_line_number_on_bad_json(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = json.dumps({"states": [[0.0]], "actions": [[0.0]], "rewards": [0.0]})
    path.write_text(good + "\n{oops\n")
    with pytest.raises(DatasetError, match="line 2"):
        load_dataset(path)


def test_load_reports_stream_mismatch(tmp_path):
    path = tmp_path / "mismatch.jsonl"
    path.write_text(json.dumps(
        {"states": [[0.0], [1.0]], "actions": [[0.0]], "rewards": [0.0, 1.0]}) + "\n")
    with pytest.raises(DatasetError, match="line 1"):
        load_dataset(path)


def test_load_empty_file_is_error(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with pytest.raises(DatasetError, match="empty dataset"):
        load_dataset(path)


def test_unlabeled_roundtrip(tmp_path):
    rng = np.random.default_rng(12)
    trajs = [make_traj(rng, 4)]
    path = tmp_path / "raw.jsonl"
    save_dataset(trajs, path)
    loaded, stats = load_dataset(path)
    assert stats is None
    assert not isinstance(loaded[0], LabeledTrajectory)
    assert stats_path(path) == str(path) + ".stats.json"
