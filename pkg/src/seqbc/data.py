"""Trajectory datasets: labeling (returns-to-go, subgoals), normalization,
JSON-lines persistence, and padded context-window batch sampling."""

from dataclasses import dataclass
import json
import os

import numpy as np

__all__ = [
    "Trajectory", "LabeledTrajectory", "SequenceBatch", "DatasetStats",
    "DatasetError", "compute_rtg", "label_subgoals", "label_dataset",
    "compute_stats", "normalize_states", "denormalize_states",
    "sample_batch", "save_dataset", "load_dataset", "stats_path",
]


class DatasetError(ValueError):
    """Malformed dataset file or inconsistent trajectory data."""


@dataclass
class Trajectory:
    states: np.ndarray   # (T, d_s)
    actions: np.ndarray  # (T, d_a)
    rewards: np.ndarray  # (T,)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        t = len(self.rewards)
        if t < 1:
            raise DatasetError("trajectory must have at least one step")
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise DatasetError("states and actions must be 2-d arrays")
        if len(self.states) != t or len(self.actions) != t:
            raise DatasetError(
                f"stream lengths disagree: states {len(self.states)}, "
                f"actions {len(self.actions)}, rewards {t}")
        for name, arr in (("states", self.states), ("actions", self.actions),
                          ("rewards", self.rewards)):
            if not np.isfinite(arr).all():
                raise DatasetError(f"non-finite values in {name}")

    def __len__(self):
        return len(self.rewards)


@dataclass
class LabeledTrajectory(Trajectory):
    rtg: np.ndarray = None       # (T,)
    subgoals: np.ndarray = None  # (T, d_s)

    def __post_init__(self):
        super().__post_init__()
        self.rtg = np.asarray(self.rtg, dtype=np.float64)
        self.subgoals = np.asarray(self.subgoals, dtype=np.float64)
        if self.rtg.shape != self.rewards.shape:
            raise DatasetError("rtg length must match rewards")
        if self.subgoals.shape != self.states.shape:
            raise DatasetError("subgoals shape must match states")


@dataclass
class DatasetStats:
    state_min: np.ndarray
    state_max: np.ndarray
    max_return: float

    def to_dict(self):
        return {"state_min": self.state_min.tolist(),
                "state_max": self.state_max.tolist(),
                "max_return": float(self.max_return)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["state_min"], dtype=np.float64),
                   np.asarray(d["state_max"], dtype=np.float64),
                   float(d["max_return"]))


@dataclass
class SequenceBatch:
    states: np.ndarray          # (B, K, d_s)
    actions: np.ndarray         # (B, K, d_a)
    conditioning: np.ndarray    # (B, K, d_c) or None
    target_actions: np.ndarray  # (B, K, d_a)
    target_subgoals: np.ndarray  # (B, K, d_s) or None
    timesteps: np.ndarray       # (B, K) int
    padding_mask: np.ndarray    # (B, K) bool


def compute_rtg(rewards):
    """Suffix sums: rtg[t] = rewards[t] + rewards[t+1] + ... + rewards[T-1]."""
    rewards = np.asarray(rewards, dtype=np.float64)
    return np.cumsum(rewards[::-1])[::-1].copy()


def label_subgoals(states, rewards):
    """For each position p, the subgoal is the state at the q >= p that
    maximizes the average reward collected through q:

        score(p, q) = mean(rewards[p .. q])

    with the earliest q winning ties. The final position's only candidate
    is the final state.
    """
    states = np.asarray(states, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    t = len(rewards)
    out = np.empty_like(states)
    for p in range(t):
        # running mean over rewards[p..q]; argmax keeps the earliest q
        csum = np.cumsum(rewards[p:])
        scores = csum / np.arange(1, t - p + 1)
        out[p] = states[p + int(np.argmax(scores))]
    return out


def label_dataset(trajectories):
    """Attach rtg and subgoals. Already-labeled trajectories are relabeled
    from their raw streams, so labeling is idempotent."""
    out = []
    for tr in trajectories:
        out.append(LabeledTrajectory(
            states=tr.states.copy(), actions=tr.actions.copy(),
            rewards=tr.rewards.copy(),
            rtg=compute_rtg(tr.rewards),
            subgoals=label_subgoals(tr.states, tr.rewards)))
    return out


def compute_stats(trajectories):
    if not trajectories:
        raise DatasetError("empty dataset")
    smin = np.min([tr.states.min(axis=0) for tr in trajectories], axis=0)
    smax = np.max([tr.states.max(axis=0) for tr in trajectories], axis=0)
    max_return = max(float(tr.rewards.sum()) for tr in trajectories)
    return DatasetStats(smin, smax, max_return)


def normalize_states(x, stats):
    """Map states into [-1, 1] per dimension; constant dimensions map to 0."""
    x = np.asarray(x, dtype=np.float64)
    span = stats.state_max - stats.state_min
    safe = np.where(span == 0.0, 1.0, span)
    y = 2.0 * (x - stats.state_min) / safe - 1.0
    return np.where(span == 0.0, 0.0, y)


def denormalize_states(y, stats):
    """Inverse of normalize_states on non-constant dimensions; constant
    dimensions recover their single observed value."""
    y = np.asarray(y, dtype=np.float64)
    span = stats.state_max - stats.state_min
    return np.where(span == 0.0, stats.state_min,
                    (y + 1.0) * span / 2.0 + stats.state_min)


CONDITIONING_KINDS = ("rtg", "subgoal", "none")


def sample_batch(trajectories, batch_size, k, conditioning, rng):
    """Sample windows ending at a random position t of a random trajectory.

    The window covers positions max(0, t-K+1) .. t inclusive, right-padded
    with zeros to length K; padding_mask marks the real positions. Targets
    are the per-position actions (and subgoals, when labeled).
    """
    if k < 1:
        raise ValueError(f"context length must be >= 1, got {k}")
    if not trajectories:
        raise DatasetError("empty dataset")
    if conditioning not in CONDITIONING_KINDS:
        raise ValueError(f"conditioning must be one of {CONDITIONING_KINDS}")
    labeled = isinstance(trajectories[0], LabeledTrajectory)
    if conditioning != "none" and not labeled:
        raise DatasetError("conditioned sampling needs a labeled dataset")

    d_s = trajectories[0].states.shape[1]
    d_a = trajectories[0].actions.shape[1]
    states = np.zeros((batch_size, k, d_s))
    actions = np.zeros((batch_size, k, d_a))
    target_actions = np.zeros((batch_size, k, d_a))
    target_subgoals = np.zeros((batch_size, k, d_s)) if labeled else None
    if conditioning == "rtg":
        cond = np.zeros((batch_size, k, 1))
    elif conditioning == "subgoal":
        cond = np.zeros((batch_size, k, d_s))
    else:
        cond = None
    timesteps = np.zeros((batch_size, k), dtype=np.int64)
    mask = np.zeros((batch_size, k), dtype=bool)

    for b in range(batch_size):
        tr = trajectories[int(rng.integers(0, len(trajectories)))]
        t = int(rng.integers(0, len(tr)))
        start = max(0, t - k + 1)
        n = t - start + 1
        window = slice(start, t + 1)
        states[b, :n] = tr.states[window]
        actions[b, :n] = tr.actions[window]
        target_actions[b, :n] = tr.actions[window]
        if labeled:
            target_subgoals[b, :n] = tr.subgoals[window]
        if conditioning == "rtg":
            cond[b, :n, 0] = tr.rtg[window]
        elif conditioning == "subgoal":
            cond[b, :n] = tr.subgoals[window]
        timesteps[b, :n] = np.arange(start, t + 1)
        mask[b, :n] = True

    return SequenceBatch(states=states, actions=actions, conditioning=cond,
                         target_actions=target_actions,
                         target_subgoals=target_subgoals,
                         timesteps=timesteps, padding_mask=mask)


# ---------------------------------------------------------------------------
# persistence: JSON-lines trajectories plus a stats sidecar


def stats_path(path):
    return str(path) + ".stats.json"


def save_dataset(trajectories, path, stats=None):
    with open(path, "w") as f:
        for tr in trajectories:
            rec = {"states": tr.states.tolist(),
                   "actions": tr.actions.tolist(),
                   "rewards": tr.rewards.tolist()}
            if isinstance(tr, LabeledTrajectory):
                rec["rtg"] = tr.rtg.tolist()
                rec["subgoals"] = tr.subgoals.tolist()
            f.write(json.dumps(rec) + "\n")
    if stats is not None:
        with open(stats_path(path), "w") as f:
            json.dump(stats.to_dict(), f, sort_keys=True)


def load_dataset(path):
    """Returns (trajectories, stats or None). Raises DatasetError with the
    offending line number on malformed input."""
    trajectories = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path} line {lineno}: invalid JSON ({e.msg} "
                                   f"at column {e.colno})") from e
            try:
                if "rtg" in rec and "subgoals" in rec:
                    tr = LabeledTrajectory(
                        states=rec["states"], actions=rec["actions"],
                        rewards=rec["rewards"], rtg=rec["rtg"],
                        subgoals=rec["subgoals"])
                else:
                    tr = Trajectory(states=rec["states"], actions=rec["actions"],
                                    rewards=rec["rewards"])
            except (KeyError, DatasetError, TypeError) as e:
                raise DatasetError(f"{path} line {lineno}: {e}") from e
            trajectories.append(tr)
    if not trajectories:
        raise DatasetError(f"{path}: empty dataset")
    stats = None
    sp = stats_path(path)
    if os.path.exists(sp):
        with open(sp) as f:
            stats = DatasetStats.from_dict(json.load(f))
    return trajectories, stats
