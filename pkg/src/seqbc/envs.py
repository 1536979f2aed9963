"""Toy continuous-control environments and scripted demonstrators.

PointReach: a point agent in the [-1, 1]^2 arena moves toward a goal;
state is [px, py, gx, gy], actions are per-dimension velocities in
[-1, 1], position advances by dt * action, reward is the negative
distance to the goal after the move. WindyPointReach adds gaussian
transition noise, making the dynamics stochastic.
"""

from dataclasses import dataclass

import numpy as np

from .data import Trajectory, label_dataset

__all__ = [
    "EnvSpec", "PointReach", "WindyPointReach", "make_env", "ENV_IDS",
    "straight_line_action", "best_return_bound", "generate_demonstrations",
    "replay_rewards", "DEMO_TIERS",
]

DT = 0.1
GOAL_RADIUS = 0.1
ARENA = 1.0
_MIN_START_DIST = 0.3  # goals are resampled until this far from the start


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    action_range: float
    horizon: int
    stochastic: bool

    def __post_init__(self):
        if self.horizon < 1 or self.action_range <= 0:
            raise ValueError("horizon must be >= 1 and action_range > 0")


class PointReach:
    """Deterministic goal-reaching point mass."""

    def __init__(self, horizon=50):
        self.spec = EnvSpec(state_dim=4, action_dim=2, action_range=1.0,
                            horizon=horizon, stochastic=False)
        self._pos = None
        self._goal = None
        self._steps = 0
        self._done = True
        self._rng = None

    def reset(self, seed):
        self._rng = np.random.default_rng(seed)
        self._pos = self._rng.uniform(-ARENA, ARENA, 2)
        self._goal = self._rng.uniform(-ARENA, ARENA, 2)
        while np.linalg.norm(self._goal - self._pos) < _MIN_START_DIST:
            self._goal = self._rng.uniform(-ARENA, ARENA, 2)
        self._steps = 0
        self._done = False
        return self.state()

    def state(self):
        return np.concatenate([self._pos, self._goal])

    def _transition_noise(self):
        return 0.0

    def step(self, action):
        if self._done:
            raise RuntimeError("episode is done; call reset before stepping")
        a = np.clip(np.asarray(action, dtype=np.float64),
                    -self.spec.action_range, self.spec.action_range)
        self._pos = self._pos + DT * a + self._transition_noise()
        self._pos = np.clip(self._pos, -ARENA, ARENA)
        self._steps += 1
        dist = float(np.linalg.norm(self._pos - self._goal))
        reward = -dist
        self._done = dist <= GOAL_RADIUS or self._steps >= self.spec.horizon
        return self.state(), reward, self._done

    @property
    def done(self):
        return self._done


class WindyPointReach(PointReach):
    """PointReach with gaussian position noise each step. At sigma=0 the
    trace is identical to PointReach under the same seed and actions."""

    def __init__(self, sigma=0.05, horizon=50):
        super().__init__(horizon=horizon)
        self.sigma = float(sigma)
        self.spec = EnvSpec(state_dim=4, action_dim=2, action_range=1.0,
                            horizon=horizon, stochastic=True)

    def _transition_noise(self):
        noise = self._rng.normal(0.0, 1.0, 2) * self.sigma
        return noise


ENV_IDS = ("pointreach", "windy")


def make_env(env_id, sigma=0.05, horizon=50):
    if env_id == "pointreach":
        return PointReach(horizon=horizon)
    if env_id == "windy":
        return WindyPointReach(sigma=sigma, horizon=horizon)
    raise ValueError(f"unknown env {env_id!r}; known: {ENV_IDS}")


# ---------------------------------------------------------------------------
# reference controller and per-episode return bound


def straight_line_action(state, action_range=1.0):
    """Max-speed move along the straight line to the goal, scaled so no
    per-dimension clipping bends the direction, stopping exactly on the
    goal when it is within one step's reach."""
    pos, goal = state[:2], state[2:]
    d = goal - pos
    dist = float(np.linalg.norm(d))
    if dist == 0.0:
        return np.zeros(2)
    u = d / dist
    speed_cap = action_range / np.abs(u).max()
    return u * min(speed_cap, dist / DT)


def best_return_bound(env, seed):
    """Return of the straight-line controller for the episode `seed` starts.
    Used as the per-episode reference for demonstrator quality."""
    state = env.reset(seed)
    total = 0.0
    done = False
    while not done:
        state, reward, done = env.step(straight_line_action(state, env.spec.action_range))
        total += reward
    return total


# ---------------------------------------------------------------------------
# scripted demonstrators

# tier -> (proportional gain, action noise sigma)
DEMO_TIERS = {
    "expert": (10.0, 0.05),
    "medium": (1.2, 0.5),
    "medium-replay": None,  # mixture, see below
}


def _controller_action(state, gain, noise_sigma, rng, action_range):
    pos, goal = state[:2], state[2:]
    a = gain * (goal - pos) + noise_sigma * rng.normal(0.0, 1.0, 2)
    return np.clip(a, -action_range, action_range)


def _run_episode(env, env_seed, ctrl_rng, gain, noise_sigma, random_policy=False):
    state = env.reset(env_seed)
    states, actions, rewards = [], [], []
    done = False
    while not done:
        if random_policy:
            a = ctrl_rng.uniform(-env.spec.action_range, env.spec.action_range, 2)
        else:
            a = _controller_action(state, gain, noise_sigma, ctrl_rng,
                                   env.spec.action_range)
        states.append(state)
        actions.append(a)
        state, reward, done = env.step(a)
        rewards.append(reward)
    return Trajectory(states=np.array(states), actions=np.array(actions),
                      rewards=np.array(rewards))


def generate_demonstrations(env, tier, n, seed):
    """n scripted episodes at the given quality tier, labeled with rtg and
    subgoals. Episode e resets the env with seed + e; controller noise uses
    an rng derived from (seed, e), so the dataset is a pure function of
    (env, tier, n, seed)."""
    if n < 1:
        raise ValueError("need at least one episode")
    if tier not in DEMO_TIERS:
        raise ValueError(f"unknown tier {tier!r}; known: {sorted(DEMO_TIERS)}")
    trajectories = []
    for e in range(n):
        ctrl_rng = np.random.default_rng(np.random.SeedSequence([seed, e]))
        if tier == "medium-replay":
            # rotating mix: expert-like, medium-like, uniform-random
            kind = e % 3
            if kind == 2:
                trajectories.append(_run_episode(env, seed + e, ctrl_rng,
                                                 0.0, 0.0, random_policy=True))
                continue
            gain, sigma = DEMO_TIERS["expert" if kind == 0 else "medium"]
        else:
            gain, sigma = DEMO_TIERS[tier]
        trajectories.append(_run_episode(env, seed + e, ctrl_rng, gain, sigma))
    return label_dataset(trajectories)


def replay_rewards(traj):
    """Recompute PointReach rewards from stored states/actions via the
    deterministic transition. Checks reward/transition consistency."""
    out = np.empty(len(traj))
    for t in range(len(traj)):
        pos, goal = traj.states[t, :2], traj.states[t, 2:]
        a = np.clip(traj.actions[t], -1.0, 1.0)
        nxt = np.clip(pos + DT * a, -ARENA, ARENA)
        out[t] = -float(np.linalg.norm(nxt - goal))
    return out
