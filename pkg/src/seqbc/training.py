"""Behavior-cloning training loop, rollout evaluation, and step timing.

Training minimizes mean squared error on per-position action predictions
(plus subgoal predictions for hierarchical variants), masked to the real
positions of each sampled window. Evaluation rolls out policies in lockstep
batches: one forward pass serves every still-running episode, which is
much faster than per-episode calls and produces the same actions.
"""

from dataclasses import dataclass, asdict, field
import csv
import ctypes
import json
import os
import time

import numpy as np

from . import tensor as T
from .tensor import Tensor, Tape, backward, FusedAdam
from .data import sample_batch, LabeledTrajectory
from .models import save_policy

__all__ = [
    "TrainConfig", "TrainResult", "EvalResult", "TimingReport",
    "masked_l2_loss", "resolve_desired_return", "train", "evaluate",
    "aggregate_seeds", "bench_train_step", "bench_inference_step",
    "tune_allocator",
]

_allocator_tuned = False


def tune_allocator():
    """Keep large numpy buffers on the heap instead of mmap.

    glibc hands every allocation above 128KB straight to mmap and returns it
    to the kernel on free, so each training step pays page faults for the
    same activation-sized buffers over and over. Raising the mmap and trim
    thresholds once per process removes that churn. No-op without glibc.
    """
    global _allocator_tuned
    if _allocator_tuned:
        return
    _allocator_tuned = True
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 256 << 20)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 256 << 20)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


def masked_l2_loss(pred, target, mask):
    """Mean squared error over the real positions of a padded batch.

    pred: (B, K, d) tensor; target: (B, K, d) array; mask: (B, K) array with
    1.0 at real positions. The mean is per scalar element, counting only
    masked-in positions.
    """
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if pred.shape != target.shape:
        raise T.ShapeError(f"pred {pred.shape} vs target {target.shape}")
    if mask.shape != pred.shape[:2]:
        raise T.ShapeError(f"mask {mask.shape} does not match batch {pred.shape[:2]}")
    count = mask.sum()
    if count == 0:
        raise ValueError("mask excludes every position")
    full = np.broadcast_to(mask[..., None], target.shape).copy()
    diff = T.sub(pred, Tensor(target))
    sq = T.mul(diff, diff)
    total = T.tsum(T.mul(sq, Tensor(full)))
    return T.scale(total, 1.0 / (count * target.shape[-1]))


def resolve_desired_return(value, stats):
    """Return-conditioning target: a number, or a dataset-relative keyword.

    "max" is the best demonstrated return, "half" is half of it, and forms
    like "10x" multiply it.
    """
    if value is None:
        return None
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        if value == "max":
            return float(stats.max_return)
        if value == "half":
            return 0.5 * float(stats.max_return)
        if value.endswith("x"):
            try:
                return float(value[:-1]) * float(stats.max_return)
            except ValueError:
                pass
        try:
            return float(value)
        except ValueError:
            pass
    raise ValueError(f"cannot interpret desired return {value!r}")


def _normalized_view(trajectories, stats):
    from .data import normalize_states
    out = []
    for tr in trajectories:
        out.append(LabeledTrajectory(
            states=normalize_states(tr.states, stats),
            actions=tr.actions, rewards=tr.rewards, rtg=tr.rtg,
            subgoals=normalize_states(tr.subgoals, stats)))
    return out


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    mean: float
    std: float
    returns: list

    def to_dict(self):
        return {"mean": self.mean, "std": self.std, "returns": self.returns}


def _stack(windows, col):
    parts = [w[col] for w in windows]
    if parts[0] is None:
        return None
    return np.concatenate(parts, axis=0)


def evaluate(policy, env_factory, episodes, seed, stats=None,
             desired_return=None):
    """Roll out `episodes` evaluation episodes in lockstep.

    Episode e uses env seed `seed + e`. All still-running episodes share one
    forward pass per timestep; each episode's window is exactly what a
    per-episode act() call would build, so the actions match.
    """
    from .models import RolloutState
    if episodes < 1:
        raise ValueError("need at least one episode")
    hier = policy.spec.hierarchical
    envs, rollouts = [], []
    returns = np.zeros(episodes)
    for e in range(episodes):
        env = env_factory()
        env.reset(seed=seed + e)
        r = RolloutState(desired_return=desired_return)
        r.observe(env.state())
        envs.append(env)
        rollouts.append(r)

    alive = list(range(episodes))
    a_max = policy.spec.action_range
    while alive:
        if hier:
            ws = [policy.high_window_arrays(rollouts[i], stats) for i in alive]
            pred = policy.high.forward(_stack(ws, 0), _stack(ws, 1), None,
                                       _stack(ws, 2))
            for row, i in enumerate(alive):
                rollouts[i].subgoals.append(pred.data[row, ws[row][3] - 1])
            ws = [policy.low_window_arrays(rollouts[i], stats) for i in alive]
            pred = policy.low.forward(_stack(ws, 0), _stack(ws, 1),
                                      _stack(ws, 2), _stack(ws, 3))
        else:
            ws = [policy.window_arrays(rollouts[i], stats) for i in alive]
            pred = policy.model.forward(_stack(ws, 0), _stack(ws, 1),
                                        _stack(ws, 2), _stack(ws, 3))
        still = []
        for row, i in enumerate(alive):
            take = ws[row][4]
            a = np.clip(pred.data[row, take - 1], -a_max, a_max)
            state, reward, done = envs[i].step(a)
            returns[i] += reward
            rollouts[i].record(a, reward)
            if not done:
                rollouts[i].observe(state)
                still.append(i)
        alive = still

    return EvalResult(mean=float(returns.mean()),
                      std=float(returns.std(ddof=0)),
                      returns=returns.tolist())


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    iterations: int = 20000
    batch_size: int = 16
    lr: float = 1e-4
    grad_clip: float = 1.0
    log_every: int = 100
    validate_every: int = 0
    val_episodes: int = 50
    eval_seed: int = 10000
    seed: int = 0
    desired_return: object = "max"

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    history: list
    val_history: list
    best_val: float
    best_iteration: int
    final_train_loss: float
    wall_seconds: float
    desired_return: float


def _loss_for(policy, batch):
    """Returns (loss tensor, low value, high value or None)."""
    if policy.spec.hierarchical:
        lo = masked_l2_loss(policy.forward_low(batch),
                            batch.target_actions, batch.padding_mask)
        hi = masked_l2_loss(policy.forward_highlevel(batch),
                            batch.target_subgoals, batch.padding_mask)
        return T.add(lo, hi), lo.item(), hi.item()
    lo = masked_l2_loss(policy.forward_policy(batch),
                        batch.target_actions, batch.padding_mask)
    return lo, lo.item(), None


def train(policy, trajectories, stats, cfg, env_factory=None, out_dir=None):
    """Optimize the policy on demonstration windows.

    Writes curve.csv, ckpt_best.json, ckpt_last.json and summary.json under
    out_dir when given. Validation (rollout evaluation every validate_every
    iterations, plus once at the end) needs env_factory.
    """
    tune_allocator()
    spec = policy.spec
    if cfg.validate_every and env_factory is None:
        raise ValueError("validation needs an env_factory")
    trajs = _normalized_view(trajectories, stats) if spec.normalize else trajectories
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    params = policy.param_list()
    adam = FusedAdam(params)
    desired = None
    if spec.conditioning == "rtg":
        desired = resolve_desired_return(cfg.desired_return, stats)

    hier = spec.hierarchical
    columns = ["iteration", "train_loss"]
    if hier:
        columns.append("highlevel_loss")
    columns += ["val_mean", "val_std", "best"]

    writer = None
    csv_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_file = open(os.path.join(out_dir, "curve.csv"), "w", newline="")
        writer = csv.writer(csv_file)
        writer.writerow(columns)

    history, val_history = [], []
    best = -np.inf
    best_iter = 0
    window_lo, window_hi = [], []
    t0 = time.perf_counter()

    def run_validation(it):
        nonlocal best, best_iter
        res = evaluate(policy, env_factory, cfg.val_episodes, cfg.eval_seed,
                       stats=stats, desired_return=desired)
        val_history.append({"iteration": it, "mean": res.mean, "std": res.std})
        if res.mean > best:
            best = res.mean
            best_iter = it
            if out_dir is not None:
                save_policy(policy, os.path.join(out_dir, "ckpt_best.json"),
                            stats=stats, extra={"iteration": it,
                                                "val_mean": res.mean})
        return res

    def emit(it, res=None):
        row = {"iteration": it,
               "train_loss": float(np.mean(window_lo)) if window_lo else ""}
        if hier:
            row["highlevel_loss"] = float(np.mean(window_hi)) if window_hi else ""
        row["val_mean"] = res.mean if res else ""
        row["val_std"] = res.std if res else ""
        row["best"] = best if np.isfinite(best) else ""
        history.append(row)
        if writer is not None:
            writer.writerow([row[c] for c in columns])
            csv_file.flush()
        window_lo.clear()
        window_hi.clear()

    try:
        for it in range(1, cfg.iterations + 1):
            batch = sample_batch(trajs, cfg.batch_size, spec.context,
                                 spec.conditioning, rng)
            with Tape():
                loss, lo_val, hi_val = _loss_for(policy, batch)
            grads = backward(loss)
            adam.apply(grads, cfg.lr, max_norm=cfg.grad_clip)
            window_lo.append(lo_val)
            if hi_val is not None:
                window_hi.append(hi_val)

            validate = cfg.validate_every and (
                it % cfg.validate_every == 0 or it == cfg.iterations)
            if validate:
                emit(it, run_validation(it))
            elif it % cfg.log_every == 0:
                emit(it)
    finally:
        if csv_file is not None:
            csv_file.close()

    wall = time.perf_counter() - t0
    final_loss = history[-1]["train_loss"] if history else float("nan")
    result = TrainResult(history=history, val_history=val_history,
                         best_val=float(best), best_iteration=best_iter,
                         final_train_loss=final_loss, wall_seconds=wall,
                         desired_return=desired)
    if out_dir is not None:
        save_policy(policy, os.path.join(out_dir, "ckpt_last.json"),
                    stats=stats, extra={"iteration": cfg.iterations})
        summary = {
            "variant": spec.variant,
            "spec": spec.to_dict(),
            "config": cfg.to_dict(),
            "desired_return": desired,
            "best_val": result.best_val,
            "best_iteration": result.best_iteration,
            "final_train_loss": result.final_train_loss,
            "wall_seconds": result.wall_seconds,
            "val_history": val_history,
        }
        with open(os.path.join(out_dir, "summary.json"), "w") as f:
            json.dump(summary, f, indent=1)
    return result


def aggregate_seeds(summaries):
    """Mean and population std of best validation return across seed runs."""
    vals = [s["best_val"] for s in summaries]
    return {"n_seeds": len(vals),
            "mean": float(np.mean(vals)),
            "std": float(np.std(vals, ddof=0)),
            "per_seed": [float(v) for v in vals]}


# ---------------------------------------------------------------------------
# step timing


@dataclass
class TimingReport:
    label: str
    reps: int
    mean_ms: float
    std_ms: float
    p50_ms: float
    min_ms: float
    max_ms: float
    times_ms: list = field(repr=False, default_factory=list)

    @classmethod
    def from_times(cls, label, times_s):
        ms = np.asarray(times_s) * 1e3
        return cls(label=label, reps=len(ms), mean_ms=float(ms.mean()),
                   std_ms=float(ms.std(ddof=0)), p50_ms=float(np.median(ms)),
                   min_ms=float(ms.min()), max_ms=float(ms.max()),
                   times_ms=ms.tolist())

    def to_dict(self, with_times=False):
        d = {"label": self.label, "reps": self.reps, "mean_ms": self.mean_ms,
             "std_ms": self.std_ms, "p50_ms": self.p50_ms,
             "min_ms": self.min_ms, "max_ms": self.max_ms}
        if with_times:
            d["times_ms"] = self.times_ms
        return d


def bench_train_step(policy, trajectories, stats, cfg, reps=100, warmup=10,
                     label=None):
    """Time full optimization steps: batch sampling, forward, backward,
    gradient clip and optimizer update."""
    tune_allocator()
    spec = policy.spec
    trajs = _normalized_view(trajectories, stats) if spec.normalize else trajectories
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 99]))
    params = policy.param_list()
    adam = FusedAdam(params)

    def one_step():
        batch = sample_batch(trajs, cfg.batch_size, spec.context,
                             spec.conditioning, rng)
        with Tape():
            loss, _, _ = _loss_for(policy, batch)
        grads = backward(loss)
        adam.apply(grads, cfg.lr, max_norm=cfg.grad_clip)

    for _ in range(warmup):
        one_step()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        one_step()
        times.append(time.perf_counter() - t0)
    return TimingReport.from_times(label or f"train/{spec.variant}", times)


def bench_inference_step(policy, env_factory, reps=100, warmup=10, stats=None,
                         desired_return=None, label=None):
    """Time single-step action selection on a full context window.

    The history is a fixed K-step prefix collected with random actions, so
    every timed call does identical work: window assembly plus one forward
    pass (two for hierarchical variants).
    """
    from .models import RolloutState
    tune_allocator()
    spec = policy.spec
    rng = np.random.default_rng(1234)
    env = env_factory()
    rollout = RolloutState(desired_return=desired_return)
    attempt = 0
    while True:
        env.reset(seed=5000 + attempt)
        rollout = RolloutState(desired_return=desired_return)
        rollout.observe(env.state())
        for _ in range(spec.context - 1):
            a = rng.uniform(-spec.action_range, spec.action_range,
                            env.spec.action_dim)
            state, reward, done = env.step(a)
            rollout.record(a, reward)
            if done:
                break
            rollout.observe(state)
        if len(rollout) >= spec.context:
            break
        attempt += 1  # random walk hit the goal early; try another seed

    if spec.hierarchical:
        # past subgoal slots content does not affect timing
        rollout.subgoals = [rng.uniform(-1, 1, spec.state_dim)
                            for _ in range(len(rollout) - 1)]

    def one_call():
        if spec.hierarchical:
            policy.hierarchical_act(rollout, stats)
            rollout.subgoals.pop()  # keep the history identical per call
        else:
            policy.act(rollout, stats)

    for _ in range(warmup):
        one_call()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        one_call()
        times.append(time.perf_counter() - t0)
    return TimingReport.from_times(label or f"infer/{spec.variant}", times)
