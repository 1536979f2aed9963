"""Sequence policies over interleaved token streams.

One PolicyModel covers every variant: a trunk (gated state-space blocks or
causal transformer blocks) over tokens interleaved per timestep as
(conditioning?, state, action), with per-position action prediction read at
the state tokens. Hierarchical variants pair two PolicyModels: a high level
that treats subgoals as its "actions" (2 streams) and a low level
conditioned on subgoals (3 streams).

Variant ids:
    tf_rtg      transformer trunk, return-to-go conditioning stream
    mamba_rtg   state-space trunk, return-to-go conditioning stream
    mamba_bc    state-space trunk, no conditioning (plain cloning)
    tf_hier     transformer high+low levels, subgoal conditioning
    mamba_hier  state-space high+low levels, subgoal conditioning
"""

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError
from .ssm import MambaBlock
from .attention import TransformerBlock
from .data import DatasetStats, normalize_states

__all__ = [
    "VARIANTS", "PolicySpec", "PolicyModel", "FlatPolicy", "HierarchicalPolicy",
    "build_policy", "interleave_tokens", "deinterleave_tokens", "RolloutState",
    "save_policy", "load_policy", "count_params",
]

# variant -> (trunk, conditioning kind, hierarchical)
VARIANTS = {
    "tf_rtg": ("transformer", "rtg", False),
    "mamba_rtg": ("mamba", "rtg", False),
    "mamba_bc": ("mamba", "none", False),
    "tf_hier": ("transformer", "subgoal", True),
    "mamba_hier": ("mamba", "subgoal", True),
}


@dataclass
class PolicySpec:
    variant: str
    state_dim: int
    action_dim: int
    action_range: float = 1.0
    n_layers: int = 6
    d_model: int = 128
    context: int = 20
    n_heads: int = 8
    d_state: int = 4
    expand: int = 2
    conv_width: int = 4
    max_timestep: int = 100
    normalize: bool = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; "
                             f"known: {sorted(VARIANTS)}")
        if self.n_layers < 1 or self.context < 1:
            raise ValueError("n_layers and context must be >= 1")
        if self.normalize is None:
            # hierarchical subgoal targets live in normalized state space
            self.normalize = self.hierarchical

    @property
    def trunk(self):
        return VARIANTS[self.variant][0]

    @property
    def conditioning(self):
        return VARIANTS[self.variant][1]

    @property
    def hierarchical(self):
        return VARIANTS[self.variant][2]

    @property
    def streams(self):
        return 2 if self.conditioning == "none" else 3

    def to_dict(self):
        return asdict(self)


def interleave_tokens(streams):
    """[(B,K,D)] * S -> (B, K*S, D); per position the order is the list order."""
    if not streams:
        raise ShapeError("no streams to interleave")
    shape = streams[0].shape
    for s in streams:
        if s.shape != shape:
            raise ShapeError(
                f"stream shapes differ: {[tuple(s.shape) for s in streams]}")
    b, k, d = shape
    return T.reshape(T.concat_last_dim(streams), (b, k * len(streams), d))


def deinterleave_tokens(tokens, n_streams):
    """Inverse of interleave_tokens; returns a list of (B, K, D) tensors."""
    b, total, d = tokens.shape
    if total % n_streams:
        raise ShapeError(f"{total} tokens do not split into {n_streams} streams")
    wide = T.reshape(tokens, (b, total // n_streams, n_streams * d))
    return [T.tslice(wide, (Ellipsis, slice(i * d, (i + 1) * d)))
            for i in range(n_streams)]


class PolicyModel:
    """One trunk + embeddings + action head. `cond_dim` = 0 drops the
    conditioning stream; `out_dim`/`head_range` let the same class serve as
    a subgoal predictor (high level) or an action predictor."""

    def __init__(self, rng, *, trunk, state_dim, action_dim, out_dim, cond_dim,
                 head_range, n_layers, d_model, context, n_heads=8, d_state=4,
                 expand=2, conv_width=4, max_timestep=100):
        if trunk not in ("mamba", "transformer"):
            raise ValueError(f"unknown trunk {trunk!r}")
        self.trunk = trunk
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.out_dim = out_dim
        self.cond_dim = cond_dim
        self.head_range = float(head_range)
        self.context = context
        self.max_timestep = max_timestep
        self.streams = 2 if cond_dim == 0 else 3

        def lin(d_in, d_out):
            w = Tensor(rng.standard_normal((d_in, d_out)) / np.sqrt(d_in),
                       requires_grad=True)
            b = Tensor(np.zeros(d_out), requires_grad=True)
            return w, b

        self._params = {}
        self.w_state, self.b_state = lin(state_dim, d_model)
        self._params["embed.state.w"] = self.w_state
        self._params["embed.state.b"] = self.b_state
        self.w_action, self.b_action = lin(action_dim, d_model)
        self._params["embed.action.w"] = self.w_action
        self._params["embed.action.b"] = self.b_action
        if cond_dim:
            self.w_cond, self.b_cond = lin(cond_dim, d_model)
            self._params["embed.cond.w"] = self.w_cond
            self._params["embed.cond.b"] = self.b_cond
        if trunk == "transformer":
            self.pos_table = Tensor(
                0.02 * rng.standard_normal((max_timestep + 1, d_model)),
                requires_grad=True)
            self._params["pos.timestep"] = self.pos_table

        scale = 1.0 / np.sqrt(2 * n_layers)  # keep residual stream variance flat
        self.blocks = []
        for i in range(n_layers):
            if trunk == "mamba":
                blk = MambaBlock(rng, d_model, d_state=d_state, expand=expand,
                                 conv_width=conv_width, residual_scale=scale)
            else:
                blk = TransformerBlock(rng, d_model, n_heads, residual_scale=scale)
            self.blocks.append(blk)
            self._params.update(blk.named_params(f"blocks.{i}."))

        self.final_gain = Tensor(np.ones(d_model), requires_grad=True)
        self._params["final_norm.gain"] = self.final_gain
        if trunk == "transformer":
            self.final_bias = Tensor(np.zeros(d_model), requires_grad=True)
            self._params["final_norm.bias"] = self.final_bias
        self.w_head, self.b_head = lin(d_model, out_dim)
        self._params["head.w"] = self.w_head
        self._params["head.b"] = self.b_head

    def named_params(self, prefix=""):
        if prefix:
            return {prefix + k: v for k, v in self._params.items()}
        return dict(self._params)

    def param_list(self):
        return [self._params[k] for k in sorted(self._params)]

    def _final_norm(self, x):
        if self.trunk == "transformer":
            return T.layer_norm(x, self.final_gain, self.final_bias)
        return T.rms_norm(x, self.final_gain)

    def forward(self, states, actions, cond, timesteps):
        """states (B,K,d_s), actions (B,K,d_a), cond (B,K,d_c) or None,
        timesteps (B,K) ints. Returns predictions (B,K,out_dim), one per
        state-token position, tanh-squashed and scaled to head_range."""
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        b, k = states.shape[:2]
        if k > self.context:
            raise ShapeError(f"window length {k} exceeds context {self.context}")
        if states.shape[2] != self.state_dim or actions.shape[2] != self.action_dim:
            raise ShapeError(
                f"expected state width {self.state_dim} and action width "
                f"{self.action_dim}, got {states.shape[2]} and {actions.shape[2]}")
        if self.cond_dim == 0:
            if cond is not None:
                raise ShapeError("this variant takes no conditioning stream")
        else:
            cond = None if cond is None else np.asarray(cond, dtype=np.float64)
            if cond is None or cond.ndim != 3 or cond.shape[2] != self.cond_dim:
                raise ShapeError(
                    f"this variant needs a (B,K,{self.cond_dim}) conditioning stream")

        e_state = T.affine(Tensor(states), self.w_state, self.b_state)
        e_action = T.affine(Tensor(actions), self.w_action, self.b_action)
        streams = [e_state, e_action]
        if self.cond_dim:
            e_cond = T.affine(Tensor(cond), self.w_cond, self.b_cond)
            streams = [e_cond, e_state, e_action]
        if self.trunk == "transformer":
            ts = np.asarray(timesteps, dtype=np.int64)
            pos = T.gather_rows(self.pos_table, ts)
            streams = [T.add(s, pos) for s in streams]

        x = interleave_tokens(streams)
        for blk in self.blocks:
            x = blk(x)
        x = self._final_norm(x)
        # state tokens sit at offset streams-2 within each per-step group
        at_state = T.tslice(
            x, (slice(None), slice(self.streams - 2, None, self.streams)))
        raw = T.affine(at_state, self.w_head, self.b_head)
        return T.scale(T.tanh(raw), self.head_range)


# ---------------------------------------------------------------------------
# rollout plumbing


class RolloutState:
    """Episode history as seen by the policy. For return-conditioned
    variants the conditioning value for each observed state is
    desired_return minus the rewards collected so far."""

    def __init__(self, desired_return=None):
        self.states = []
        self.actions = []
        self.rtg = []
        self.subgoals = []  # high-level predictions, appended by the policy
        self.desired_return = desired_return
        self._collected = 0.0

    def observe(self, state):
        self.states.append(np.asarray(state, dtype=np.float64))
        if self.desired_return is not None:
            self.rtg.append(self.desired_return - self._collected)

    def record(self, action, reward):
        self.actions.append(np.asarray(action, dtype=np.float64))
        self._collected += float(reward)

    def __len__(self):
        return len(self.states)


def _window(rollout_list, n, k, width):
    """Last k of the first n entries, right-padded to (1, k, width)."""
    out = np.zeros((1, k, width))
    take = min(n, k)
    if take:
        chunk = np.asarray(rollout_list[n - take:n], dtype=np.float64)
        out[0, :take] = chunk.reshape(take, width)
    return out, take


class FlatPolicy:
    def __init__(self, spec, rng):
        self.spec = spec
        cond_dim = {"rtg": 1, "subgoal": spec.state_dim, "none": 0}[spec.conditioning]
        self.model = PolicyModel(
            rng, trunk=spec.trunk, state_dim=spec.state_dim,
            action_dim=spec.action_dim, out_dim=spec.action_dim,
            cond_dim=cond_dim, head_range=spec.action_range,
            n_layers=spec.n_layers, d_model=spec.d_model, context=spec.context,
            n_heads=spec.n_heads, d_state=spec.d_state, expand=spec.expand,
            conv_width=spec.conv_width, max_timestep=spec.max_timestep)

    def named_params(self):
        return self.model.named_params()

    def param_list(self):
        return self.model.param_list()

    def forward_policy(self, batch):
        """SequenceBatch -> per-position predicted actions (B,K,d_a)."""
        return self.model.forward(batch.states, batch.actions,
                                  batch.conditioning, batch.timesteps)

    def window_arrays(self, rollout, stats=None):
        """History -> padded model inputs (states, actions, cond, timesteps)
        plus the number of real positions. The current step's action slot is
        zero-filled; it has not happened yet."""
        if len(rollout) < 1:
            raise ValueError("rollout history is empty")
        spec = self.spec
        if spec.conditioning == "rtg" and rollout.desired_return is None:
            raise ValueError("this variant needs a desired return")
        n = len(rollout.states)
        k = spec.context
        states, take = _window(rollout.states, n, k, spec.state_dim)
        if spec.normalize:
            if stats is None:
                raise ValueError("normalizing policy needs dataset stats")
            states = normalize_states(states, stats)
        acts = list(rollout.actions[:n - 1]) + [np.zeros(spec.action_dim)]
        actions, _ = _window(acts, n, k, spec.action_dim)
        cond = None
        if spec.conditioning == "rtg":
            cond, _ = _window(rollout.rtg, n, k, 1)
        timesteps = np.zeros((1, k), dtype=np.int64)
        timesteps[0, :take] = np.arange(n - take, n)
        return states, actions, cond, timesteps, take

    def act(self, rollout, stats=None):
        """Predict the action for the latest observed state."""
        states, actions, cond, timesteps, take = self.window_arrays(rollout, stats)
        pred = self.model.forward(states, actions, cond, timesteps)
        a = pred.data[0, take - 1]
        return np.clip(a, -self.spec.action_range, self.spec.action_range)


class HierarchicalPolicy:
    """High level predicts the next subgoal from (state, subgoal) history;
    low level predicts the action from (subgoal, state, action) history."""

    def __init__(self, spec, rng):
        self.spec = spec
        common = dict(trunk=spec.trunk, n_layers=spec.n_layers,
                      d_model=spec.d_model, context=spec.context,
                      n_heads=spec.n_heads, d_state=spec.d_state,
                      expand=spec.expand, conv_width=spec.conv_width,
                      max_timestep=spec.max_timestep)
        self.high = PolicyModel(
            rng, state_dim=spec.state_dim, action_dim=spec.state_dim,
            out_dim=spec.state_dim, cond_dim=0, head_range=1.0, **common)
        self.low = PolicyModel(
            rng, state_dim=spec.state_dim, action_dim=spec.action_dim,
            out_dim=spec.action_dim, cond_dim=spec.state_dim,
            head_range=spec.action_range, **common)

    def named_params(self):
        out = self.high.named_params("high.")
        out.update(self.low.named_params("low."))
        return out

    def param_list(self):
        return self.high.param_list() + self.low.param_list()

    def forward_low(self, batch):
        """(subgoal, state, action) streams -> actions; teacher-forced on
        labeled subgoals during training."""
        return self.low.forward(batch.states, batch.actions,
                                batch.conditioning, batch.timesteps)

    def forward_highlevel(self, batch):
        """(state, subgoal) streams -> next-subgoal predictions (B,K,d_s)."""
        return self.high.forward(batch.states, batch.conditioning,
                                 None, batch.timesteps)

    def _base_window(self, rollout, stats):
        if len(rollout) < 1:
            raise ValueError("rollout history is empty")
        spec = self.spec
        if spec.normalize and stats is None:
            raise ValueError("normalizing policy needs dataset stats")
        n = len(rollout.states)
        k = spec.context
        states, take = _window(rollout.states, n, k, spec.state_dim)
        if spec.normalize:
            states = normalize_states(states, stats)
        timesteps = np.zeros((1, k), dtype=np.int64)
        timesteps[0, :take] = np.arange(n - take, n)
        return states, timesteps, take, n, k

    def high_window_arrays(self, rollout, stats=None):
        """Inputs for predicting the current step's subgoal: the subgoal
        stream holds past predictions, zero-filled at the current slot."""
        states, timesteps, take, n, k = self._base_window(rollout, stats)
        past_sgs = list(rollout.subgoals[:n - 1]) + [np.zeros(self.spec.state_dim)]
        sg_in, _ = _window(past_sgs, n, k, self.spec.state_dim)
        return states, sg_in, timesteps, take

    def low_window_arrays(self, rollout, stats=None):
        """Inputs for the subgoal-conditioned action prediction; needs the
        current step's subgoal already present in the rollout."""
        spec = self.spec
        states, timesteps, take, n, k = self._base_window(rollout, stats)
        if len(rollout.subgoals) < n:
            raise ValueError("no subgoal for the current step yet")
        cond, _ = _window(rollout.subgoals, n, k, spec.state_dim)
        acts = list(rollout.actions[:n - 1]) + [np.zeros(spec.action_dim)]
        actions, _ = _window(acts, n, k, spec.action_dim)
        return states, actions, cond, timesteps, take

    def hierarchical_act(self, rollout, stats=None):
        n = len(rollout.states)
        if len(rollout.subgoals) < n:
            # a subgoal already present for this step (an external override)
            # skips the high level entirely
            states, sg_in, timesteps, take = self.high_window_arrays(rollout, stats)
            sg_pred = self.high.forward(states, sg_in, None, timesteps)
            rollout.subgoals.append(sg_pred.data[0, take - 1])
        states, actions, cond, timesteps, take = self.low_window_arrays(rollout, stats)
        pred = self.low.forward(states, actions, cond, timesteps)
        a = pred.data[0, take - 1]
        return np.clip(a, -self.spec.action_range, self.spec.action_range)


def build_policy(spec, seed=0):
    rng = np.random.default_rng(np.random.SeedSequence([spec_hash_seed(spec), seed]))
    if spec.hierarchical:
        return HierarchicalPolicy(spec, rng)
    return FlatPolicy(spec, rng)


def spec_hash_seed(spec):
    """Small deterministic int derived from the variant id, so two variants
    with the same seed do not share initial weights by accident."""
    return sum(ord(c) for c in spec.variant)


def count_params(policy):
    return sum(p.size for p in policy.named_params().values())


# ---------------------------------------------------------------------------
# checkpoints


def save_policy(policy, path, stats=None, extra=None):
    header = {"policy": policy.spec.to_dict(),
              "stats": stats.to_dict() if stats is not None else None}
    if extra:
        header.update(extra)
    T.save_params(policy.named_params(), path, header=header)


def load_policy(path):
    """Returns (policy, stats or None, header)."""
    header, params = T.load_params(path)
    if "policy" not in header:
        raise ValueError(f"{path} has no policy header")
    spec = PolicySpec(**header["policy"])
    policy = build_policy(spec)
    own = policy.named_params()
    if set(own) != set(params):
        missing = sorted(set(own) - set(params))[:3]
        extra = sorted(set(params) - set(own))[:3]
        raise ValueError(f"checkpoint params do not match policy: "
                         f"missing {missing}, unexpected {extra}")
    for name, tensor in own.items():
        if tensor.shape != params[name].shape:
            raise ValueError(f"shape mismatch for {name}: "
                             f"{tensor.shape} vs {params[name].shape}")
        tensor.data[...] = params[name].data
    stats = None
    if header.get("stats") is not None:
        stats = DatasetStats.from_dict(header["stats"])
    return policy, stats, header
