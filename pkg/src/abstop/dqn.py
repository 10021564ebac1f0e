"""Finite-horizon contextual deep Q-learning.

One multilayer perceptron is shared across weeks and experiments; the week
(as ``week / T``) and the experiment's context vector are part of its input.
Targets are undiscounted and bootstrapped from the current network (no
target network), and weights move by plain minibatch gradient descent so a
run is bit-reproducible from its seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from abstop.conjugate import GaussianSummary, sample_transition
from abstop.env import Action, BeliefState, ExperimentContext, initial_state, step

N_ACTIONS = 3
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    """Q-values blew past the attainable reward range during training."""


class PolicyFormatError(ValueError):
    def __init__(self, msg: str, offset: int = 0):
        super().__init__(f"{msg} (at offset {offset})")
        self.offset = offset


def input_spec_for(T: int) -> tuple[str, ...]:
    return (
        ("w_bar_tr", "w_bar_c", "week_frac", "terminated", "mu0_tr", "mu0_c", "sigma0_tr", "sigma0_c", "sigma_tr", "sigma_c")
        + tuple(f"n_tr_{t}" for t in range(1, T + 1))
        + tuple(f"n_c_{t}" for t in range(1, T + 1))
        + ("weekly_cost", "hurdle_cost", "post_horizon_h")
    )


def context_vector(ctx: ExperimentContext) -> np.ndarray:
    return np.array(
        [ctx.mu0_tr, ctx.mu0_c, ctx.sigma0_tr, ctx.sigma0_c, ctx.sigma_tr, ctx.sigma_c, *ctx.n_tr, *ctx.n_c,
         ctx.weekly_cost, ctx.hurdle_cost, ctx.post_horizon_h],
        dtype=float,
    )


@dataclass(frozen=True)
class FeatureNorm:
    shift: np.ndarray
    scale: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> FeatureNorm:
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, X: np.ndarray) -> FeatureNorm:
        X = np.asarray(X, dtype=float)
        shift = X.mean(axis=0)
        sd = X.std(axis=0)
        scale = np.where(sd > 1e-12 * np.maximum(1.0, np.abs(shift)), sd, 1.0)
        return cls(shift, scale)

    def apply(self, X):
        return (X - self.shift) / self.scale


def raw_features(state: BeliefState, ctx: ExperimentContext) -> np.ndarray:
    head = [state.w_tr, state.w_c, state.week / ctx.horizon_t, float(state.terminated)]
    return np.concatenate([head, context_vector(ctx)])


def featurize(state: BeliefState, ctx: ExperimentContext, norm: FeatureNorm | None = None) -> np.ndarray:
    x = raw_features(state, ctx)
    return x if norm is None else norm.apply(x)


@dataclass
class Policy:
    """MLP Q-network (ReLU hidden layers, linear output) plus input/output scaling.

    Weights are stored as ``(fan_in, fan_out)`` matrices.  Network outputs are
    in units of ``reward / reward_scale``.
    """

    layers: list[tuple[np.ndarray, np.ndarray]]
    feature_norm: FeatureNorm
    input_spec: tuple[str, ...]
    reward_scale: float = 1.0

    def __post_init__(self):
        if not self.layers:
            raise ValueError("policy needs at least one layer")
        width = len(self.input_spec)
        for W, b in self.layers:
            if W.shape[0] != width or b.shape != (W.shape[1],):
                raise ValueError(f"layer shapes do not chain: {W.shape} after width {width}")
            width = W.shape[1]
        if width != N_ACTIONS:
            raise ValueError(f"output width must be {N_ACTIONS}, got {width}")
        if np.any(self.feature_norm.scale <= 0):
            raise ValueError("feature scales must be positive")
        if not self.reward_scale > 0:
            raise ValueError("reward_scale must be positive")

    @property
    def horizon(self) -> int:
        return sum(1 for name in self.input_spec if name.startswith("n_tr_"))

    def copy(self) -> Policy:
        return Policy([(W.copy(), b.copy()) for W, b in self.layers], self.feature_norm, self.input_spec, self.reward_scale)


def init_policy(input_spec: Sequence[str], hidden: Sequence[int], rng: np.random.Generator,
                feature_norm: FeatureNorm | None = None, reward_scale: float = 1.0) -> Policy:
    """He-normal hidden layers; small output layer so initial Q-values are near zero."""
    sizes = [len(input_spec), *hidden, N_ACTIONS]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        std = math.sqrt(2.0 / fan_in) if i < len(sizes) - 2 else 0.1 / math.sqrt(fan_in)
        layers.append((rng.standard_normal((fan_in, fan_out)) * std, np.zeros(fan_out)))
    norm = feature_norm or FeatureNorm.identity(len(input_spec))
    return Policy(layers, norm, tuple(input_spec), reward_scale)


def net_forward(layers, X: np.ndarray, keep: bool = False):
    """Forward pass in network units.  With ``keep`` also returns the per-layer inputs."""
    h = X
    acts = [h]
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        h = np.maximum(z, 0.0) if i < last else z
        if keep and i < last:
            acts.append(h)
    return (h, acts) if keep else h


def td_loss_and_grads(layers, X: np.ndarray, actions: np.ndarray, targets: np.ndarray):
    """``0.5 * mean((Q(x_i, a_i) - y_i)^2)`` and its gradient for every weight and bias."""
    q, acts = net_forward(layers, X, keep=True)
    n = X.shape[0]
    rows = np.arange(n)
    err = q[rows, actions] - targets
    loss = 0.5 * float(np.mean(err * err))
    dz = np.zeros_like(q)
    dz[rows, actions] = err / n
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        h_in = acts[i]
        grads[i] = (h_in.T @ dz, dz.sum(axis=0))
        if i:
            dz = (dz @ W.T) * (h_in > 0)
    return loss, grads


def q_forward(policy: Policy, features) -> np.ndarray:
    """Q-values in reward units for normalized feature vector(s)."""
    X = np.asarray(features, dtype=float)
    if X.shape[-1] != len(policy.input_spec):
        raise ValueError(f"expected {len(policy.input_spec)} features, got {X.shape[-1]}")
    q = net_forward(policy.layers, np.atleast_2d(X)) * policy.reward_scale
    return q[0] if X.ndim == 1 else q


def legal_mask(week, T: int) -> np.ndarray:
    """Boolean ``(..., 3)`` mask of legal actions; Continue is illegal at the horizon."""
    week = np.asarray(week)
    mask = np.ones(week.shape + (N_ACTIONS,), dtype=bool)
    mask[..., 0] = week < T
    return mask


def masked_argmax(q: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Argmax over legal entries, ties to the lowest action code."""
    return np.argmax(np.where(mask, q, -np.inf), axis=-1)


def act(policy: Policy, state: BeliefState, ctx: ExperimentContext) -> Action:
    q = q_forward(policy, featurize(state, ctx, policy.feature_norm))
    return Action(int(masked_argmax(q, legal_mask(state.week, ctx.horizon_t))))


@dataclass(frozen=True)
class ReplayItem:
    features: np.ndarray
    action: Action
    reward: float
    next_features: np.ndarray | None
    week: int


def td_target(item: ReplayItem, policy: Policy, T: int) -> float:
    if item.next_features is None or item.week >= T:
        return float(item.reward)
    q = q_forward(policy, item.next_features)
    return float(item.reward + np.max(q[legal_mask(item.week + 1, T)]))


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions stored as flat arrays."""

    def __init__(self, capacity: int, dim: int):
        self.capacity = capacity
        self.x = np.zeros((capacity, dim))
        self.x_next = np.zeros((capacity, dim))
        self.action = np.zeros(capacity, dtype=np.int64)
        self.reward = np.zeros(capacity)
        self.has_next = np.zeros(capacity, dtype=bool)
        self.next_week = np.zeros(capacity, dtype=np.int64)
        self.size = 0
        self._pos = 0

    def add(self, item: ReplayItem) -> None:
        i = self._pos
        self.x[i] = item.features
        self.action[i] = int(item.action)
        self.reward[i] = item.reward
        self.has_next[i] = item.next_features is not None
        if item.next_features is not None:
            self.x_next[i] = item.next_features
        self.next_week[i] = item.week + 1
        self._pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, self.size, size=n)


@dataclass(frozen=True)
class TrainingConfig:
    episodes: int = 20000
    replay_capacity: int = 50000
    batch_size: int = 64
    learning_rate: float = 1e-3
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_frac: float = 0.8
    seed: int = 0
    hidden: tuple[int, ...] = (128, 128)
    norm_samples: int = 4000

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")
        for name in ("replay_capacity", "batch_size", "norm_samples"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.eps_end <= self.eps_start <= 1):
            raise ValueError("need 0 <= eps_end <= eps_start <= 1")
        if not 0 < self.eps_decay_frac <= 1:
            raise ValueError("eps_decay_frac must lie in (0, 1]")
        if not self.hidden or min(self.hidden) <= 0:
            raise ValueError("hidden widths must be positive")

    def epsilon(self, episode: int) -> float:
        """Linear decay from ``eps_start`` to ``eps_end`` over the first ``eps_decay_frac`` of episodes."""
        ramp = self.eps_decay_frac * self.episodes
        if ramp <= 0 or episode >= ramp:
            return self.eps_end
        return self.eps_start + (self.eps_end - self.eps_start) * episode / ramp

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["hidden"] = list(self.hidden)
        return d


def effect_prior(ctx: ExperimentContext) -> GaussianSummary:
    return GaussianSummary(ctx.mu0_tr - ctx.mu0_c, ctx.sigma0_tr**2 + ctx.sigma0_c**2)


def reward_scale_for(cohort: Sequence[ExperimentContext]) -> float:
    """Typical reward magnitude across the cohort: prior-spread launch value plus weekly cost."""
    vals = [
        effect_prior(c).sd * c.n_total * (c.post_horizon_h + c.horizon_t - 1) + c.weekly_cost + c.hurdle_cost
        for c in cohort
    ]
    return float(np.mean(vals)) or 1.0


def reward_bound(cohort: Sequence[ExperimentContext]) -> float:
    """Generous bound on any single-step reward magnitude in the cohort."""
    out = 0.0
    for c in cohort:
        prior = effect_prior(c)
        d = abs(prior.mean) + 10 * prior.sd
        out = max(out, d * c.n_total * (c.post_horizon_h + c.horizon_t) + c.weekly_cost + c.hurdle_cost)
    return out


def fit_feature_norm(cohort: Sequence[ExperimentContext], n_samples: int, rng: np.random.Generator) -> FeatureNorm:
    """Moments of features along run-to-horizon rollouts from the prior."""
    rows = []
    per = max(1, n_samples // cohort[0].horizon_t)
    for _ in range(per):
        ctx = cohort[int(rng.integers(len(cohort)))]
        s = initial_state(ctx, rng)
        rows.append(raw_features(s, ctx))
        while s.week < ctx.horizon_t:
            s = sample_transition(s, ctx, rng)
            rows.append(raw_features(s, ctx))
    return FeatureNorm.fit(np.array(rows))


def train(cfg: TrainingConfig, cohort: Sequence[ExperimentContext], rng: np.random.Generator | None = None,
          on_episode: Callable[[int, int, float], None] | None = None) -> Policy:
    """Q-learning with experience replay and epsilon-greedy exploration.

    Each episode draws a context uniformly from ``cohort``, simulates week 1
    from the prior and then acts until the experiment stops.  After every
    step one minibatch gradient step is taken on the squared TD error.

    Args:
        on_episode: called as ``on_episode(episode, context_index, return)``.
    """
    if not cohort:
        raise ValueError("cohort is empty")
    T = cohort[0].horizon_t
    if any(c.horizon_t != T for c in cohort):
        raise ValueError("all contexts in a cohort must share the horizon")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    norm = fit_feature_norm(cohort, cfg.norm_samples, rng)
    scale = reward_scale_for(cohort)
    spec = input_spec_for(T)
    policy = init_policy(spec, cfg.hidden, rng, norm, scale)
    if cfg.episodes == 0:
        return policy

    q_limit = 1e6 * reward_bound(cohort) * T / scale
    buf = ReplayBuffer(min(cfg.replay_capacity, cfg.episodes * T), len(spec))
    ctx_feats = [norm.apply(np.concatenate([[0.0, 0.0, 0.0, 0.0], context_vector(c)]))[4:] for c in cohort]
    head_shift, head_scale = norm.shift[:4], norm.scale[:4]
    layers = policy.layers
    lr = cfg.learning_rate

    def feats(state: BeliefState, i: int) -> np.ndarray:
        head = (np.array([state.w_tr, state.w_c, state.week / T, float(state.terminated)]) - head_shift) / head_scale
        return np.concatenate([head, ctx_feats[i]])

    for episode in range(cfg.episodes):
        eps = cfg.epsilon(episode)
        i = int(rng.integers(len(cohort)))
        ctx = cohort[i]
        state = initial_state(ctx, rng)
        x = feats(state, i)
        ret = 0.0
        while not state.terminated:
            legal = [Action.CONTINUE, Action.STOP_LAUNCH, Action.STOP_NO_LAUNCH] if state.week < T else [
                Action.STOP_LAUNCH, Action.STOP_NO_LAUNCH]
            if rng.random() < eps:
                a = legal[int(rng.integers(len(legal)))]
            else:
                q = net_forward(layers, x[None, :])[0]
                a = Action(int(masked_argmax(q, legal_mask(state.week, T))))
            out = step(state, a, ctx, rng)
            ret += out.reward
            x_next = None if out.next.terminated else feats(out.next, i)
            buf.add(ReplayItem(x, a, out.reward / scale, x_next, state.week))
            state, x = out.next, x_next

            if buf.size >= cfg.batch_size:
                idx = buf.sample(cfg.batch_size, rng)
                has_next = buf.has_next[idx]
                target = buf.reward[idx].copy()
                if has_next.any():
                    q_next = net_forward(layers, buf.x_next[idx][has_next])
                    mask = legal_mask(buf.next_week[idx][has_next], T)
                    target[has_next] += np.max(np.where(mask, q_next, -np.inf), axis=1)
                    if np.max(np.abs(q_next)) > q_limit:
                        raise DivergenceError(f"|Q| exceeded {q_limit:.3g} at episode {episode}")
                _, grads = td_loss_and_grads(layers, buf.x[idx], buf.action[idx], target)
                for (W, b), (gW, gb) in zip(layers, grads):
                    W -= lr * gW
                    b -= lr * gb
        if on_episode is not None:
            on_episode(episode, i, ret)
    return policy


def greedy_actions(policy: Policy, X_norm: np.ndarray, week, T: int) -> np.ndarray:
    q = net_forward(policy.layers, X_norm)
    return masked_argmax(q, legal_mask(np.broadcast_to(week, q.shape[:1]), T))


# checkpoints


def _num(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError("non-finite number in policy")
    return format(x, ".17g")


def _dump(obj, indent: int = 0) -> str:
    pad = "  " * (indent + 1)
    if isinstance(obj, dict):
        items = [f"{pad}{json.dumps(k)}: {_dump(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + "  " * indent + "}"
    if isinstance(obj, (list, tuple)):
        if all(isinstance(v, (float, int, np.floating, np.integer)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(_num(v) if isinstance(v, (float, np.floating)) else str(int(v)) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _dump(v, indent + 1) for v in obj) + "\n" + "  " * indent + "]"
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    return json.dumps(obj)


def policy_to_text(policy: Policy) -> str:
    doc = {
        "version": CHECKPOINT_VERSION,
        "input_spec": list(policy.input_spec),
        "feature_norm": {
            "shift": [float(v) for v in policy.feature_norm.shift],
            "scale": [float(v) for v in policy.feature_norm.scale],
        },
        "reward_scale": float(policy.reward_scale),
        "layers": [
            {"rows": int(W.shape[0]), "cols": int(W.shape[1]),
             "weights": [float(v) for v in W.ravel(order="C")], "biases": [float(v) for v in b]}
            for W, b in policy.layers
        ],
    }
    return _dump(doc) + "\n"


def save_policy(policy: Policy, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(policy_to_text(policy))


def policy_from_text(text: str) -> Policy:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PolicyFormatError(f"malformed policy JSON: {exc.msg}", exc.pos) from None
    try:
        if doc["version"] != CHECKPOINT_VERSION:
            raise PolicyFormatError(f"unsupported checkpoint version {doc['version']!r}")
        spec = tuple(doc["input_spec"])
        norm = FeatureNorm(np.array(doc["feature_norm"]["shift"], dtype=float),
                           np.array(doc["feature_norm"]["scale"], dtype=float))
        layers = []
        for layer in doc["layers"]:
            rows, cols = int(layer["rows"]), int(layer["cols"])
            W = np.array(layer["weights"], dtype=float)
            if W.size != rows * cols:
                raise PolicyFormatError(f"layer has {W.size} weights, expected {rows}x{cols}")
            layers.append((W.reshape(rows, cols), np.array(layer["biases"], dtype=float)))
        if norm.shift.shape != (len(spec),) or norm.scale.shape != (len(spec),):
            raise PolicyFormatError("feature_norm length does not match input_spec")
        return Policy(layers, norm, spec, float(doc["reward_scale"]))
    except PolicyFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise PolicyFormatError(f"invalid policy document: {exc}") from None


def load_policy(path) -> Policy:
    with open(path, encoding="utf-8") as fh:
        return policy_from_text(fh.read())
