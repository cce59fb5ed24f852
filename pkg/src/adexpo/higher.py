"""Hour-level constraint choice policy.

Every simulated hour a dueling double-DQN picks which request-level
exposure target the frozen lower-level policies should satisfy for the
next hour.  The hourly revenue (normalized) is the abstract reward; at
day end the realized day-level ad fraction is compared against the
platform bound and added as a weighted terminal penalty.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .env import DayPool, DayStream, PositionModel, day_metrics
from .neural import (AdamState, Net, NetSpec, TrainingError, opt_step,
                     sync_target)
from .pscmdp import ConstraintSpec, EpisodeContext, FeatureScaler, encode_state, step
from .lower import LowerConfig, PolicySet, act

__all__ = [
    "HigherConfig",
    "PERBuffer",
    "abstract_state",
    "abstract_state_dim",
    "choose_constraint",
    "abstract_reward",
    "dqn_update",
    "make_ccp_net",
    "train_ccp",
    "rollout_two_level",
]


@dataclass(frozen=True)
class HigherConfig:
    hidden: int = 20
    lr: float = 0.0006
    buffer_capacity: int = 5000
    batch_size: int = 32
    gamma: float = 1.0
    eps_start: float = 1.0
    eps_end: float = 0.001
    eps_decay_steps: int = 1000
    per_alpha: float = 0.6
    per_beta_start: float = 0.4
    per_eps: float = 0.001
    target_sync_every: int = 50
    warmup: int = 96
    train_days: int = 1600
    # terminal day-level deviation weight and the revenue normalizer for
    # the abstract reward (per-hour revenue units)
    w2: float = 480.0
    revenue_scale: float = 100.0


def abstract_state_dim(n_targets: int) -> int:
    return 5 + n_targets


def abstract_state(hour: int, hours: int, ctx: EpisodeContext,
                   cum_revenue: float, prev_revenue: float, prev_pvr: float,
                   prev_choice: int | None, n_targets: int,
                   cfg: HigherConfig) -> np.ndarray:
    """Hour-boundary summary of the day so far."""
    s = np.zeros(abstract_state_dim(n_targets))
    s[0] = hour / hours
    s[1] = ctx.running_pvr
    s[2] = cum_revenue / (cfg.revenue_scale * hours)
    s[3] = prev_revenue / cfg.revenue_scale
    s[4] = prev_pvr
    if prev_choice is not None:
        s[5 + prev_choice] = 1.0
    return s


class PERBuffer:
    """Proportional prioritized replay with importance-sampling weights."""

    def __init__(self, capacity: int, state_dim: int):
        self.capacity = capacity
        self.size = 0
        self._ptr = 0
        self.s = np.zeros((capacity, state_dim), dtype=np.float32)
        self.a = np.zeros(capacity, dtype=np.int32)
        self.r = np.zeros(capacity, dtype=np.float32)
        self.s2 = np.zeros((capacity, state_dim), dtype=np.float32)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.priority = np.zeros(capacity, dtype=np.float64)

    def add(self, s, a, r, s2, terminal):
        i = self._ptr
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s2[i] = s2 if s2 is not None else 0.0
        self.terminal[i] = terminal
        self.priority[i] = self.priority[:self.size].max() if self.size else 1.0
        self._ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator,
               alpha: float, beta: float):
        if self.size < batch_size:
            raise ValueError("buffer smaller than batch size")
        scaled = self.priority[:self.size] ** alpha
        probs = scaled / scaled.sum()
        idx = rng.choice(self.size, size=batch_size, p=probs)
        weights = (self.size * probs[idx]) ** (-beta)
        weights /= weights.max()
        return idx, {
            "s": self.s[idx].astype(float),
            "a": self.a[idx].astype(int),
            "r": self.r[idx].astype(float),
            "s2": self.s2[idx].astype(float),
            "terminal": self.terminal[idx],
            "weights": weights,
        }

    def update_priorities(self, idx, td_errors, eps: float):
        self.priority[idx] = np.abs(td_errors) + eps


def make_ccp_net(n_targets: int, cfg: HigherConfig, seed: int) -> Net:
    spec = NetSpec((abstract_state_dim(n_targets), cfg.hidden, n_targets),
                   ("relu", "identity"), dueling=True)
    return Net(spec, seed=seed)


def choose_constraint(net: Net, s_ab: np.ndarray, epsilon: float,
                      rng: np.random.Generator | None = None) -> int:
    """Epsilon-greedy Q argmax; ties break toward the lowest id."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    n_actions = net.spec.sizes[-1]
    if epsilon > 0 and rng is not None and rng.random() < epsilon:
        return int(rng.integers(n_actions))
    q = net(s_ab)
    return int(np.argmax(q))


def abstract_reward(sub_revenue: float, day_pvr: float | None, alpha: float,
                    w2: float, revenue_scale: float = 1.0) -> float:
    """Normalized hourly revenue, plus the day-end deviation penalty."""
    if w2 < 0:
        raise ValueError("w2 must be nonnegative")
    r = sub_revenue / revenue_scale
    if day_pvr is not None:
        r += w2 * (-abs(day_pvr - alpha))
    return r


def dqn_update(net: Net, target_net: Net, buffer: PERBuffer,
               cfg: HigherConfig, rng: np.random.Generator,
               beta: float) -> dict:
    """Double-DQN step with prioritized sampling and IS correction."""
    idx, batch = buffer.sample(cfg.batch_size, rng, cfg.per_alpha, beta)
    s, a, r = batch["s"], batch["a"], batch["r"]
    s2, terminal, weights = batch["s2"], batch["terminal"], batch["weights"]
    n = len(s)

    a_star = np.argmax(net(s2), axis=1)
    q2 = target_net(s2)[np.arange(n), a_star]
    y = r + cfg.gamma * q2 * (~terminal)

    q_all, cache = net.forward(s)
    q = q_all[np.arange(n), a]
    td = q - y
    loss = float(np.mean(weights * td ** 2))
    if not np.isfinite(loss):
        raise TrainingError("non-finite DQN loss")
    grad_out = np.zeros_like(q_all)
    grad_out[np.arange(n), a] = 2.0 * weights * td / n
    grads, _ = net.backward(cache, grad_out)
    opt_step(net.params, grads, AdamStateRegistry.get(net, cfg.lr))
    buffer.update_priorities(idx, td, cfg.per_eps)
    return {"loss": loss, "mean_td": float(np.mean(np.abs(td))),
            "mean_q": float(np.mean(q))}


class AdamStateRegistry:
    """Optimizer state keyed by network identity.

    Lets dqn_update stay a plain function over (net, buffer) while the
    moment accumulators persist across calls.
    """

    _states: dict[int, AdamState] = {}

    @classmethod
    def get(cls, net: Net, lr: float) -> AdamState:
        key = id(net)
        if key not in cls._states:
            cls._states[key] = AdamState.for_params(net.params, lr)
        return cls._states[key]

    @classmethod
    def reset(cls) -> None:
        cls._states.clear()


def _hour_slices(day: DayStream) -> list[tuple[int, int, int]]:
    """(hour, start_index, end_index) for each hour present in the day."""
    slices = []
    start = 0
    for i in range(1, len(day.requests) + 1):
        if i == len(day.requests) or day.requests[i].hour != day.requests[start].hour:
            slices.append((day.requests[start].hour, start, i))
            start = i
    return slices


def _run_hour(ctx: EpisodeContext, end_index: int, handle, scaler,
              lcfg: LowerConfig, pm: PositionModel):
    """Roll the frozen lower-level policy until the hour boundary."""
    revenue = 0.0
    ads = 0
    slots = 0
    while ctx.cursor < end_index:
        state = encode_state(ctx.current_request(), ctx, scaler)
        eta = act(handle, state, lcfg, explore=False)
        _, reward, outcome = step(ctx, eta, scaler, pm,
                                  lcfg.eta_min, lcfg.eta_max)
        revenue += reward
        ads += outcome.n_ads
        slots += outcome.n_slots
    return revenue, (ads / slots if slots else 0.0)


def train_ccp(pool: DayPool, policy_set: PolicySet, spec: ConstraintSpec,
              hcfg: HigherConfig, lcfg: LowerConfig, scaler: FeatureScaler,
              seed: int, pm: PositionModel | None = None,
              verbose: bool = False):
    """Train the constraint choice policy over frozen lower policies.

    Returns (net, curves) with curves rows (episode, day_pvr, revenue).
    """
    if len(policy_set.handles) != spec.n_targets:
        raise ValueError("policy set does not cover the target set")
    pm = pm or PositionModel()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xCC]))
    net = make_ccp_net(spec.n_targets, hcfg,
                       seed=int(np.random.SeedSequence([seed, 0xCD])
                                .generate_state(1)[0]))
    target_net = net.copy()
    AdamStateRegistry.reset()
    buffer = PERBuffer(hcfg.buffer_capacity,
                       abstract_state_dim(spec.n_targets))
    curves = []
    decisions = 0
    updates = 0
    for episode in range(hcfg.train_days):
        day = pool.get(int(rng.integers(len(pool))))
        slices = _hour_slices(day)
        hours = len(slices)
        ctx = EpisodeContext(day=day)
        cum_revenue = 0.0
        prev_revenue = 0.0
        prev_pvr = 0.0
        prev_choice: int | None = None
        pending = None  # (s_ab, choice, hourly revenue)
        for k, (hour, _, end) in enumerate(slices):
            s_ab = abstract_state(hour, hours, ctx, cum_revenue,
                                  prev_revenue, prev_pvr, prev_choice,
                                  spec.n_targets, hcfg)
            if pending is not None:
                ps, pa, prev = pending
                r = abstract_reward(prev, None, spec.alpha, hcfg.w2,
                                    hcfg.revenue_scale)
                buffer.add(ps, pa, r, s_ab, terminal=False)
            frac = min(decisions / hcfg.eps_decay_steps, 1.0)
            epsilon = hcfg.eps_start + (hcfg.eps_end - hcfg.eps_start) * frac
            choice = choose_constraint(net, s_ab, epsilon, rng)
            decisions += 1
            revenue, hour_pvr = _run_hour(ctx, end, policy_set.handles[choice],
                                          scaler, lcfg, pm)
            cum_revenue += revenue
            prev_revenue, prev_pvr, prev_choice = revenue, hour_pvr, choice
            pending = (s_ab, choice, revenue)
            if decisions > hcfg.warmup and buffer.size >= hcfg.batch_size:
                beta = min(1.0, hcfg.per_beta_start
                           + (1.0 - hcfg.per_beta_start)
                           * (decisions / hcfg.eps_decay_steps))
                dqn_update(net, target_net, buffer, hcfg, rng, beta)
                updates += 1
                if updates % hcfg.target_sync_every == 0:
                    sync_target(target_net.params, net.params, 1.0)
        # day end: terminal transition with the day-level deviation
        ps, pa, prev = pending
        day_pvr = ctx.running_pvr
        r = abstract_reward(prev, day_pvr, spec.alpha, hcfg.w2,
                            hcfg.revenue_scale)
        buffer.add(ps, pa, r, None, terminal=True)
        curves.append((episode, day_pvr, cum_revenue))
        if verbose and (episode + 1) % 20 == 0:
            recent = curves[-20:]
            print(f"episode {episode+1} day_pvr "
                  f"{np.mean([c[1] for c in recent]):.4f} revenue "
                  f"{np.mean([c[2] for c in recent]):.1f}", flush=True)
    return net, curves


def rollout_two_level(day: DayStream, net: Net, policy_set: PolicySet,
                      spec: ConstraintSpec, hcfg: HigherConfig,
                      lcfg: LowerConfig, scaler: FeatureScaler,
                      pm: PositionModel | None = None,
                      force_choice: int | None = None):
    """Greedy two-level rollout of one day.

    Returns (DayMetrics, hourly rows) where each row is
    (hour, target, revenue, pvr).
    """
    pm = pm or PositionModel()
    slices = _hour_slices(day)
    hours = len(slices)
    ctx = EpisodeContext(day=day)
    cum_revenue = 0.0
    prev_revenue = 0.0
    prev_pvr = 0.0
    prev_choice: int | None = None
    rows = []
    for hour, _, end in slices:
        if force_choice is not None:
            choice = force_choice
        else:
            s_ab = abstract_state(hour, hours, ctx, cum_revenue,
                                  prev_revenue, prev_pvr, prev_choice,
                                  spec.n_targets, hcfg)
            choice = choose_constraint(net, s_ab, epsilon=0.0)
        revenue, hour_pvr = _run_hour(ctx, end, policy_set.handles[choice],
                                      scaler, lcfg, pm)
        rows.append((hour, policy_set.handles[choice].target,
                     revenue, hour_pvr))
        cum_revenue += revenue
        prev_revenue, prev_pvr, prev_choice = revenue, hour_pvr, choice
    return day_metrics(ctx.outcomes), rows
