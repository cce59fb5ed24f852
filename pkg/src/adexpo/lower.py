"""Per-target deterministic actor-critic with constrained replay.

One actor-critic pair is trained per request-level exposure target.
The critic minimizes the usual TD loss plus a weighted auxiliary term
that regresses the online Q toward the target-network Q shifted by the
per-request constraint deviation.  Experience collected under any
target is relabeled and shared with every other target's training
stream ("constrained" hindsight relabeling); the reward is never
rewritten, only the deviation term is recomputed.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .env import ETA_MAX, ETA_MIN, DayPool, PositionModel, day_metrics
from .neural import (AdamState, Net, NetSpec, TrainingError, load_net,
                     opt_step, save_net, sync_target)
from .pscmdp import (ACTION_DIM, STATE_DIM, ConstraintSpec, EpisodeContext,
                     FeatureScaler, delta_cs, encode_state, step)

__all__ = [
    "LowerConfig",
    "PolicyHandle",
    "CherBuffer",
    "NoiseSchedule",
    "PolicySet",
    "act",
    "critic_loss",
    "update_step",
    "cher_relabel",
    "make_policy_set",
    "train_lower",
    "eval_lower",
    "greedy_policy",
]


@dataclass(frozen=True)
class LowerConfig:
    hidden: tuple[int, int] = (20, 20)
    actor_lr: float = 0.001
    critic_lr: float = 0.0001
    buffer_capacity: int = 50000
    batch_size: int = 64
    warmup: int = 5000
    w_constraint: float = 10.0
    gamma: float = 1.0
    target_mix: float = 0.005
    noise_start: float = 1.0
    noise_end: float = 0.001
    noise_decay_steps: int = 50000
    dense_update_steps: int = 20000
    select_interval: int = 2500
    select_days: int = 5
    select_stage2_days: int = 20
    select_finalists: int = 16
    restarts: int = 4
    delta_form: str = "abs"
    train_steps: int = 100000
    eval_interval: int = 2500
    eval_requests: int = 400
    eta_min: float = ETA_MIN
    eta_max: float = ETA_MAX

    @property
    def eta_mid(self) -> float:
        return 0.5 * (self.eta_min + self.eta_max)

    @property
    def eta_half(self) -> float:
        return 0.5 * (self.eta_max - self.eta_min)


class NoiseSchedule:
    """Linear exploration-scale decay, bounded below."""

    def __init__(self, start: float = 1.0, end: float = 0.001,
                 decay_steps: int = 50000):
        if end > start:
            raise ValueError("schedule must be nonincreasing")
        self.start, self.end, self.decay_steps = start, end, decay_steps

    def scale(self, step_count: int) -> float:
        frac = min(step_count / self.decay_steps, 1.0)
        return self.start + (self.end - self.start) * frac


class CherBuffer:
    """FIFO ring buffer of constraint-tagged transitions.

    Actions are stored in normalized form (the pre-affine [-1, 1]
    coordinates the critic consumes); the per-request exposure fraction
    and the recomputed deviation term ride along with each row.
    """

    def __init__(self, capacity: int = 50000,
                 state_dim: int = STATE_DIM, action_dim: int = ACTION_DIM):
        self.capacity = capacity
        self.size = 0
        self._ptr = 0
        self.s = np.zeros((capacity, state_dim), dtype=np.float32)
        self.a = np.zeros((capacity, action_dim), dtype=np.float32)
        self.r = np.zeros(capacity, dtype=np.float32)
        self.s2 = np.zeros((capacity, state_dim), dtype=np.float32)
        self.pvr = np.zeros(capacity, dtype=np.float32)
        self.delta = np.zeros(capacity, dtype=np.float32)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.constraint_id = np.zeros(capacity, dtype=np.int32)

    def add(self, s, a, r, s2, pvr, delta, terminal, constraint_id):
        i = self._ptr
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s2[i] = s2 if s2 is not None else 0.0
        self.pvr[i] = pvr
        self.delta[i] = delta
        self.terminal[i] = terminal
        self.constraint_id[i] = constraint_id
        self._ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        if self.size < batch_size:
            raise ValueError("buffer smaller than batch size")
        idx = rng.integers(self.size, size=batch_size)
        return {
            "s": self.s[idx].astype(float),
            "a": self.a[idx].astype(float),
            "r": self.r[idx].astype(float),
            "s2": self.s2[idx].astype(float),
            "delta": self.delta[idx].astype(float),
            "terminal": self.terminal[idx],
        }


@dataclass
class PolicyHandle:
    constraint_id: int
    target: float
    actor: Net
    actor_target: Net
    critic: Net
    critic_target: Net
    actor_opt: AdamState
    critic_opt: AdamState
    buffer: CherBuffer


@dataclass
class PolicySet:
    spec: ConstraintSpec
    handles: list[PolicyHandle]

    def handle_for(self, target: float) -> PolicyHandle:
        for h in self.handles:
            if abs(h.target - target) < 1e-9:
                return h
        raise KeyError(f"no policy for target {target}")

    def save(self, directory, config: "LowerConfig") -> None:
        os.makedirs(directory, exist_ok=True)
        cfg_doc = json.dumps(asdict(config), sort_keys=True)
        manifest = {
            "targets": list(self.spec.targets),
            "alpha": self.spec.alpha,
            "beta": self.spec.beta,
            "config_hash": hashlib.sha256(cfg_doc.encode()).hexdigest(),
            "config": json.loads(cfg_doc),
        }
        with open(os.path.join(directory, "manifest.json"), "w") as f:
            json.dump(manifest, f, sort_keys=True, indent=1)
        for h in self.handles:
            tag = f"{h.target:.2f}".replace(".", "_")
            save_net(h.actor, os.path.join(directory, f"actor_{tag}.json"))
            save_net(h.critic, os.path.join(directory, f"critic_{tag}.json"))

    @classmethod
    def load(cls, directory) -> "PolicySet":
        with open(os.path.join(directory, "manifest.json")) as f:
            manifest = json.load(f)
        spec = ConstraintSpec(alpha=manifest["alpha"], beta=manifest["beta"],
                              targets=tuple(manifest["targets"]))
        cfg = LowerConfig(**{k: tuple(v) if isinstance(v, list) else v
                             for k, v in manifest["config"].items()})
        handles = []
        for cid, target in enumerate(spec.targets):
            tag = f"{target:.2f}".replace(".", "_")
            actor = load_net(os.path.join(directory, f"actor_{tag}.json"))
            critic = load_net(os.path.join(directory, f"critic_{tag}.json"))
            handles.append(PolicyHandle(
                constraint_id=cid, target=target,
                actor=actor, actor_target=actor.copy(),
                critic=critic, critic_target=critic.copy(),
                actor_opt=AdamState.for_params(actor.params, cfg.actor_lr),
                critic_opt=AdamState.for_params(critic.params, cfg.critic_lr),
                buffer=CherBuffer(cfg.buffer_capacity)))
        return cls(spec=spec, handles=handles)


def make_policy_set(spec: ConstraintSpec, cfg: LowerConfig,
                    seed: int) -> PolicySet:
    ss = np.random.SeedSequence(seed)
    handles = []
    for cid, target in enumerate(spec.targets):
        a_seed, c_seed = ss.spawn(1)[0].generate_state(2)
        actor_spec = NetSpec((STATE_DIM, *cfg.hidden, ACTION_DIM),
                             ("relu", "relu", "tanh"))
        critic_spec = NetSpec((STATE_DIM + ACTION_DIM, *cfg.hidden, 1),
                              ("relu", "relu", "identity"))
        actor = Net(actor_spec, seed=int(a_seed))
        critic = Net(critic_spec, seed=int(c_seed))
        handles.append(PolicyHandle(
            constraint_id=cid, target=target,
            actor=actor, actor_target=actor.copy(),
            critic=critic, critic_target=critic.copy(),
            actor_opt=AdamState.for_params(actor.params, cfg.actor_lr),
            critic_opt=AdamState.for_params(critic.params, cfg.critic_lr),
            buffer=CherBuffer(cfg.buffer_capacity)))
    return PolicySet(spec=spec, handles=handles)


def act(handle: PolicyHandle, state: np.ndarray, cfg: LowerConfig,
        explore: bool = False, noise_scale: float = 0.0,
        rng: np.random.Generator | None = None) -> np.ndarray:
    """Actor output mapped onto the coefficient interval; optional noise.

    Gaussian noise is added in coefficient units before clipping.
    """
    u = handle.actor(state)
    eta = cfg.eta_mid + cfg.eta_half * u
    if explore:
        eta = eta + rng.normal(0.0, noise_scale, size=eta.shape)
    return np.clip(eta, cfg.eta_min, cfg.eta_max)


def _to_normalized(eta: np.ndarray, cfg: LowerConfig) -> np.ndarray:
    return (eta - cfg.eta_mid) / cfg.eta_half


def critic_loss(batch: dict, handle: PolicyHandle, w: float,
                gamma: float = 1.0):
    """Weighted critic loss and its gradients on one batch.

    L = mean((Q - y)^2) + w * mean((Q - (Q_target(s,a) + delta))^2)
    with y = r + gamma * Q_target(s', actor_target(s')) and terminal
    bootstrap 0.
    """
    s, a, r = batch["s"], batch["a"], batch["r"]
    if len(s) == 0:
        raise ValueError("empty batch")
    s2, delta, terminal = batch["s2"], batch["delta"], batch["terminal"]
    n = len(s)

    a2 = handle.actor_target(s2)
    q2 = handle.critic_target(np.hstack([s2, a2]))[:, 0]
    y = r + gamma * q2 * (~terminal)
    q_frozen = handle.critic_target(np.hstack([s, a]))[:, 0]
    y_c = q_frozen + delta

    q, cache = handle.critic.forward(np.hstack([s, a]))
    q = q[:, 0]
    l_rl = float(np.mean((q - y) ** 2))
    l_c = float(np.mean((q - y_c) ** 2))
    grad_out = (2.0 * (q - y) + 2.0 * w * (q - y_c))[:, None] / n
    grads, _ = handle.critic.backward(cache, grad_out)
    return {"l_rl": l_rl, "l_c": l_c, "loss": l_rl + w * l_c,
            "mean_q": float(np.mean(q))}, grads


def update_step(handle: PolicyHandle, cfg: LowerConfig,
                rng: np.random.Generator) -> dict:
    """One critic step on the weighted loss, one deterministic policy
    gradient step on the actor, then soft target syncs."""
    if handle.buffer.size < cfg.batch_size:
        raise ValueError("buffer smaller than batch size")
    batch = handle.buffer.sample(cfg.batch_size, rng)
    stats, grads = critic_loss(batch, handle, cfg.w_constraint, cfg.gamma)
    if not np.isfinite(stats["loss"]):
        raise TrainingError("non-finite critic loss")
    opt_step(handle.critic.params, grads, handle.critic_opt)

    s = batch["s"]
    n = len(s)
    u, a_cache = handle.actor.forward(s)
    q, c_cache = handle.critic.forward(np.hstack([s, u]))
    # maximize Q: propagate -dQ/du through the actor
    _, grad_in = handle.critic.backward(c_cache, -np.ones((n, 1)) / n)
    a_grads, _ = handle.actor.backward(a_cache, grad_in[:, STATE_DIM:])
    opt_step(handle.actor.params, a_grads, handle.actor_opt)

    sync_target(handle.critic_target.params, handle.critic.params,
                cfg.target_mix)
    sync_target(handle.actor_target.params, handle.actor.params,
                cfg.target_mix)
    stats["actor_mean_q"] = float(np.mean(q))
    return stats


def cher_relabel(handles: list[PolicyHandle], state, action_norm, reward,
                 next_state, outcome, source_id: int, terminal: bool,
                 cfg: LowerConfig) -> None:
    """Insert a collected transition into every policy's stream.

    The reward is kept as collected; only the constraint tag and its
    deviation term change per copy.
    """
    if not 0 <= source_id < len(handles):
        raise ValueError(f"unknown source constraint id {source_id}")
    for h in handles:
        d = delta_cs(outcome, h.target, cfg.delta_form)
        h.buffer.add(state, action_norm, reward, next_state,
                     outcome.pvr_i, d, terminal, h.constraint_id)


@dataclass
class LowerEvalStats:
    mean_pvr: float
    mean_abs_deviation: float
    revenue: float
    cap_violations: int
    day_pvrs: list[float] = field(default_factory=list)


def greedy_policy(handle: PolicyHandle, cfg: LowerConfig):
    """Deterministic state->coefficient policy for a trained handle."""
    def policy(state: np.ndarray) -> np.ndarray:
        return act(handle, state, cfg, explore=False)
    return policy


def eval_lower(handle: PolicyHandle, days, scaler: FeatureScaler,
               cfg: LowerConfig, beta: float = 1.0,
               pm: PositionModel | None = None,
               max_requests: int | None = None) -> LowerEvalStats:
    """Noise-free rollout of one policy over full days."""
    pm = pm or PositionModel()
    pvrs: list[float] = []
    revenue = 0.0
    violations = 0
    day_pvrs = []
    for day in days:
        ctx = EpisodeContext(day=day)
        state = encode_state(ctx.current_request(), ctx, scaler)
        seen = 0
        while not ctx.done:
            eta = act(handle, state, cfg, explore=False)
            state, reward, outcome = step(ctx, eta, scaler, pm,
                                          cfg.eta_min, cfg.eta_max)
            pvrs.append(outcome.pvr_i)
            revenue += reward
            if outcome.pvr_i > beta + 1e-12:
                violations += 1
            seen += 1
            if max_requests is not None and seen >= max_requests:
                break
        day_pvrs.append(ctx.running_pvr)
    arr = np.array(pvrs)
    return LowerEvalStats(
        mean_pvr=float(arr.mean()),
        mean_abs_deviation=float(np.abs(arr - handle.target).mean()),
        revenue=float(revenue),
        cap_violations=violations,
        day_pvrs=day_pvrs)


def train_lower(pool: DayPool, spec: ConstraintSpec, cfg: LowerConfig,
                seed: int, scaler: FeatureScaler,
                cher: bool = True, pm: PositionModel | None = None,
                eval_day=None, verbose: bool = False):
    """Train one policy per target over the day pool.

    Returns (PolicySet, curves) where curves is a list of
    (step, target, mean_abs_deviation, revenue) rows sampled every
    cfg.eval_interval environment steps on a fixed probe day during
    the first training run.

    The recipe runs cfg.restarts independent training runs (fresh
    network init and exploration stream per run) and checkpoint-selects
    the final parameters across all of them: every cfg.select_interval
    steps (once the dense update window has passed) each policy is
    scored greedily on cfg.select_days fixed validation days from the
    pool; snapshots tied at the lowest mean deviation become finalists
    and are re-screened on cfg.select_stage2_days further validation
    days (lowest deviation wins, revenue as tiebreak). Selection never
    touches live training state, so the learning curves are exactly
    those of a single run.
    """
    pm = pm or PositionModel()
    noise = NoiseSchedule(cfg.noise_start, cfg.noise_end,
                          cfg.noise_decay_steps)
    if eval_day is None:
        eval_day = pool.get(0)
    curves: list[tuple[int, float, float, float]] = []
    val_days = ([pool.get((1 + i) % len(pool))
                 for i in range(min(cfg.select_days, len(pool)))]
                if cfg.select_interval > 0 else [])
    # per constraint id: lowest validation deviation seen, and the
    # snapshots tied with it (deviation, revenue, actor, critic)
    best_dev: dict[int, float] = {}
    finalists: dict[int, list[tuple[float, float, Net, Net]]] = {}

    def consider(handles: list[PolicyHandle], step_count: int) -> None:
        if not val_days or step_count < cfg.dense_update_steps:
            return
        for h in handles:
            st = eval_lower(h, val_days, scaler, cfg, pm=pm)
            d, r = st.mean_abs_deviation, st.revenue
            if d < best_dev.get(h.constraint_id, math.inf) - 1e-6:
                best_dev[h.constraint_id] = d
                finalists[h.constraint_id] = []
            if d <= best_dev.get(h.constraint_id, math.inf) + 1e-6:
                lst = finalists.setdefault(h.constraint_id, [])
                lst.append((d, r, h.actor.copy(), h.critic.copy()))
                if len(lst) > cfg.select_finalists:
                    lst.pop(0)

    def run(policy_seed: int, rng_key: list[int], keep_curves: bool):
        policy_set = make_policy_set(spec, cfg, policy_seed)
        handles = policy_set.handles
        rng = np.random.default_rng(np.random.SeedSequence(rng_key))

        def record(step_count: int) -> None:
            if not keep_curves:
                return
            for h in handles:
                st = eval_lower(h, [eval_day], scaler, cfg,
                                max_requests=cfg.eval_requests)
                curves.append((step_count, h.target,
                               st.mean_abs_deviation, st.revenue))

        record(0)
        global_step = 0
        behavior = 0
        while global_step < cfg.train_steps:
            day = pool.get(int(rng.integers(len(pool))))
            handle = handles[behavior]
            behavior = (behavior + 1) % len(handles)
            ctx = EpisodeContext(day=day)
            state = encode_state(ctx.current_request(), ctx, scaler)
            while not ctx.done and global_step < cfg.train_steps:
                scale = noise.scale(global_step)
                eta = act(handle, state, cfg, explore=True,
                          noise_scale=scale, rng=rng)
                next_state, reward, outcome = step(ctx, eta, scaler, pm,
                                                   cfg.eta_min, cfg.eta_max)
                terminal = next_state is None
                a_norm = _to_normalized(eta, cfg)
                if cher:
                    cher_relabel(handles, state, a_norm, reward, next_state,
                                 outcome, handle.constraint_id, terminal,
                                 cfg)
                else:
                    d = delta_cs(outcome, handle.target, cfg.delta_form)
                    handle.buffer.add(state, a_norm, reward, next_state,
                                      outcome.pvr_i, d, terminal,
                                      handle.constraint_id)
                global_step += 1
                if global_step > cfg.warmup:
                    # early on, shared replay trains every policy on each
                    # new transition; after the dense window, updates
                    # rotate at a reduced rate so converged policies are
                    # not churned by off-target replay data
                    if not cher:
                        to_update = [handle]
                    elif global_step <= cfg.dense_update_steps:
                        to_update = handles
                    else:
                        to_update = [handles[global_step % len(handles)]]
                    for h in to_update:
                        if h.buffer.size >= cfg.batch_size:
                            update_step(h, cfg, rng)
                if global_step % cfg.eval_interval == 0:
                    record(global_step)
                    if verbose and keep_curves:
                        recent = [c for c in curves if c[0] == global_step]
                        devs = " ".join(f"{t:.2f}:{d:.3f}"
                                        for _, t, d, _ in recent)
                        print(f"step {global_step} dev {devs}", flush=True)
                if cfg.select_interval > 0 and \
                        global_step % cfg.select_interval == 0:
                    consider(handles, global_step)
                if terminal:
                    break
                state = next_state
        return policy_set

    primary = run(seed, [seed, 0xC0], keep_curves=True)
    for r in range(1, max(cfg.restarts, 1)):
        if not val_days:
            break  # without selection further runs cannot contribute
        ps_seed = int(np.random.SeedSequence([seed, 0xA11, r])
                      .generate_state(1)[0])
        run(ps_seed, [seed, 0xC0, r], keep_curves=False)

    stage2 = ([pool.get((1 + cfg.select_days + i) % len(pool))
               for i in range(min(cfg.select_stage2_days, len(pool)))]
              if cfg.select_stage2_days > 0 else val_days)
    for h in primary.handles:
        lst = finalists.get(h.constraint_id, [])
        if not lst:
            continue
        if len(lst) == 1 or not stage2:
            _, _, actor, critic = lst[0]
        else:
            scored = []
            for _, _, actor, critic in lst:
                h.actor, h.critic = actor, critic
                st = eval_lower(h, stage2, scaler, cfg, pm=pm)
                scored.append(((st.mean_abs_deviation, -st.revenue),
                               actor, critic))
            _, actor, critic = min(scored, key=lambda entry: entry[0])
        h.actor, h.critic = actor, critic
        h.actor_target = actor.copy()
        h.critic_target = critic.copy()
    return primary, curves
