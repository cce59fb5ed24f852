"""Sequential decision layer over the exposure simulator.

A day of requests is one trajectory.  Each step encodes the current
request as a 46-dim feature vector (15 ads x normalized eCPM/price/pCTR
plus a running ads-exposed fraction), applies a 15-dim score-adjustment
action, and accounts both the per-request constraint deviation and the
day-level exposure bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .env import (ETA_MAX, ETA_MIN, DayStream, ExposureOutcome, GenConfig,
                  PositionModel, Request, adjust_scores, day_metrics, expose)

__all__ = [
    "STATE_DIM",
    "ACTION_DIM",
    "ConstraintSpec",
    "FeatureScaler",
    "EpisodeContext",
    "Transition",
    "ConstraintReport",
    "encode_state",
    "step",
    "delta_cs",
    "check_constraints",
    "empirical_return",
]

STATE_DIM = 46
ACTION_DIM = 15


@dataclass(frozen=True)
class ConstraintSpec:
    """Day bound alpha, per-request cap beta, request-level target set."""

    alpha: float = 0.35
    beta: float = 0.5
    targets: tuple[float, ...] = (0.30, 0.35, 0.40, 0.45, 0.50)

    def __post_init__(self):
        if not 0 < self.alpha <= 1 or not 0 < self.beta <= 1:
            raise ValueError("alpha and beta must be in (0, 1]")
        if self.alpha > self.beta:
            raise ValueError("alpha must not exceed beta")
        if any(t > self.beta for t in self.targets):
            raise ValueError("every target must be <= beta")
        if list(self.targets) != sorted(set(self.targets)):
            raise ValueError("targets must be strictly increasing")

    @property
    def n_targets(self) -> int:
        return len(self.targets)


@dataclass(frozen=True)
class FeatureScaler:
    """Fixed min-max ranges mapping raw ad features into [0, 1]."""

    ecpm_max: float
    price_max: float
    pctr_max: float = 1.0

    @classmethod
    def from_gen_config(cls, cfg: GenConfig) -> "FeatureScaler":
        # three log-sigmas above the boosted median covers ~99.9%
        ecpm_max = (cfg.ecpm_median * cfg.peak_boost
                    * math.exp(3.0 * cfg.ecpm_sigma))
        return cls(ecpm_max=ecpm_max, price_max=ecpm_max)

    @classmethod
    def from_stream(cls, days: list[DayStream]) -> "FeatureScaler":
        ecpm_max = price_max = 0.0
        for day in days:
            for req in day.requests:
                _, ecpm, price, _, _ = req.arrays
                ecpm_max = max(ecpm_max, float(ecpm.max()))
                price_max = max(price_max, float(price.max()))
        if ecpm_max <= 0:
            raise ValueError("stream has no positive ad values")
        return cls(ecpm_max=ecpm_max, price_max=max(price_max, 1e-12))

    def scale(self, ecpm, price, pctr):
        return (np.clip(ecpm / self.ecpm_max, 0.0, 1.0),
                np.clip(price / self.price_max, 0.0, 1.0),
                np.clip(pctr / self.pctr_max, 0.0, 1.0))


@dataclass
class EpisodeContext:
    """Single-owner mutable rollout state for one day."""

    day: DayStream
    cursor: int = 0
    cum_ads: int = 0
    cum_slots: int = 0
    outcomes: list[ExposureOutcome] = field(default_factory=list)

    @property
    def done(self) -> bool:
        return self.cursor >= len(self.day.requests)

    @property
    def running_pvr(self) -> float:
        return self.cum_ads / self.cum_slots if self.cum_slots else 0.0

    def current_request(self) -> Request:
        if self.done:
            raise RuntimeError("episode already terminated")
        return self.day.requests[self.cursor]


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray | None
    outcome: ExposureOutcome
    constraint_id: int
    terminal: bool


@dataclass
class ConstraintReport:
    j_ct: float
    ct_satisfied: bool
    cs_violations: int


def encode_state(req: Request, ctx: EpisodeContext,
                 scaler: FeatureScaler) -> np.ndarray:
    """46-dim feature vector for the request under the rollout context."""
    _, ecpm, price, pctr, _ = req.arrays
    e, p, c = scaler.scale(ecpm, price, pctr)
    feats = np.empty(3 * len(req.ads) + 1)
    feats[0:-1:3] = e
    feats[1:-1:3] = p
    feats[2:-1:3] = c
    feats[-1] = ctx.running_pvr
    if not np.all(np.isfinite(feats)):
        raise ValueError("non-finite feature encountered while encoding")
    return feats


def step(ctx: EpisodeContext, action: np.ndarray, scaler: FeatureScaler,
         pm: PositionModel | None = None,
         eta_min: float = ETA_MIN, eta_max: float = ETA_MAX):
    """Apply one score-adjustment action to the current request.

    Returns (next_state or None at day end, reward, outcome) and
    advances the context.
    """
    pm = pm or PositionModel()
    req = ctx.current_request()
    adjusted = adjust_scores(req, action, eta_min, eta_max)
    outcome = expose(req, adjusted, pm)
    ctx.cum_ads += outcome.n_ads
    ctx.cum_slots += outcome.n_slots
    ctx.outcomes.append(outcome)
    ctx.cursor += 1
    if ctx.done:
        return None, outcome.revenue, outcome
    nxt = encode_state(ctx.current_request(), ctx, scaler)
    return nxt, outcome.revenue, outcome


def delta_cs(outcome: ExposureOutcome, target: float,
             form: str = "quadratic") -> float:
    """Per-request constraint penalty; 0 exactly on target, else negative."""
    if not 0 < target <= 1:
        raise ValueError("target must be in (0, 1]")
    dev = outcome.pvr_i - target
    if form == "quadratic":
        return -(dev * dev)
    if form == "abs":
        return -abs(dev)
    raise ValueError(f"unknown penalty form {form!r}")


def check_constraints(metrics, outcomes: list[ExposureOutcome],
                      spec: ConstraintSpec) -> ConstraintReport:
    """Day-level bound check plus per-request cap violation count."""
    j_ct = metrics.pvr
    violations = sum(1 for o in outcomes if o.pvr_i > spec.beta + 1e-12)
    return ConstraintReport(j_ct=j_ct,
                            ct_satisfied=j_ct <= spec.alpha + 1e-12,
                            cs_violations=violations)


def empirical_return(policy, days: list[DayStream], scaler: FeatureScaler,
                     pm: PositionModel | None = None):
    """Mean summed reward per day for a state->action policy.

    Returns (mean_revenue, day_pvrs).
    """
    if not days:
        raise ValueError("need at least one day")
    pm = pm or PositionModel()
    totals = []
    pvrs = []
    for day in days:
        ctx = EpisodeContext(day=day)
        state = encode_state(ctx.current_request(), ctx, scaler)
        total = 0.0
        while not ctx.done:
            action = policy(state)
            state, reward, _ = step(ctx, action, scaler, pm)
            total += reward
        totals.append(total)
        pvrs.append(ctx.running_pvr)
    return float(np.mean(totals)), pvrs
