"""Adaptive exposure simulator.

Per request, 15 candidate ads and 15 candidate recommendation items are
ranked together by score; the top 10 slots are exposed.  Ad scores can be
rescaled per request by a coefficient vector, which is the only control
surface the advertising side has over the mixed ranking.  Revenue is
position-corrected eCPM of the exposed ads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "AD",
    "REC",
    "ETA_MIN",
    "ETA_MAX",
    "Item",
    "Request",
    "DayStream",
    "ExposureOutcome",
    "PositionModel",
    "GenConfig",
    "DayMetrics",
    "generate_day",
    "load_day_log",
    "save_day_log",
    "adjust_scores",
    "expose",
    "reward_of",
    "day_metrics",
    "write_metrics_csv",
]

AD = "ad"
REC = "rec"

# Score-adjustment coefficient bounds. The trainer maps tanh output
# affinely onto this interval.
ETA_MIN = 0.0
ETA_MAX = 3.0


class ConfigError(ValueError):
    """Invalid generator or experiment configuration."""


class LogFormatError(ValueError):
    """Malformed or schema-violating day-log file."""


@dataclass(frozen=True)
class Item:
    id: int
    kind: str  # AD or REC
    score: float
    ecpm: float = 0.0
    price: float = 0.0
    pctr: float = 0.0


@dataclass
class Request:
    index: int
    hour: int
    ads: list[Item]
    recs: list[Item]
    expose_count: int = 10

    def __post_init__(self):
        self._arrays = None

    @property
    def arrays(self):
        """Cached (ad_scores, ad_ecpms, ad_prices, ad_pctrs, rec_scores)."""
        if self._arrays is None:
            self._arrays = (
                np.array([a.score for a in self.ads]),
                np.array([a.ecpm for a in self.ads]),
                np.array([a.price for a in self.ads]),
                np.array([a.pctr for a in self.ads]),
                np.array([r.score for r in self.recs]),
            )
        return self._arrays


@dataclass
class DayStream:
    day_id: str
    requests: list[Request]

    def __len__(self):
        return len(self.requests)


@dataclass
class ExposureOutcome:
    exposed: list[tuple[Item, int]]  # (item, position)
    n_ads: int
    pvr_i: float
    revenue: float
    hour: int
    request_index: int
    # effective sort score of each exposed item, in position order;
    # kept for the GSP valuation mode
    sort_scores: list[float] = field(default_factory=list)

    @property
    def n_slots(self) -> int:
        return len(self.exposed)


@dataclass(frozen=True)
class PositionModel:
    """Power-law position decay, f(0) = 1, nonincreasing."""

    gamma: float = 0.3

    def factor(self, k: int) -> float:
        if k < 0:
            raise ValueError(f"position {k} out of range")
        return float((1.0 + k) ** (-self.gamma))

    def factors(self, n: int) -> np.ndarray:
        return (1.0 + np.arange(n)) ** (-self.gamma)


def position_factor(k: int, n_slots: int = 10, gamma: float = 0.3) -> float:
    """Position correction for slot k, 0 <= k < n_slots."""
    if not 0 <= k < n_slots:
        raise ValueError(f"position {k} outside [0, {n_slots})")
    return PositionModel(gamma).factor(k)


@dataclass(frozen=True)
class GenConfig:
    """Synthetic day generator parameters.

    eCPM is log-normal with an hour-dependent median (peak hours are
    boosted), pCTR is Beta, ad scores are coupled to eCPM so that the
    learned adjustment has signal, and rec scores are drawn so the two
    score distributions overlap.
    """

    requests_per_hour: int = 100
    hours: int = 24
    n_ads: int = 15
    n_recs: int = 15
    expose_count: int = 10
    ecpm_median: float = 0.3
    ecpm_sigma: float = 0.6
    peak_hours: tuple[int, ...] = (8, 9, 10, 11, 12)
    peak_boost: float = 2.0
    pctr_alpha: float = 2.0
    pctr_beta: float = 30.0
    score_coupling: float = 0.5
    ad_score_scale: float = 1.1
    ad_score_sigma: float = 0.25
    rec_score_median: float = 1.0
    rec_score_sigma: float = 0.15
    base_seed: int = 0

    def validate(self) -> None:
        if self.requests_per_hour <= 0 or self.hours <= 0:
            raise ConfigError("request counts must be positive")
        if self.n_ads <= 0 or self.n_recs <= 0:
            raise ConfigError("candidate counts must be positive")
        if not 0 < self.expose_count < self.n_ads + self.n_recs:
            raise ConfigError("expose_count must be in (0, n_ads + n_recs)")
        for name in ("ecpm_median", "ecpm_sigma", "pctr_alpha", "pctr_beta",
                     "ad_score_scale", "ad_score_sigma", "rec_score_median",
                     "rec_score_sigma", "peak_boost"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if any(not 0 <= h < self.hours for h in self.peak_hours):
            raise ConfigError("peak_hours outside the day")


def generate_day(cfg: GenConfig, seed: int) -> DayStream:
    """Generate one synthetic day; deterministic in (cfg, seed)."""
    cfg.validate()
    rng = np.random.default_rng([cfg.base_seed, seed])
    requests = []
    next_id = 0
    for hour in range(cfg.hours):
        boost = cfg.peak_boost if hour in cfg.peak_hours else 1.0
        mu = math.log(cfg.ecpm_median * boost)
        n = cfg.requests_per_hour
        ecpm = rng.lognormal(mu, cfg.ecpm_sigma, size=(n, cfg.n_ads))
        pctr = rng.beta(cfg.pctr_alpha, cfg.pctr_beta, size=(n, cfg.n_ads))
        noise = rng.lognormal(0.0, cfg.ad_score_sigma, size=(n, cfg.n_ads))
        ad_score = cfg.ad_score_scale * (ecpm ** cfg.score_coupling) * noise
        rec_score = rng.lognormal(
            math.log(cfg.rec_score_median), cfg.rec_score_sigma,
            size=(n, cfg.n_recs))
        price = ecpm / (np.maximum(pctr, 1e-3) * 1000.0)
        # candidate ads arrive ranked by the ad system's own score
        rank = np.argsort(-ad_score, axis=1)
        for r in range(n):
            ads = [
                Item(id=next_id + j, kind=AD,
                     score=float(ad_score[r, rank[r, j]]),
                     ecpm=float(ecpm[r, rank[r, j]]),
                     price=float(price[r, rank[r, j]]),
                     pctr=float(pctr[r, rank[r, j]]))
                for j in range(cfg.n_ads)
            ]
            next_id += cfg.n_ads
            recs = [
                Item(id=next_id + j, kind=REC, score=float(rec_score[r, j]))
                for j in range(cfg.n_recs)
            ]
            next_id += cfg.n_recs
            requests.append(Request(
                index=len(requests), hour=hour, ads=ads, recs=recs,
                expose_count=cfg.expose_count))
    return DayStream(day_id=f"day-{seed}", requests=requests)


def adjust_scores(req: Request, eta: np.ndarray,
                  eta_min: float = ETA_MIN,
                  eta_max: float = ETA_MAX) -> np.ndarray:
    """Multiply each ad score by its coefficient; recs are untouched."""
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (len(req.ads),):
        raise ValueError(
            f"expected {len(req.ads)} coefficients, got shape {eta.shape}")
    if np.any(eta < eta_min - 1e-12) or np.any(eta > eta_max + 1e-12):
        raise ValueError(f"coefficients outside [{eta_min}, {eta_max}]")
    return req.arrays[0] * eta


def expose(req: Request, adjusted_ad_scores: np.ndarray,
           pm: PositionModel | None = None) -> ExposureOutcome:
    """Merge ads (adjusted scores) and recs, rank, expose the top slots.

    Ties break deterministically: higher score first, then recs before
    ads, then lower id first.
    """
    adjusted = np.asarray(adjusted_ad_scores, dtype=float)
    if adjusted.shape != (len(req.ads),):
        raise ValueError("adjusted score vector has wrong length")
    if not np.all(np.isfinite(adjusted)) or np.any(adjusted < 0):
        raise ValueError("adjusted scores must be finite and nonnegative")
    pm = pm or PositionModel()

    rec_scores = req.arrays[4]
    scores = np.concatenate([adjusted, rec_scores])
    # kind rank: recs (0) before ads (1) on equal score
    kind_rank = np.concatenate([
        np.ones(len(req.ads)), np.zeros(len(req.recs))])
    ids = np.array([it.id for it in req.ads] + [it.id for it in req.recs])
    order = np.lexsort((ids, kind_rank, -scores))
    top = order[:req.expose_count]

    items = req.ads + req.recs
    exposed = [(items[i], pos) for pos, i in enumerate(top)]
    sort_scores = [float(scores[i]) for i in top]
    n_ads = sum(1 for it, _ in exposed if it.kind == AD)
    pvr = n_ads / req.expose_count
    revenue = sum(pm.factor(pos) * it.ecpm
                  for it, pos in exposed if it.kind == AD)
    return ExposureOutcome(
        exposed=exposed, n_ads=n_ads, pvr_i=pvr, revenue=float(revenue),
        hour=req.hour, request_index=req.index, sort_scores=sort_scores)


def reward_of(outcome: ExposureOutcome, pm: PositionModel,
              valuation: str = "ecpm") -> float:
    """Position-corrected value of the exposed ads.

    valuation="ecpm": sum of f(position) * eCPM (the default).
    valuation="gsp": each exposed ad pays its eCPM discounted by the
    next-ranked item's score ratio (second-price style on sort scores).
    """
    total = 0.0
    n = len(outcome.exposed)
    for item, pos in outcome.exposed:
        if item.kind != AD:
            continue
        value = item.ecpm
        if valuation == "gsp":
            own = outcome.sort_scores[pos]
            nxt = outcome.sort_scores[pos + 1] if pos + 1 < n else 0.0
            value = item.ecpm * (nxt / own if own > 0 else 0.0)
        elif valuation != "ecpm":
            raise ValueError(f"unknown valuation mode {valuation!r}")
        total += pm.factor(pos) * value
    return float(total)


@dataclass
class DayMetrics:
    pvr: float
    revenue: float
    # hour -> (revenue, pvr, revenue/pvr)
    per_hour: dict[int, tuple[float, float, float]]


def day_metrics(outcomes: list[ExposureOutcome]) -> DayMetrics:
    """Day PVR, total revenue, and per-hour aggregates."""
    if not outcomes:
        raise ValueError("no outcomes to aggregate")
    by_hour: dict[int, list[ExposureOutcome]] = {}
    for o in outcomes:
        by_hour.setdefault(o.hour, []).append(o)
    per_hour = {}
    for hour in sorted(by_hour):
        os_ = by_hour[hour]
        rev = sum(o.revenue for o in os_)
        slots = sum(o.n_slots for o in os_)
        pvr = sum(o.n_ads for o in os_) / slots
        per_hour[hour] = (rev, pvr, rev / pvr if pvr > 0 else 0.0)
    total_rev = sum(o.revenue for o in outcomes)
    total_slots = sum(o.n_slots for o in outcomes)
    total_pvr = sum(o.n_ads for o in outcomes) / total_slots
    return DayMetrics(pvr=total_pvr, revenue=total_rev, per_hour=per_hour)


def write_metrics_csv(metrics: DayMetrics, path) -> None:
    """CSV with header hour,revenue,pvr,revenue_per_pvr and a summary row."""
    lines = ["hour,revenue,pvr,revenue_per_pvr"]
    for hour, (rev, pvr, rpp) in sorted(metrics.per_hour.items()):
        lines.append(f"{hour},{rev!r},{pvr!r},{rpp!r}")
    rpp = metrics.revenue / metrics.pvr if metrics.pvr > 0 else 0.0
    lines.append(f"total,{metrics.revenue!r},{metrics.pvr!r},{rpp!r}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


class DayPool:
    """Lazy, deterministic collection of days.

    Synthetic pools regenerate a day from its seed on each access so a
    200-day pool never has to live in memory at once.
    """

    def __init__(self, cfg: GenConfig | None = None,
                 seeds: list[int] | None = None,
                 days: list[DayStream] | None = None):
        if (days is None) == (cfg is None):
            raise ValueError("provide either in-memory days or (cfg, seeds)")
        if cfg is not None and seeds is None:
            raise ValueError("synthetic pool needs day seeds")
        self._cfg = cfg
        self._seeds = list(seeds) if seeds is not None else None
        self._days = days

    def __len__(self) -> int:
        return len(self._days) if self._days is not None else len(self._seeds)

    def get(self, i: int) -> DayStream:
        if self._days is not None:
            return self._days[i]
        return generate_day(self._cfg, self._seeds[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self.get(i)


def _item_to_record(item: Item, kind: str) -> dict:
    if kind == AD:
        return {"id": item.id, "score": item.score, "ecpm": item.ecpm,
                "price": item.price, "pctr": item.pctr}
    return {"id": item.id, "score": item.score}


def save_day_log(day: DayStream, path) -> None:
    """Write a day as line-delimited JSON, one request per line."""
    with open(path, "w", encoding="utf-8") as f:
        for req in day.requests:
            rec = {
                "index": req.index,
                "hour": req.hour,
                "ads": [_item_to_record(a, AD) for a in req.ads],
                "recs": [_item_to_record(r, REC) for r in req.recs],
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_day_log(path, n_ads: int = 15, n_recs: int = 15,
                 expose_count: int = 10) -> DayStream:
    """Parse a JSONL day log; order-preserving, schema-checked."""
    requests: list[Request] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise LogFormatError(f"line {lineno}: invalid JSON: {e}")
            try:
                ads = [Item(id=int(a["id"]), kind=AD, score=float(a["score"]),
                            ecpm=float(a["ecpm"]), price=float(a["price"]),
                            pctr=float(a["pctr"])) for a in rec["ads"]]
                recs = [Item(id=int(r["id"]), kind=REC,
                             score=float(r["score"])) for r in rec["recs"]]
                req = Request(index=int(rec["index"]), hour=int(rec["hour"]),
                              ads=ads, recs=recs, expose_count=expose_count)
            except (KeyError, TypeError, ValueError) as e:
                raise LogFormatError(f"line {lineno}: bad record: {e}")
            if len(ads) != n_ads:
                raise LogFormatError(
                    f"line {lineno}: record index {rec.get('index')} has "
                    f"{len(ads)} ads, expected {n_ads}")
            if len(recs) != n_recs:
                raise LogFormatError(
                    f"line {lineno}: record index {rec.get('index')} has "
                    f"{len(recs)} recs, expected {n_recs}")
            if not 0 <= req.hour < 24:
                raise LogFormatError(f"line {lineno}: hour out of range")
            requests.append(req)
    import os
    day_id = os.path.splitext(os.path.basename(str(path)))[0]
    return DayStream(day_id=day_id, requests=requests)
