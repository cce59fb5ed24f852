"""Baselines, the hindsight oracle, and comparison reports.

The oracle pools every candidate ad of a day, spends a global exposure
budget greedily on the best marginal (position factor x eCPM) gains, and
is the revenue-maximal allocation at that budget under the position
model; fixed-k and calibrated-global-multiplier baselines mirror the
traditional and hand-tuned operating points.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .env import (AD, ETA_MAX, ETA_MIN, DayStream, ExposureOutcome,
                  PositionModel, Request, adjust_scores, day_metrics, expose)

__all__ = [
    "RunReport",
    "CalibrationError",
    "baseline_fixed",
    "baseline_manual",
    "calibrate_global_multiplier",
    "oracle_global",
    "oracle_outcomes",
    "compare_report",
    "report_from_outcomes",
]


class CalibrationError(RuntimeError):
    """Requested operating point unreachable within coefficient bounds."""


@dataclass
class RunReport:
    name: str
    pvr: float
    revenue: float
    # hour -> (revenue, pvr, revenue/pvr), aggregated over all days
    per_hour: dict[int, tuple[float, float, float]]
    day_ids: tuple[str, ...]
    day_pvrs: list[float] = field(default_factory=list)
    rel_revenue: float | None = None


def report_from_outcomes(name: str, per_day: list[tuple[str, list[ExposureOutcome]]]) -> RunReport:
    """Aggregate outcome lists (one per day) into a report."""
    all_outcomes = [o for _, os_ in per_day for o in os_]
    m = day_metrics(all_outcomes)
    day_pvrs = [day_metrics(os_).pvr for _, os_ in per_day]
    return RunReport(name=name, pvr=m.pvr, revenue=m.revenue,
                     per_hour=m.per_hour,
                     day_ids=tuple(d for d, _ in per_day),
                     day_pvrs=day_pvrs)


def _fixed_outcome(req: Request, k: int, pm: PositionModel) -> ExposureOutcome:
    ads = sorted(req.ads, key=lambda it: (-it.score, it.id))[:k]
    recs = sorted(req.recs, key=lambda it: (-it.score, it.id))
    chosen = ads + recs[:req.expose_count - k]
    chosen.sort(key=lambda it: (-it.score, 0 if it.kind != AD else 1, it.id))
    exposed = [(it, pos) for pos, it in enumerate(chosen)]
    revenue = sum(pm.factor(pos) * it.ecpm
                  for it, pos in exposed if it.kind == AD)
    return ExposureOutcome(
        exposed=exposed, n_ads=k, pvr_i=k / req.expose_count,
        revenue=float(revenue), hour=req.hour, request_index=req.index,
        sort_scores=[it.score for it in chosen])


def baseline_fixed(days: list[DayStream], k: int,
                   pm: PositionModel | None = None) -> RunReport:
    """Expose exactly the k best-scored ads in every request."""
    pm = pm or PositionModel()
    if not days:
        raise ValueError("need at least one day")
    n_slots = days[0].requests[0].expose_count
    if not 0 <= k <= n_slots:
        raise ValueError(f"k must be in [0, {n_slots}]")
    per_day = [(day.day_id, [_fixed_outcome(req, k, pm)
                             for req in day.requests]) for day in days]
    return report_from_outcomes(f"fixed-{k}", per_day)


def _uniform_day_pvr(day: DayStream, eta: float) -> float:
    ads = 0
    slots = 0
    for req in day.requests:
        o = expose(req, adjust_scores(req, np.full(len(req.ads), eta)))
        ads += o.n_ads
        slots += o.n_slots
    return ads / slots


def calibrate_global_multiplier(day: DayStream, target: float,
                                tol: float = 0.005,
                                eta_min: float = ETA_MIN,
                                eta_max: float = ETA_MAX) -> float:
    """Bisection for a single multiplier whose day PVR matches the target.

    Realized PVR is nondecreasing in the multiplier, so bisection
    converges; raises if the target is outside the reachable range.
    """
    if not 0 < target < 1:
        raise ValueError("target must be in (0, 1)")
    lo, hi = eta_min, eta_max
    pvr_lo = _uniform_day_pvr(day, lo)
    pvr_hi = _uniform_day_pvr(day, hi)
    if target < pvr_lo - tol or target > pvr_hi + tol:
        raise CalibrationError(
            f"target {target} outside reachable [{pvr_lo:.3f}, {pvr_hi:.3f}]")
    best_eta, best_err = lo, abs(pvr_lo - target)
    if abs(pvr_hi - target) < best_err:
        best_eta, best_err = hi, abs(pvr_hi - target)
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        pvr = _uniform_day_pvr(day, mid)
        if abs(pvr - target) < best_err:
            best_eta, best_err = mid, abs(pvr - target)
        if best_err <= tol / 2:
            break
        if pvr < target:
            lo = mid
        else:
            hi = mid
    if best_err > tol:
        raise CalibrationError(
            f"bisection stalled at error {best_err:.4f} > {tol}")
    return best_eta


def baseline_manual(days: list[DayStream], target: float,
                    pm: PositionModel | None = None,
                    calibration_day: DayStream | None = None) -> RunReport:
    """Single global multiplier calibrated by bisection, then evaluated."""
    pm = pm or PositionModel()
    if not days:
        raise ValueError("need at least one day")
    cal_day = calibration_day if calibration_day is not None else days[0]
    eta = calibrate_global_multiplier(cal_day, target)
    per_day = []
    for day in days:
        outcomes = [expose(req, adjust_scores(
            req, np.full(len(req.ads), eta)), pm) for req in day.requests]
        per_day.append((day.day_id, outcomes))
    report = report_from_outcomes("manual", per_day)
    return report


def oracle_outcomes(day: DayStream, budget: int,
                    pm: PositionModel | None = None) -> list[ExposureOutcome]:
    """Hindsight-optimal allocation of a global ad budget over one day.

    Greedy on marginal gain f(k) * eCPM of the next-best ad per request;
    the gains are diminishing in k, so the greedy allocation maximizes
    total position-corrected revenue at the budget.  Selected ads take
    the top positions of their home request (eCPM descending), displacing
    the lowest-ranked recs.
    """
    pm = pm or PositionModel()
    per_req_ads = []
    heap = []
    for i, req in enumerate(day.requests):
        ads = sorted(req.ads, key=lambda it: (-it.ecpm, it.id))
        per_req_ads.append(ads)
        if ads:
            heapq.heappush(heap, (-pm.factor(0) * ads[0].ecpm, i, 0))
    counts = [0] * len(day.requests)
    taken = 0
    while taken < budget and heap:
        _, i, k = heapq.heappop(heap)
        req = day.requests[i]
        counts[i] = k + 1
        taken += 1
        nxt = k + 1
        if nxt < len(per_req_ads[i]) and nxt < req.expose_count:
            heapq.heappush(
                heap, (-pm.factor(nxt) * per_req_ads[i][nxt].ecpm, i, nxt))
    outcomes = []
    for i, req in enumerate(day.requests):
        k = counts[i]
        ads = per_req_ads[i][:k]
        recs = sorted(req.recs, key=lambda it: (-it.score, it.id))
        chosen = ads + recs[:req.expose_count - k]
        exposed = [(it, pos) for pos, it in enumerate(chosen)]
        revenue = sum(pm.factor(pos) * it.ecpm
                      for it, pos in exposed if it.kind == AD)
        outcomes.append(ExposureOutcome(
            exposed=exposed, n_ads=k, pvr_i=k / req.expose_count,
            revenue=float(revenue), hour=req.hour, request_index=req.index,
            sort_scores=[it.score for it in chosen]))
    return outcomes


def oracle_global(day: DayStream, alpha: float,
                  pm: PositionModel | None = None,
                  budget: int | None = None) -> RunReport:
    """Oracle report at exposure budget floor(alpha * total slots)."""
    if budget is None:
        if not 0 < alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        total_slots = sum(req.expose_count for req in day.requests)
        budget = int(np.floor(alpha * total_slots))
    outcomes = oracle_outcomes(day, budget, pm)
    return report_from_outcomes("oracle", [(day.day_id, outcomes)])


def compare_report(reports: list[RunReport],
                   manual_name: str = "manual") -> tuple[list[dict], str]:
    """Relative comparison with the manual baseline pinned at 100%.

    Returns (rows, rendered text).  All reports must cover the same
    evaluation days.
    """
    if not reports:
        raise ValueError("no reports to compare")
    day_sets = {r.day_ids for r in reports}
    if len(day_sets) != 1:
        raise ValueError("reports cover different evaluation days")
    manual = next((r for r in reports if r.name == manual_name), None)
    if manual is None:
        raise ValueError(f"missing baseline report {manual_name!r}")
    rows = []
    for r in reports:
        rel = 100.0 * r.revenue / manual.revenue if manual.revenue else 0.0
        r.rel_revenue = rel
        hours = sorted(set(r.per_hour) | set(manual.per_hour))
        hourly_delta = {
            h: r.per_hour.get(h, (0.0, 0.0, 0.0))[0]
            - manual.per_hour.get(h, (0.0, 0.0, 0.0))[0]
            for h in hours
        }
        rows.append({"policy": r.name, "pvr": r.pvr, "revenue": r.revenue,
                     "rel_revenue_pct": rel, "hourly_delta": hourly_delta})
    width = max(len(r.name) for r in reports)
    lines = [f"{'policy':<{width}}  {'PVR':>7}  {'revenue':>12}  {'rel%':>7}"]
    for row in rows:
        lines.append(f"{row['policy']:<{width}}  {row['pvr']:>7.4f}  "
                     f"{row['revenue']:>12.2f}  {row['rel_revenue_pct']:>7.1f}")
    return rows, "\n".join(lines)
