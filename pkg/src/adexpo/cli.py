"""Command-line interface for generation, training, evaluation, reports."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bench
from .config import ExperimentConfig
from .env import DayMetrics, day_metrics, generate_day, save_day_log, write_metrics_csv
from .higher import rollout_two_level, train_ccp
from .lower import PolicySet, act, train_lower
from .neural import load_net, save_net
from .pscmdp import EpisodeContext, encode_state, step


def _load_config(path: str | None) -> ExperimentConfig:
    return ExperimentConfig.load(path) if path else ExperimentConfig()


def _summary(**kw) -> None:
    print(json.dumps(kw, sort_keys=True))


def _write_manifest(out_dir: str, cmd: str, cfg: ExperimentConfig,
                    **extra) -> None:
    doc = {"command": cmd, "config_hash": cfg.config_hash(),
           "config": cfg.to_dict(), **extra}
    with open(os.path.join(out_dir, f"manifest_{cmd}.json"), "w") as f:
        json.dump(doc, f, sort_keys=True, indent=1)


def _save_report(report: bench.RunReport, out_dir: str, name: str) -> None:
    metrics = DayMetrics(pvr=report.pvr, revenue=report.revenue,
                         per_hour=report.per_hour)
    write_metrics_csv(metrics, os.path.join(out_dir, f"metrics_{name}.csv"))
    doc = {"name": report.name, "pvr": report.pvr, "revenue": report.revenue,
           "per_hour": {str(h): list(v) for h, v in report.per_hour.items()},
           "day_ids": list(report.day_ids), "day_pvrs": report.day_pvrs}
    with open(os.path.join(out_dir, f"report_{name}.json"), "w") as f:
        json.dump(doc, f, sort_keys=True)


def _load_report(path: str) -> bench.RunReport:
    with open(path) as f:
        doc = json.load(f)
    return bench.RunReport(
        name=doc["name"], pvr=doc["pvr"], revenue=doc["revenue"],
        per_hour={int(h): tuple(v) for h, v in doc["per_hour"].items()},
        day_ids=tuple(doc["day_ids"]), day_pvrs=doc["day_pvrs"])


def cmd_gen(args) -> int:
    cfg = _load_config(args.config)
    day = generate_day(cfg.generator, args.seed)
    save_day_log(day, args.out)
    _summary(cmd="gen", seed=args.seed, requests=len(day), path=args.out)
    return 0


def cmd_train_lower(args) -> int:
    cfg = _load_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    policy_set, curves = train_lower(
        cfg.train_pool(), cfg.constraints, cfg.lower, args.seed,
        cfg.scaler(), cher=not args.no_cher, pm=cfg.position_model(),
        verbose=args.verbose)
    ps_dir = os.path.join(args.out, f"policy_set_seed{args.seed}")
    policy_set.save(ps_dir, cfg.lower)
    curve_path = os.path.join(args.out, f"lower_curves_seed{args.seed}.csv")
    with open(curve_path, "w") as f:
        f.write("step,target,mean_abs_deviation,revenue\n")
        for step, target, dev, rev in curves:
            f.write(f"{step},{target!r},{dev!r},{rev!r}\n")
    _write_manifest(args.out, "train-lower", cfg, seed=args.seed,
                    cher=not args.no_cher)
    final = {f"{t:.2f}": d for s, t, d, _ in curves
             if s == max(c[0] for c in curves)}
    _summary(cmd="train-lower", seed=args.seed, policy_set=ps_dir,
             curves=curve_path, final_deviation=final)
    return 0


def cmd_train_ccp(args) -> int:
    cfg = _load_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    policy_set = PolicySet.load(args.policy_set)
    net, curves = train_ccp(cfg.train_pool(), policy_set, cfg.constraints,
                            cfg.higher, cfg.lower, cfg.scaler(), args.seed,
                            pm=cfg.position_model(), verbose=args.verbose)
    net_path = os.path.join(args.out, f"ccp_seed{args.seed}.json")
    save_net(net, net_path)
    curve_path = os.path.join(args.out, f"ccp_curves_seed{args.seed}.csv")
    with open(curve_path, "w") as f:
        f.write("episode,day_pvr,revenue\n")
        for ep, pvr, rev in curves:
            f.write(f"{ep},{pvr!r},{rev!r}\n")
    _write_manifest(args.out, "train-ccp", cfg, seed=args.seed)
    tail = curves[-20:]
    _summary(cmd="train-ccp", seed=args.seed, ccp=net_path,
             mean_day_pvr=float(np.mean([c[1] for c in tail])),
             mean_revenue=float(np.mean([c[2] for c in tail])))
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    pm = cfg.position_model()
    days = list(cfg.eval_pool())
    modes = [m for m in (args.manual_target, args.fixed_k, args.target,
                         args.ccp) if m is not None]
    if len(modes) != 1:
        print("eval: choose exactly one of --manual-target, --fixed-k, "
              "--target, --ccp", file=sys.stderr)
        return 2

    if args.manual_target is not None:
        report = bench.baseline_manual(days, args.manual_target, pm,
                                       calibration_day=cfg.calibration_day())
        name = args.name or "manual"
    elif args.fixed_k is not None:
        report = bench.baseline_fixed(days, args.fixed_k, pm)
        name = args.name or f"fixed-{args.fixed_k}"
    elif args.target is not None:
        policy_set = PolicySet.load(args.policy_set)
        handle = policy_set.handle_for(args.target)
        scaler = cfg.scaler()
        per_day = []
        for day in days:
            ctx = EpisodeContext(day=day)
            state = encode_state(ctx.current_request(), ctx, scaler)
            while not ctx.done:
                eta = act(handle, state, cfg.lower, explore=False)
                state, _, _ = step(ctx, eta, scaler, pm)
            per_day.append((day.day_id, ctx.outcomes))
        report = bench.report_from_outcomes(f"pi-{args.target:.2f}", per_day)
        name = args.name or f"pi-{args.target:.2f}".replace(".", "_")
    else:
        policy_set = PolicySet.load(args.policy_set)
        net = load_net(args.ccp)
        scaler = cfg.scaler()
        per_day = []
        choice_rows = []
        for day in days:
            metrics, rows = rollout_two_level(
                day, net, policy_set, cfg.constraints, cfg.higher,
                cfg.lower, scaler, pm)
            per_day.append((day.day_id, metrics, rows))
            for hour, target, rev, pvr in rows:
                choice_rows.append((day.day_id, hour, target, rev, pvr))
        name = args.name or "ccp"
        with open(os.path.join(args.out, f"choices_{name}.csv"), "w") as f:
            f.write("day,hour,target,revenue,pvr\n")
            for d, h, t, rv, pv in choice_rows:
                f.write(f"{d},{h},{t!r},{rv!r},{pv!r}\n")
        # aggregate over days: per-hour pvr is the mean of the day-hour
        # pvrs (equal slot counts per hour), revenue is summed
        rev_h: dict[int, float] = {}
        pvr_h: dict[int, list[float]] = {}
        for _, _, rows in per_day:
            for hour, _, rv, pv in rows:
                rev_h[hour] = rev_h.get(hour, 0.0) + rv
                pvr_h.setdefault(hour, []).append(pv)
        per_hour = {}
        for h in sorted(rev_h):
            pv = float(np.mean(pvr_h[h]))
            per_hour[h] = (rev_h[h], pv, rev_h[h] / pv if pv else 0.0)
        report = bench.RunReport(
            name=name,
            pvr=float(np.mean([m.pvr for _, m, _ in per_day])),
            revenue=sum(m.revenue for _, m, _ in per_day),
            per_hour=per_hour, day_ids=tuple(d for d, _, _ in per_day),
            day_pvrs=[m.pvr for _, m, _ in per_day])
    _save_report(report, args.out, name)
    _write_manifest(args.out, f"eval-{name}", cfg)
    _summary(cmd="eval", name=name, pvr=report.pvr, revenue=report.revenue,
             out=args.out)
    return 0


def cmd_oracle(args) -> int:
    cfg = _load_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    pm = cfg.position_model()
    alpha = args.alpha if args.alpha is not None else cfg.constraints.alpha
    days = list(cfg.eval_pool())
    per_day = []
    for day in days:
        outcomes = bench.oracle_outcomes(
            day, int(np.floor(alpha * sum(r.expose_count
                                          for r in day.requests))), pm)
        per_day.append((day.day_id, outcomes))
    report = bench.report_from_outcomes("oracle", per_day)
    _save_report(report, args.out, "oracle")
    _write_manifest(args.out, "oracle", cfg, alpha=alpha)
    _summary(cmd="oracle", alpha=alpha, pvr=report.pvr,
             revenue=report.revenue, out=args.out)
    return 0


def cmd_report(args) -> int:
    import glob
    paths = sorted(glob.glob(os.path.join(args.run_dir, "report_*.json")))
    if not paths:
        print(f"report: no report_*.json under {args.run_dir}",
              file=sys.stderr)
        return 2
    reports = [_load_report(p) for p in paths]
    rows, text = bench.compare_report(reports, manual_name=args.manual_name)
    out_path = os.path.join(args.run_dir, "comparison.csv")
    with open(out_path, "w") as f:
        f.write("policy,pvr,revenue,rel_revenue_pct\n")
        for row in rows:
            f.write(f"{row['policy']},{row['pvr']!r},{row['revenue']!r},"
                    f"{row['rel_revenue_pct']!r}\n")
    print(text)
    _summary(cmd="report", comparison=out_path, n_policies=len(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="adexpo",
        description="Adaptive ad-exposure simulator and trainer")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic day log")
    g.add_argument("--config")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train-lower", help="train the per-target policies")
    t.add_argument("--config")
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--no-cher", action="store_true")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(fn=cmd_train_lower)

    c = sub.add_parser("train-ccp", help="train the hour-level chooser")
    c.add_argument("--config")
    c.add_argument("--policy-set", required=True)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--verbose", action="store_true")
    c.set_defaults(fn=cmd_train_ccp)

    e = sub.add_parser("eval", help="evaluate a policy on the eval days")
    e.add_argument("--config")
    e.add_argument("--policy-set")
    e.add_argument("--ccp")
    e.add_argument("--target", type=float)
    e.add_argument("--manual-target", type=float)
    e.add_argument("--fixed-k", type=int)
    e.add_argument("--name")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    o = sub.add_parser("oracle", help="hindsight oracle on the eval days")
    o.add_argument("--config")
    o.add_argument("--alpha", type=float)
    o.add_argument("--out", required=True)
    o.set_defaults(fn=cmd_oracle)

    r = sub.add_parser("report", help="comparison table from eval reports")
    r.add_argument("--run-dir", required=True)
    r.add_argument("--manual-name", default="manual")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
