"""Command-line surface: scenario generation, ground-truth synthesis,
streaming calibration, and report export.

Subcommands:

- ``generate``: synthesize a grid network, per-OD demand, a normalized trip
  distribution, and ground-truth vehicle plans.
- ``truth``: replay ground-truth plans through the simulator, frame by frame
  with state handoff, and write per-frame sensor counts.
- ``calibrate``: run the streaming calibration loop against a counts
  directory or a stdin stream, writing per-frame estimates and reports.
- ``metrics``: error tables and the iteration-diagnostics correlation matrix.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import metrics
from .assignment import NodVector, load_nod, save_nod
from .calibrator import CalibConfig, FrameOutput, iter_frames
from .fixedpoint import FpConfig
from .mesosim import SimConfig, save_state, simulate_frame
from .network import Network, free_flow_times, generate_grid, load_network, save_network, validate
from .routing import Route, add_best_new_route, init_shortest_paths, route_costs
from .sampler import VehiclePlan
from .assignment import logit_probs


@dataclass
class ScenarioSpec:
    rows: int
    cols: int
    link_length: float
    lanes: int
    speed_limit: float
    poi: str
    duration: int
    frame_length: int
    seed: int
    count_range: tuple[float, float] | None = None
    rate_range: tuple[float, float] | None = None
    truth_routes: int = 4
    gamma: float = -0.01

    def __post_init__(self):
        if self.duration <= 0 or self.frame_length <= 0:
            raise ValueError("duration and frame_length must be positive")
        if self.duration % self.frame_length != 0:
            raise ValueError("duration must be a multiple of frame_length")
        if (self.count_range is None) == (self.rate_range is None):
            raise ValueError("specify exactly one of count_range / rate_range")
        rng = self.count_range or self.rate_range
        if rng[0] < 0 or rng[1] < rng[0]:
            raise ValueError("demand range must be nonnegative and ordered")


def _truth_demand(spec: ScenarioSpec, net: Network, rng: np.random.Generator) -> np.ndarray:
    """Per-OD trip totals over the whole duration."""
    n = net.n_od
    if spec.count_range is not None:
        lo, hi = spec.count_range
        return rng.integers(int(lo), int(hi) + 1, size=n)
    lo, hi = spec.rate_range
    rates = rng.uniform(lo, hi, size=n)
    return rng.poisson(rates * spec.duration / 3600.0)


def _truth_plans(
    spec: ScenarioSpec, net: Network, totals: np.ndarray, rng: np.random.Generator
) -> list[tuple[int, Route]]:
    """Assign each trip a departure second and a logit-sampled route."""
    nu = free_flow_times(net)
    db = init_shortest_paths(net, nu, rho=max(spec.truth_routes, 1))
    for _ in range(spec.truth_routes - 1):
        for m in range(net.n_od):
            add_best_new_route(db, net, nu, m)
    plans: list[tuple[int, Route]] = []
    for m in range(net.n_od):
        count = int(totals[m])
        if count == 0:
            continue
        routes = db.routes(m)
        probs = logit_probs([route_costs(r, net, nu).theta_i for r in routes], spec.gamma)
        choices = rng.choice(len(routes), size=count, p=probs)
        departs = rng.integers(0, spec.duration, size=count)
        for c, dep in zip(choices, departs):
            plans.append((int(dep), routes[int(c)]))
    plans.sort(key=lambda t: (t[0], t[1].od_index, t[1].links))
    return plans


def _write_plans(plans: list[tuple[int, Route]], net: Network, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["depart", "origin", "destination", "links"])
        for dep, route in plans:
            o, d = net.od_pairs[route.od_index]
            writer.writerow([dep, o, d, " ".join(route.links)])


def _read_plans(path: str, net: Network) -> list[tuple[int, Route]]:
    plans = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            od = (row["origin"], row["destination"])
            m = net.od_index.get(od)
            if m is None:
                raise ValueError(f"{path}: unknown OD pair {od}")
            plans.append((int(row["depart"]), Route(od_index=m, links=tuple(row["links"].split()))))
    return plans


def _write_counts(net: Network, counts: np.ndarray, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sensor_link_id", "count"])
        for lid, c in zip(net.sensor_links, counts):
            writer.writerow([lid, int(c)])


def _read_counts(net: Network, path: str) -> np.ndarray:
    by_link = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            by_link[row["sensor_link_id"]] = float(row["count"])
    unknown = set(by_link) - set(net.sensor_links)
    if unknown:
        raise ValueError(f"{path}: unknown sensor links {sorted(unknown)}")
    return np.array([by_link.get(lid, 0.0) for lid in net.sensor_links])


def cmd_generate(args) -> int:
    count_range = None
    rate_range = None
    if args.rate_low is not None or args.rate_high is not None:
        rate_range = (args.rate_low or 0.0, args.rate_high or 0.0)
    else:
        count_range = (args.demand_low, args.demand_high)
    spec = ScenarioSpec(
        rows=args.rows,
        cols=args.cols,
        link_length=args.link_length,
        lanes=args.lanes,
        speed_limit=args.speed_limit,
        poi=args.poi,
        duration=args.duration,
        frame_length=args.frame_length,
        seed=args.seed,
        count_range=count_range,
        rate_range=rate_range,
        truth_routes=args.truth_routes,
        gamma=args.gamma,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    net = generate_grid(
        spec.rows, spec.cols, spec.link_length, spec.lanes, spec.speed_limit,
        sensors_on_all_links=True, poi_selector=spec.poi,
    )
    problems = validate(net)
    if problems:
        raise ValueError(f"generated network invalid: {problems[:3]}")
    save_network(net, os.path.join(args.out_dir, "network.json"))

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed]))
    totals = _truth_demand(spec, net, rng)
    plans = _truth_plans(spec, net, totals, rng)
    _write_plans(plans, net, os.path.join(args.out_dir, "plans.csv"))

    n_frames = spec.duration // spec.frame_length
    per_frame = np.zeros((n_frames, net.n_od), dtype=np.int64)
    for dep, route in plans:
        per_frame[dep // spec.frame_length, route.od_index] += 1
    for t in range(n_frames):
        with open(os.path.join(args.out_dir, f"true_od_{t}.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["origin", "destination", "trips"])
            for m, (o, d) in enumerate(net.od_pairs):
                writer.writerow([o, d, int(per_frame[t, m])])

    total = float(totals.sum())
    if total <= 0:
        raise ValueError("generated demand is empty; widen the demand range")
    save_nod(net, totals / total, os.path.join(args.out_dir, "nod.csv"))

    meta = {
        "rows": spec.rows, "cols": spec.cols, "poi": spec.poi,
        "duration": spec.duration, "frame_length": spec.frame_length,
        "seed": spec.seed, "total_trips": int(totals.sum()),
        "frames": n_frames,
        "trips_per_frame": [int(x) for x in per_frame.sum(axis=1)],
    }
    with open(os.path.join(args.out_dir, "scenario.json"), "w") as fh:
        json.dump(meta, fh, indent=1)
        fh.write("\n")
    print(f"generated {int(totals.sum())} trips over {n_frames} frames in {args.out_dir}")
    return 0


def cmd_truth(args) -> int:
    net = load_network(args.network)
    plans = _read_plans(args.plans, net)
    os.makedirs(args.out_dir, exist_ok=True)
    delta = args.frame_length
    last = max((dep for dep, _ in plans), default=0)
    n_frames = args.frames if args.frames else last // delta + 1
    cfg = SimConfig()
    state = None
    summary = []
    for t in range(n_frames):
        frame_plans = [
            VehiclePlan(route=r, depart=dep - t * delta)
            for dep, r in plans
            if t * delta <= dep < (t + 1) * delta
        ]
        result = simulate_frame(net, frame_plans, state, cfg, delta)
        state = save_state(result)
        _write_counts(net, result.counts, os.path.join(args.out_dir, f"counts_{t}.csv"))
        summary.append(
            {
                "frame": t,
                "departures": result.injected,
                "completed": len(result.completed),
                "carryover": len(state.vehicles),
                "mean_speed": round(result.mean_speed, 3),
            }
        )
    with open(os.path.join(args.out_dir, "truth_summary.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(summary[0].keys()))
        writer.writeheader()
        writer.writerows(summary)
    print(f"wrote counts for {n_frames} frames to {args.out_dir}")
    return 0


def _load_config_file(path: str) -> dict:
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}: expected 'key = value', got {line!r}")
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    return values


_CONFIG_KEYS = {
    "delta": int, "lambda": float, "gamma": float, "rho": int,
    "replicates": int, "max_iterations": int, "epsilon_exit": float,
    "base_seed": int, "u_factor": float, "u_floor": float,
    "jobs": int, "fp_d": float, "fp_denom_epsilon": float,
}


def _build_config(args) -> CalibConfig:
    values: dict = {}
    if args.config:
        raw = _load_config_file(args.config)
        for key, text in raw.items():
            if key not in _CONFIG_KEYS:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = _CONFIG_KEYS[key](text)
    overrides = {
        "delta": args.delta, "lambda": args.lam, "gamma": args.gamma,
        "rho": args.rho, "replicates": args.replicates,
        "max_iterations": args.max_iter, "epsilon_exit": args.eps_exit,
        "base_seed": args.seed, "u_factor": args.u_factor,
        "u_floor": args.u_floor, "jobs": args.jobs, "fp_d": args.fp_d,
    }
    for key, val in overrides.items():
        if val is not None:
            values[key] = val
    fp = FpConfig(
        d=values.pop("fp_d", 5.0),
        denom_epsilon=values.pop("fp_denom_epsilon", 1e-9),
    )
    values["lam"] = values.pop("lambda", 1.0)
    return CalibConfig(fp=fp, sim=SimConfig(), **values)


def _dir_count_stream(net: Network, counts_dir: str, frames: int | None):
    t = 0
    while True:
        if frames is not None and t >= frames:
            return
        path = os.path.join(counts_dir, f"counts_{t}.csv")
        if not os.path.exists(path):
            if frames is not None:
                raise FileNotFoundError(f"missing counts file for frame {t}: {path}")
            if t == 0:
                raise FileNotFoundError(f"no counts files in {counts_dir}")
            return
        yield t, _read_counts(net, path)
        t += 1


def _stdin_count_stream(net: Network, fh, frames: int | None):
    """Lines ``frame,sensor_link_id,count``; ``end,<frame>`` closes a frame."""
    sensor_index = {lid: k for k, lid in enumerate(net.sensor_links)}
    current = np.zeros(net.n_sensors)
    current_frame = 0
    for line in fh:
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if parts[0] == "end":
            t = int(parts[1])
            if t != current_frame:
                raise ValueError(f"end marker for frame {t}, expected {current_frame}")
            yield t, current
            current = np.zeros(net.n_sensors)
            current_frame += 1
            if frames is not None and current_frame >= frames:
                return
            continue
        t, lid, count = int(parts[0]), parts[1], float(parts[2])
        if t != current_frame:
            raise ValueError(f"record for frame {t}, expected {current_frame}")
        if lid not in sensor_index:
            raise ValueError(f"unknown sensor link {lid!r}")
        current[sensor_index[lid]] += count


def _write_frame_output(out: FrameOutput, net: Network, out_dir: str) -> dict:
    t = out.frame_index
    with open(os.path.join(out_dir, f"od_estimate_{t}.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["origin", "destination", "trips"])
        for (o, d), x in zip(net.od_pairs, out.od_estimate):
            writer.writerow([o, d, f"{x:.6f}"])
    with open(os.path.join(out_dir, f"route_flows_{t}.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["origin", "destination", "expected_trips", "links"])
        for flow in out.flows:
            o, d = net.od_pairs[flow.route.od_index]
            writer.writerow([o, d, f"{flow.expected_trips:.6f}", " ".join(flow.route.links)])
    with open(os.path.join(out_dir, f"counts_fit_{t}.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sensor_link_id", "observed", "estimated"])
        for lid, o, e in zip(net.sensor_links, out.corrected_counts, out.estimated_counts):
            writer.writerow([lid, f"{o:.1f}", f"{e:.1f}"])
    metrics.write_error_records(out.records, os.path.join(out_dir, f"errors_{t}.csv"))

    def _nrmse_or_nan(y, y_star):
        try:
            return metrics.nrmse(y, y_star)
        except ValueError:
            return math.nan

    def _eps_or_nan(y, y_star):
        try:
            return metrics.rel_error(y, y_star)
        except ValueError:
            return math.nan

    return {
        "time_frame": t,
        "real_count": f"{out.corrected_counts.sum():.0f}",
        "estimated_count": f"{out.estimated_counts.sum():.0f}",
        "od_eps": f"{_eps_or_nan(out.seed, out.od_estimate):.2f}",
        "od_rmse": f"{metrics.rmse(out.seed, out.od_estimate):.2f}",
        "od_nrmse": f"{_nrmse_or_nan(out.seed, out.od_estimate):.2f}",
        "sensor_eps": f"{_eps_or_nan(out.corrected_counts, out.estimated_counts):.2f}",
        "sensor_rmse": f"{metrics.rmse(out.corrected_counts, out.estimated_counts):.2f}",
        "sensor_nrmse": f"{_nrmse_or_nan(out.corrected_counts, out.estimated_counts):.2f}",
        "estimated_trips": f"{out.od_estimate.sum():.1f}",
    }


def cmd_calibrate(args) -> int:
    net = load_network(args.network)
    problems = validate(net)
    if problems:
        raise ValueError(f"invalid network: {problems[:3]}")
    nod = load_nod(args.nod, net)
    cfg = _build_config(args)
    os.makedirs(args.out_dir, exist_ok=True)

    if args.counts == "-":
        stream = _stdin_count_stream(net, sys.stdin, args.frames)
    else:
        stream = _dir_count_stream(net, args.counts, args.frames)

    summary_rows = []
    for out in iter_frames(net, nod, stream, cfg):
        row = _write_frame_output(out, net, args.out_dir)
        summary_rows.append(row)
        print(
            f"frame {out.frame_index}: sensor eps {row['sensor_eps']}% "
            f"({len(out.records)} iterations, best {out.best_iteration})"
        )
    if not summary_rows:
        raise ValueError("no frames processed")
    metrics.write_summary(summary_rows, os.path.join(args.out_dir, "summary.csv"))
    return 0


def cmd_metrics(args) -> int:
    if args.errors:
        records = metrics.read_error_records(args.errors)
        matrix = metrics.covariance_report(records)
        writer = csv.writer(sys.stdout)
        writer.writerow([""] + list(metrics.ERROR_FIELDS))
        for name, row in zip(metrics.ERROR_FIELDS, matrix):
            writer.writerow([name] + [f"{v:.4f}" for v in row])
        return 0
    if args.observed and args.estimated:
        net = load_network(args.network)
        y = _read_counts(net, args.observed)
        y_star = _read_counts(net, args.estimated)
        print(f"eps {metrics.rel_error(y, y_star):.3f}%")
        print(f"rmse {metrics.rmse(y, y_star):.3f}")
        print(f"nrmse {metrics.nrmse(y, y_star):.3f}%")
        return 0
    raise ValueError("need --errors or both --observed and --estimated")


def _add_calibrate_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--delta", type=int, default=None, help="frame length in seconds")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="confidence weight on the seed OD block")
    p.add_argument("--gamma", type=float, default=None, help="logit cost sensitivity (1/s)")
    p.add_argument("--rho", type=int, default=None, help="max routes per OD pair")
    p.add_argument("--replicates", type=int, default=None, help="parallel samplings per round")
    p.add_argument("--max-iter", type=int, default=None, help="round cap per frame")
    p.add_argument("--eps-exit", type=float, default=None, help="exit threshold, percent")
    p.add_argument("--seed", type=int, default=None, help="base seed")
    p.add_argument("--u-factor", type=float, default=None)
    p.add_argument("--u-floor", type=float, default=None)
    p.add_argument("--fp-d", type=float, default=None, help="travel-time clamp multiplier")
    p.add_argument("--jobs", type=int, default=None, help="parallel replicate workers")
    p.add_argument("--frames", type=int, default=None, help="process only the first N frames")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="odcal",
        description="Streaming OD demand calibration from link traffic counts",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a grid scenario")
    g.add_argument("--rows", type=int, required=True)
    g.add_argument("--cols", type=int, required=True)
    g.add_argument("--link-length", type=float, default=400.0)
    g.add_argument("--lanes", type=int, default=2)
    g.add_argument("--speed-limit", type=float, default=13.89)
    g.add_argument("--poi", choices=["all_nodes", "ring_pattern"], default="all_nodes")
    g.add_argument("--demand-low", type=float, default=20.0,
                   help="min trips per OD pair over the whole duration")
    g.add_argument("--demand-high", type=float, default=35.0)
    g.add_argument("--rate-low", type=float, default=None,
                   help="min trips per hour per OD pair (alternative to counts)")
    g.add_argument("--rate-high", type=float, default=None)
    g.add_argument("--duration", type=int, default=4 * 3600)
    g.add_argument("--frame-length", type=int, default=3600)
    g.add_argument("--truth-routes", type=int, default=4,
                   help="route set size for ground-truth assignment")
    g.add_argument("--gamma", type=float, default=-0.01)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("truth", help="simulate ground-truth plans into counts")
    t.add_argument("--network", required=True)
    t.add_argument("--plans", required=True)
    t.add_argument("--frame-length", type=int, default=3600)
    t.add_argument("--frames", type=int, default=None)
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_truth)

    c = sub.add_parser("calibrate", help="run the streaming calibration loop")
    c.add_argument("--network", required=True)
    c.add_argument("--nod", required=True)
    c.add_argument("--counts", required=True,
                   help="directory of counts_<t>.csv files, or '-' for stdin stream")
    c.add_argument("--out-dir", required=True)
    _add_calibrate_flags(c)
    c.set_defaults(func=cmd_calibrate)

    m = sub.add_parser("metrics", help="error reports from result files")
    m.add_argument("--errors", help="per-iteration error record CSV")
    m.add_argument("--network")
    m.add_argument("--observed")
    m.add_argument("--estimated")
    m.set_defaults(func=cmd_metrics)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface a clean diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
