"""Disaggregation of the calibrated OD vector into seeded vehicle plans.

Expected route flows are turned into concrete departures by an independent
Bernoulli draw per route and per second, so fractional demand needs no
rounding.  Draws for each route come from an own substream keyed by the
route's link sequence, which makes the output independent of flow ordering.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass

import numpy as np

from .assignment import AssignmentMatrix
from .routing import Route


class SamplingError(Exception):
    pass


@dataclass(frozen=True)
class RouteFlow:
    route: Route
    expected_trips: float


@dataclass(frozen=True)
class VehiclePlan:
    route: Route
    depart: int  # whole second within [0, delta)


def route_flows(x_star: np.ndarray, a: AssignmentMatrix) -> list[RouteFlow]:
    """Split OD demand over routes by the assignment's logit probabilities."""
    flows: list[RouteFlow] = []
    for m, (probs, routes) in enumerate(zip(a.route_probs, a.routes)):
        for p, route in zip(probs, routes):
            flows.append(RouteFlow(route=route, expected_trips=float(x_star[m]) * float(p)))
    return flows


def _route_digest(route: Route) -> int:
    h = hashlib.blake2b("|".join(route.links).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "big")


def sample_plans(flows: list[RouteFlow], delta: int, seed: int) -> list[VehiclePlan]:
    """Draw one Bernoulli(E_i / delta) trip per route and second.

    Deterministic given (flows, delta, seed); plans come back sorted by
    departure second with a stable per-route order.
    """
    delta = int(delta)
    if delta <= 0:
        raise SamplingError("delta must be positive")
    plans: list[tuple[int, int, Route]] = []
    for flow in flows:
        e = flow.expected_trips
        if e < 0:
            raise SamplingError("negative expected trips")
        if e > delta:
            raise SamplingError(
                f"expected trips {e:.3f} exceed frame length {delta}; "
                "demand above one departure per second per route"
            )
        if e == 0.0:
            continue
        digest = _route_digest(flow.route)
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, digest]))
        p = e / delta
        if p >= 1.0:
            seconds = np.arange(delta)
        else:
            seconds = np.flatnonzero(rng.random(delta) < p)
        for s in seconds:
            plans.append((int(s), digest, flow.route))
    plans.sort(key=lambda t: (t[0], t[1]))
    return [VehiclePlan(route=r, depart=s) for s, _, r in plans]


def dump_plans(plans: list[VehiclePlan], path: str) -> None:
    """Debug dump: one row per plan, route as its link sequence."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["depart_second", "od_index", "links"])
        for p in plans:
            writer.writerow([p.depart, p.route.od_index, " ".join(p.route.links)])
