"""Per-OD route database: bounded route sets and travel-time based costs.

Path search runs in link space (heap states are link-id sequences), which
supports parallel links between the same node pair and gives a deterministic
lexicographic tie-break on equal-cost routes.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .network import Network


class RoutingError(Exception):
    pass


@dataclass(frozen=True)
class Route:
    od_index: int
    links: tuple[str, ...]


@dataclass
class RouteCosts:
    """Origin-to-destination cost and origin-to-sensor prefix costs.

    ``theta_ik`` maps sensor index k to the travel time from the origin to
    the ENTRY of the instrumented link; sensors not on the route are absent
    (treated as +inf).
    """

    theta_i: float
    theta_ik: dict[int, float] = field(default_factory=dict)

    def for_sensor(self, k: int) -> float:
        return self.theta_ik.get(k, math.inf)


class RouteDb:
    """Bounded per-OD route sets, at most ``rho`` routes per pair."""

    def __init__(self, n_od: int, rho: int = 10):
        if rho < 1:
            raise ValueError("rho must be >= 1")
        self.rho = rho
        self._routes: list[list[Route]] = [[] for _ in range(n_od)]

    @property
    def n_od(self) -> int:
        return len(self._routes)

    def routes(self, m: int) -> list[Route]:
        return self._routes[m]

    def link_sets(self, m: int) -> set[tuple[str, ...]]:
        return {r.links for r in self._routes[m]}

    def _append(self, route: Route) -> None:
        if route.links in self.link_sets(route.od_index):
            return
        if len(self._routes[route.od_index]) >= self.rho:
            raise RoutingError(f"route set for OD {route.od_index} already at bound {self.rho}")
        self._routes[route.od_index].append(route)

    def _replace(self, m: int, idx: int, route: Route) -> None:
        del self._routes[m][idx]
        self._routes[m].append(route)


def _route_cost(net: Network, tau: np.ndarray, links: tuple[str, ...]) -> float:
    return float(sum(tau[net.link_index[lid]] for lid in links))


def shortest_route(
    net: Network,
    tau: np.ndarray,
    origin: str,
    dest: str,
    banned: frozenset[str] | set[str] = frozenset(),
    prefix: tuple[str, ...] = (),
    prefix_cost: float = 0.0,
) -> tuple[float, tuple[str, ...]] | None:
    """Cheapest link sequence from origin to dest under ``tau``.

    Dijkstra over links; the heap carries the partial link sequence so that
    equal-cost candidates resolve to the lexicographically smallest sequence.
    ``prefix`` forces an initial link sequence (used by the k-shortest scan);
    ``banned`` links are excluded from the spur.  Returns None if unreachable.
    """
    start_node = net.link_by_id[prefix[-1]].to_node if prefix else origin
    heap: list[tuple[float, tuple[str, ...]]] = []
    blocked = set(banned)
    blocked.update(prefix)
    for lid in net.out_links.get(start_node, ()):
        if lid in blocked:
            continue
        heapq.heappush(heap, (prefix_cost + tau[net.link_index[lid]], (lid,)))
    settled: set[str] = set()
    while heap:
        cost, path = heapq.heappop(heap)
        lid = path[-1]
        if lid in settled:
            continue
        settled.add(lid)
        link = net.link_by_id[lid]
        if link.to_node == dest:
            return cost, prefix + path
        for nxt in net.out_links.get(link.to_node, ()):
            if nxt in settled or nxt in blocked:
                continue
            heapq.heappush(heap, (cost + tau[net.link_index[nxt]], path + (nxt,)))
    return None


def iter_routes_by_cost(
    net: Network,
    tau: np.ndarray,
    origin: str,
    dest: str,
    limit: int,
):
    """Yield up to ``limit`` link-simple routes in non-decreasing cost order.

    Yen's algorithm with :func:`shortest_route` as the spur search; ties
    follow the same lexicographic order as the base search.
    """
    best = shortest_route(net, tau, origin, dest)
    if best is None:
        return
    yield best
    accepted: list[tuple[str, ...]] = [best[1]]
    seen: set[tuple[str, ...]] = {best[1]}
    candidates: list[tuple[float, tuple[str, ...]]] = []
    while len(accepted) < limit:
        base = accepted[-1]
        for i in range(len(base)):
            root = base[:i]
            banned = {p[i] for p in accepted if len(p) > i and p[:i] == root}
            root_cost = _route_cost(net, tau, root)
            res = shortest_route(
                net, tau, origin, dest,
                banned=banned, prefix=root, prefix_cost=root_cost,
            )
            if res is not None and res[1] not in seen:
                seen.add(res[1])
                heapq.heappush(candidates, res)
        if not candidates:
            return
        nxt = heapq.heappop(candidates)
        accepted.append(nxt[1])
        yield nxt


def init_shortest_paths(net: Network, tau: np.ndarray, rho: int = 10) -> RouteDb:
    """Seed the database with the single cheapest route per OD pair."""
    db = RouteDb(net.n_od, rho=rho)
    for m, (o, d) in enumerate(net.od_pairs):
        res = shortest_route(net, tau, o, d)
        if res is None:
            raise RoutingError(f"OD pair ({o!r}, {d!r}) is unreachable")
        db._append(Route(od_index=m, links=res[1]))
    return db


def add_best_new_route(
    db: RouteDb,
    net: Network,
    tau: np.ndarray,
    m: int,
    scan_limit: int | None = None,
) -> RouteDb:
    """Add the cheapest route for OD ``m`` not yet stored, bounded by rho.

    Scans candidates in cost order up to ``scan_limit`` (default 2*rho).
    When the set is full, the candidate replaces the costliest stored route
    only if it is strictly cheaper under the current ``tau``.
    """
    limit = scan_limit if scan_limit is not None else 2 * db.rho
    existing = db.link_sets(m)
    o, d = net.od_pairs[m]
    candidate: tuple[float, tuple[str, ...]] | None = None
    for cost, links in iter_routes_by_cost(net, tau, o, d, limit):
        if links not in existing:
            candidate = (cost, links)
            break
    if candidate is None:
        return db
    cost, links = candidate
    stored = db.routes(m)
    if len(stored) < db.rho:
        db._append(Route(od_index=m, links=links))
        return db
    costs = [_route_cost(net, tau, r.links) for r in stored]
    worst = max(range(len(stored)), key=lambda j: (costs[j], j))
    if cost < costs[worst]:
        db._replace(m, worst, Route(od_index=m, links=links))
    return db


def route_costs(route: Route, net: Network, tau: np.ndarray) -> RouteCosts:
    """Total route cost plus prefix cost to each instrumented link's entry."""
    theta_ik: dict[int, float] = {}
    prefix = 0.0
    for lid in route.links:
        k = net.sensor_index.get(lid)
        if k is not None:
            theta_ik[k] = prefix
        prefix += tau[net.link_index[lid]]
    return RouteCosts(theta_i=prefix, theta_ik=theta_ik)


def all_route_costs(db: RouteDb, net: Network, tau: np.ndarray) -> list[list[RouteCosts]]:
    """Recompute costs for every stored route under the current ``tau``."""
    return [[route_costs(r, net, tau) for r in db.routes(m)] for m in range(db.n_od)]


def export_route_db(db: RouteDb, net: Network, path: str) -> None:
    """Debug snapshot: per OD pair, each route's link-id sequence."""
    doc = {
        "od_pairs": [
            {
                "origin": net.od_pairs[m][0],
                "destination": net.od_pairs[m][1],
                "routes": [list(r.links) for r in db.routes(m)],
            }
            for m in range(db.n_od)
        ]
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
