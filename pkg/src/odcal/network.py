"""Road-network data model, validation, and synthetic grid generation."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass

import numpy as np

NET_FORMAT = "odcal-net-1"


@dataclass(frozen=True)
class SignalSpec:
    """Fixed-cycle two-phase signal: north-south / east-west green windows.

    Windows are half-open ``[start, end)`` in seconds within the cycle and
    may wrap past the cycle end.
    """

    cycle: int = 60
    offset: int = 0
    ns_green: tuple[int, int] = (0, 30)
    ew_green: tuple[int, int] = (30, 60)

    def green_window(self, approach: str) -> tuple[int, int]:
        return self.ns_green if approach == "ns" else self.ew_green

    def is_green(self, approach: str, second: int) -> bool:
        start, end = self.green_window(approach)
        phase = (second + self.offset) % self.cycle
        if start <= end:
            return start <= phase < end
        return phase >= start or phase < end


@dataclass(frozen=True)
class Node:
    id: str
    x: float
    y: float
    signalized: bool = False
    signal_spec: SignalSpec | None = None


@dataclass(frozen=True)
class Link:
    id: str
    from_node: str
    to_node: str
    length: float  # meters
    lanes: int
    speed_limit: float  # m/s
    has_sensor: bool = False

    @property
    def free_flow_time(self) -> float:
        return self.length / self.speed_limit


class Network:
    """Immutable directed road network with sensor and OD-pair orderings.

    ``sensor_links`` defines the sensor index k, ``od_pairs`` the OD index m.
    The constructor builds lookup tables but performs no validation; call
    :func:`validate` to check invariants.
    """

    def __init__(
        self,
        nodes: list[Node],
        links: list[Link],
        sensor_links: list[str],
        od_pairs: list[tuple[str, str]],
    ):
        self.nodes = list(nodes)
        self.links = list(links)
        self.sensor_links = list(sensor_links)
        self.od_pairs = [(o, d) for o, d in od_pairs]
        self.node_by_id = {n.id: n for n in self.nodes}
        self.link_by_id = {l.id: l for l in self.links}
        self.link_index = {l.id: i for i, l in enumerate(self.links)}
        self.sensor_index = {lid: k for k, lid in enumerate(self.sensor_links)}
        self.od_index = {od: m for m, od in enumerate(self.od_pairs)}
        self.out_links: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for l in self.links:
            if l.from_node in self.out_links:
                self.out_links[l.from_node].append(l.id)

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_sensors(self) -> int:
        return len(self.sensor_links)

    @property
    def n_od(self) -> int:
        return len(self.od_pairs)

    def link_approach(self, link: Link) -> str:
        """Classify a link's approach at its downstream node ("ns" or "ew")."""
        a = self.node_by_id[link.from_node]
        b = self.node_by_id[link.to_node]
        return "ns" if abs(b.y - a.y) >= abs(b.x - a.x) else "ew"


def free_flow_times(net: Network) -> np.ndarray:
    """Per-link free-flow travel times, aligned with ``net.links`` order."""
    return np.array([l.free_flow_time for l in net.links], dtype=float)


def _reachable_from(net: Network, origin: str) -> set[str]:
    seen = {origin}
    frontier = deque([origin])
    while frontier:
        node = frontier.popleft()
        for lid in net.out_links.get(node, ()):
            nxt = net.link_by_id[lid].to_node
            if nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    return seen


def validate(net: Network, allow_self_loops: bool = False) -> list[str]:
    """Check all network invariants; returns one message per violation."""
    violations: list[str] = []

    seen_nodes: set[str] = set()
    for n in net.nodes:
        if n.id in seen_nodes:
            violations.append(f"duplicate node id {n.id!r}")
        seen_nodes.add(n.id)
        if n.signalized != (n.signal_spec is not None):
            violations.append(
                f"node {n.id!r}: signal_spec must be present iff signalized"
            )

    seen_links: set[str] = set()
    for l in net.links:
        if l.id in seen_links:
            violations.append(f"duplicate link id {l.id!r}")
        seen_links.add(l.id)
        for endpoint in (l.from_node, l.to_node):
            if endpoint not in net.node_by_id:
                violations.append(f"link {l.id!r}: unknown node {endpoint!r}")
        if l.from_node == l.to_node and not allow_self_loops:
            violations.append(f"link {l.id!r}: self-loop not allowed")
        if l.length <= 0:
            violations.append(f"link {l.id!r}: length must be > 0")
        if l.lanes < 1:
            violations.append(f"link {l.id!r}: lanes must be >= 1")
        if l.speed_limit <= 0:
            violations.append(f"link {l.id!r}: speed_limit must be > 0")

    seen_sensors: set[str] = set()
    for lid in net.sensor_links:
        if lid not in net.link_by_id:
            violations.append(f"sensor on unknown link {lid!r}")
        if lid in seen_sensors:
            violations.append(f"duplicate sensor link {lid!r}")
        seen_sensors.add(lid)

    reach_cache: dict[str, set[str]] = {}
    for o, d in net.od_pairs:
        missing = [x for x in (o, d) if x not in net.node_by_id]
        if missing:
            for x in missing:
                violations.append(f"od pair ({o!r}, {d!r}): unknown node {x!r}")
            continue
        if o == d:
            violations.append(f"od pair ({o!r}, {d!r}): origin equals destination")
            continue
        if o not in reach_cache:
            reach_cache[o] = _reachable_from(net, o)
        if d not in reach_cache[o]:
            violations.append(f"od pair ({o!r}, {d!r}): destination unreachable")

    return violations


def generate_grid(
    rows: int,
    cols: int,
    link_length: float = 400.0,
    lanes: int = 2,
    speed_limit: float = 13.89,
    sensors_on_all_links: bool = True,
    poi_selector: str = "all_nodes",
    signal_cycle: int = 60,
) -> Network:
    """Build a rows x cols signalized grid with bidirectional link pairs.

    Neighbouring junctions are connected in both directions; every junction
    carries a fixed-cycle two-phase signal with a 50/50 split.  OD pairs are
    all ordered pairs of distinct points of interest.  ``poi_selector``:

    - ``all_nodes``: every junction is a point of interest.
    - ``ring_pattern``: the boundary ring plus an inner ring (inset 3 on
      grids of at least 10x10, shrinking on smaller grids).
    """
    if rows < 2 or cols < 2:
        raise ValueError("grid dimensions must be at least 2x2")
    if poi_selector not in ("all_nodes", "ring_pattern"):
        raise ValueError(f"unknown poi_selector {poi_selector!r}")

    half = signal_cycle // 2
    spec = SignalSpec(
        cycle=signal_cycle,
        offset=0,
        ns_green=(0, half),
        ew_green=(half, signal_cycle),
    )

    nodes = [
        Node(
            id=f"n{r}_{c}",
            x=c * link_length,
            y=r * link_length,
            signalized=True,
            signal_spec=spec,
        )
        for r in range(rows)
        for c in range(cols)
    ]

    links: list[Link] = []

    def _add_pair(u: str, v: str) -> None:
        for a, b in ((u, v), (v, u)):
            links.append(
                Link(
                    id=f"{a}~{b}",
                    from_node=a,
                    to_node=b,
                    length=link_length,
                    lanes=lanes,
                    speed_limit=speed_limit,
                    has_sensor=sensors_on_all_links,
                )
            )

    for r in range(rows):
        for c in range(cols):
            here = f"n{r}_{c}"
            if c + 1 < cols:
                _add_pair(here, f"n{r}_{c + 1}")
            if r + 1 < rows:
                _add_pair(here, f"n{r + 1}_{c}")

    if poi_selector == "all_nodes":
        pois = [n.id for n in nodes]
    else:
        pois = _ring_pois(rows, cols)

    od_pairs = [(o, d) for o in pois for d in pois if o != d]
    sensor_links = [l.id for l in links if l.has_sensor]
    return Network(nodes, links, sensor_links, od_pairs)


def _ring_pois(rows: int, cols: int) -> list[str]:
    # Outer boundary ring plus one inner ring; the inner ring sits 3 nodes
    # in on large grids (giving 48 POIs on 10x10) and shrinks on small ones.
    inset = min(3, (min(rows, cols) - 2) // 2)

    def ring(r0: int, c0: int, r1: int, c1: int) -> list[str]:
        out = []
        for r in range(r0, r1 + 1):
            for c in range(c0, c1 + 1):
                if r in (r0, r1) or c in (c0, c1):
                    out.append(f"n{r}_{c}")
        return out

    pois = ring(0, 0, rows - 1, cols - 1)
    if inset > 0:
        pois += ring(inset, inset, rows - 1 - inset, cols - 1 - inset)
    # preserve row-major order, drop duplicates
    seen: set[str] = set()
    ordered = []
    for p in pois:
        if p not in seen:
            seen.add(p)
            ordered.append(p)
    ordered.sort(key=lambda s: tuple(int(x) for x in s[1:].split("_")))
    return ordered


def save_network(net: Network, path: str) -> None:
    doc = {
        "format": NET_FORMAT,
        "nodes": [
            {
                "id": n.id,
                "x": n.x,
                "y": n.y,
                "signalized": n.signalized,
                "signal_spec": None
                if n.signal_spec is None
                else {
                    "cycle": n.signal_spec.cycle,
                    "offset": n.signal_spec.offset,
                    "ns_green": list(n.signal_spec.ns_green),
                    "ew_green": list(n.signal_spec.ew_green),
                },
            }
            for n in net.nodes
        ],
        "links": [
            {
                "id": l.id,
                "from": l.from_node,
                "to": l.to_node,
                "length": l.length,
                "lanes": l.lanes,
                "speed_limit": l.speed_limit,
                "has_sensor": l.has_sensor,
            }
            for l in net.links
        ],
        "sensor_links": list(net.sensor_links),
        "od_pairs": [list(p) for p in net.od_pairs],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_network(path: str) -> Network:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != NET_FORMAT:
        raise ValueError(f"{path}: expected format {NET_FORMAT!r}, got {doc.get('format')!r}")
    nodes = []
    for nd in doc["nodes"]:
        spec = nd.get("signal_spec")
        nodes.append(
            Node(
                id=nd["id"],
                x=float(nd["x"]),
                y=float(nd["y"]),
                signalized=bool(nd["signalized"]),
                signal_spec=None
                if spec is None
                else SignalSpec(
                    cycle=int(spec["cycle"]),
                    offset=int(spec.get("offset", 0)),
                    ns_green=tuple(spec["ns_green"]),
                    ew_green=tuple(spec["ew_green"]),
                ),
            )
        )
    links = [
        Link(
            id=ld["id"],
            from_node=ld["from"],
            to_node=ld["to"],
            length=float(ld["length"]),
            lanes=int(ld["lanes"]),
            speed_limit=float(ld["speed_limit"]),
            has_sensor=bool(ld["has_sensor"]),
        )
        for ld in doc["links"]
    ]
    return Network(
        nodes,
        links,
        list(doc["sensor_links"]),
        [tuple(p) for p in doc["od_pairs"]],
    )
