"""Deterministic mesoscopic link-queue simulator.

Each link is a point queue: vehicles traverse it in free-flow time (whole
steps, rounded up), then wait in a FIFO exit queue whose discharge is
capacity-limited and gated by the downstream signal.  A sensor records a
vehicle when it ENTERS an instrumented link.  The full simulator state at a
frame boundary serializes to a versioned document so that a split run
reproduces an unbroken one bit for bit.

Per step, in order: scheduled departures join their first link's entry
backlog; vehicles reaching the end of a link complete (final link) or join
its exit queue; exit queues discharge into downstream links; entry backlogs
inject into their links.  Both discharge and inflow budgets accrue at the
saturation rate with at most one step's worth banked.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .network import Network, free_flow_times
from .sampler import VehiclePlan

STATE_FORMAT = "odcal-state-1"


class SimulationError(Exception):
    pass


@dataclass
class SimConfig:
    step: float = 1.0  # seconds
    saturation_flow: float = 0.5  # veh/s per lane
    jam_density: float = 0.145  # veh/m per lane

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.saturation_flow <= 0:
            raise ValueError("saturation_flow must be positive")
        if self.jam_density <= 0:
            raise ValueError("jam_density must be positive")


@dataclass(frozen=True)
class VehicleState:
    """One in-network vehicle at a frame boundary."""

    vid: int
    od_index: int
    route: tuple[str, ...]
    pos: int  # index of current (or, when waiting, first) link in route
    phase: str  # "waiting" | "running" | "queued"
    steps_to_ready: int  # running only: steps until the link end is reached
    link_elapsed: int  # steps spent on the current link so far
    trip_elapsed: int  # steps since scheduled departure
    entered_elapsed: int  # steps since first link entry; -1 if never entered


@dataclass
class FrameState:
    """Serialized simulator state at a frame boundary."""

    clock: int  # global step count at the boundary
    next_vehicle_id: int
    tau: dict[str, float]  # last-known link travel times (seconds)
    vehicles: list[VehicleState] = field(default_factory=list)
    entry_queues: dict[str, list[int]] = field(default_factory=dict)
    exit_queues: dict[str, list[int]] = field(default_factory=dict)
    discharge_acc: dict[str, float] = field(default_factory=dict)
    inflow_acc: dict[str, float] = field(default_factory=dict)

    def occupancy(self) -> dict[str, int]:
        occ: dict[str, int] = {}
        for v in self.vehicles:
            if v.phase in ("running", "queued"):
                lid = v.route[v.pos]
                occ[lid] = occ.get(lid, 0) + 1
        return occ


@dataclass(frozen=True)
class TripRecord:
    vid: int
    od_index: int
    links: tuple[str, ...]
    depart: int  # global step of scheduled departure
    entered: int  # global step of first link entry (-1 if never)
    arrived: int  # global step of arrival


@dataclass
class SimResult:
    counts: np.ndarray  # per-sensor entries within the frame
    tau: np.ndarray  # per-link mean experienced travel time (seconds)
    completed: list[TripRecord]
    carryover: FrameState
    mean_speed: float  # m/s
    injected: int
    initial_carryover: int


class _Veh:
    __slots__ = (
        "vid", "od_index", "route", "links_idx", "pos",
        "depart", "entered", "link_entry",
    )

    def __init__(self, vid, od_index, route, links_idx, depart):
        self.vid = vid
        self.od_index = od_index
        self.route = route
        self.links_idx = links_idx
        self.pos = 0
        self.depart = depart
        self.entered = -1
        self.link_entry = -1


def empty_state(net: Network, nu: np.ndarray | None = None) -> FrameState:
    """Cold-start state: no vehicles, free-flow travel times."""
    if nu is None:
        nu = free_flow_times(net)
    return FrameState(
        clock=0,
        next_vehicle_id=0,
        tau={l.id: float(t) for l, t in zip(net.links, nu)},
    )


class _Sim:
    def __init__(self, net: Network, cfg: SimConfig, initial: FrameState):
        self.net = net
        self.cfg = cfg
        self.clock0 = initial.clock
        n = net.n_links
        step = cfg.step
        self.ff_steps = [
            max(1, math.ceil(l.free_flow_time / step - 1e-12)) for l in net.links
        ]
        self.length = [l.length for l in net.links]
        rate = np.array(
            [cfg.saturation_flow * l.lanes * step for l in net.links], dtype=float
        )
        self.rate = rate
        self.cap = np.ceil(rate)
        self.jam_cap = [
            max(1, int(cfg.jam_density * l.length * l.lanes)) for l in net.links
        ]
        self.sensor_of = [net.sensor_index.get(l.id, -1) for l in net.links]
        # Signal gate per link at its downstream node: (cycle, offset, start, end).
        self.gate: list[tuple[int, int, int, int] | None] = []
        for l in net.links:
            node = net.node_by_id[l.to_node]
            if node.signal_spec is None:
                self.gate.append(None)
            else:
                spec = node.signal_spec
                start, end = spec.green_window(net.link_approach(l))
                self.gate.append((spec.cycle, spec.offset, start, end))

        self.occupancy = [0] * n
        self.on_net = 0
        self.entry_waiting = 0
        self.entry_q: list[deque[_Veh]] = [deque() for _ in range(n)]
        self.exit_q: list[deque[_Veh]] = [deque() for _ in range(n)]
        self.entry_active: set[int] = set()
        self.exit_active: set[int] = set()
        self.ready: dict[int, list[_Veh]] = {}
        self.counts = np.zeros(net.n_sensors, dtype=np.int64)
        self.tau_sum = [0.0] * n
        self.tau_cnt = [0] * n
        self.meters = 0.0
        self.veh_steps = 0
        self.completed: list[TripRecord] = []
        self.next_vid = initial.next_vehicle_id
        self.prev_tau = np.array(
            [initial.tau.get(l.id, l.free_flow_time) for l in net.links], dtype=float
        )

        def _acc(saved: dict[str, float]) -> np.ndarray:
            if not saved:
                return self.cap.copy()  # full budget at cold start
            return np.array(
                [saved.get(l.id, c) for l, c in zip(net.links, self.cap)], dtype=float
            )

        self.disch_acc = _acc(initial.discharge_acc)
        self.inflow_acc = _acc(initial.inflow_acc)
        if initial.vehicles:
            self._restore(initial)

    def _link_idx(self, lid: str) -> int:
        idx = self.net.link_index.get(lid)
        if idx is None:
            raise SimulationError(f"plan references unknown link {lid!r}")
        return idx

    def _restore(self, state: FrameState) -> None:
        by_vid: dict[int, _Veh] = {}
        for vs in state.vehicles:
            links_idx = tuple(self._link_idx(lid) for lid in vs.route)
            veh = _Veh(vs.vid, vs.od_index, vs.route, links_idx, 0)
            veh.pos = vs.pos
            veh.depart = self.clock0 - vs.trip_elapsed
            veh.entered = (
                self.clock0 - vs.entered_elapsed if vs.entered_elapsed >= 0 else -1
            )
            veh.link_entry = self.clock0 - vs.link_elapsed
            by_vid[vs.vid] = veh
            if vs.phase == "running":
                li = links_idx[vs.pos]
                self.occupancy[li] += 1
                self.on_net += 1
                self.ready.setdefault(self.clock0 + vs.steps_to_ready, []).append(veh)
            elif vs.phase == "queued":
                li = links_idx[vs.pos]
                self.occupancy[li] += 1
                self.on_net += 1
            elif vs.phase != "waiting":
                raise SimulationError(f"unknown vehicle phase {vs.phase!r}")
        for lid, vids in state.exit_queues.items():
            li = self._link_idx(lid)
            self.exit_q[li] = deque(by_vid[v] for v in vids)
            if vids:
                self.exit_active.add(li)
        for lid, vids in state.entry_queues.items():
            li = self._link_idx(lid)
            self.entry_q[li] = deque(by_vid[v] for v in vids)
            if vids:
                self.entry_active.add(li)
                self.entry_waiting += len(vids)

    def _green(self, li: int, g: int) -> bool:
        gate = self.gate[li]
        if gate is None:
            return True
        cycle, offset, start, end = gate
        second = int(g * self.cfg.step)
        phase = (second + offset) % cycle
        if start <= end:
            return start <= phase < end
        return phase >= start or phase < end

    def _exit_link(self, veh: _Veh, li: int, g: int) -> None:
        self.occupancy[li] -= 1
        self.on_net -= 1
        self.tau_sum[li] += g - veh.link_entry
        self.tau_cnt[li] += 1
        self.meters += self.length[li]

    def _enter_link(self, veh: _Veh, li: int, g: int) -> None:
        self.occupancy[li] += 1
        self.on_net += 1
        veh.link_entry = g
        k = self.sensor_of[li]
        if k >= 0:
            self.counts[k] += 1
        self.ready.setdefault(g + self.ff_steps[li], []).append(veh)

    def run(self, plans: list[VehiclePlan], steps: int) -> None:
        departures: dict[int, list[_Veh]] = {}
        for plan in plans:
            if not (0 <= plan.depart < steps):
                raise SimulationError(
                    f"departure {plan.depart} outside frame of {steps} steps"
                )
            links_idx = tuple(self._link_idx(lid) for lid in plan.route.links)
            veh = _Veh(
                self.next_vid, plan.route.od_index, plan.route.links,
                links_idx, self.clock0 + plan.depart,
            )
            self.next_vid += 1
            departures.setdefault(plan.depart, []).append(veh)

        for u in range(steps):
            g = self.clock0 + u
            np.minimum(self.disch_acc + self.rate, self.cap, out=self.disch_acc)
            np.minimum(self.inflow_acc + self.rate, self.cap, out=self.inflow_acc)

            for veh in departures.pop(u, ()):
                li = veh.links_idx[0]
                self.entry_q[li].append(veh)
                self.entry_active.add(li)
                self.entry_waiting += 1

            for veh in self.ready.pop(g, ()):
                li = veh.links_idx[veh.pos]
                if veh.pos == len(veh.links_idx) - 1:
                    self._exit_link(veh, li, g)
                    self.completed.append(
                        TripRecord(
                            vid=veh.vid, od_index=veh.od_index, links=veh.route,
                            depart=veh.depart, entered=veh.entered, arrived=g,
                        )
                    )
                else:
                    self.exit_q[li].append(veh)
                    self.exit_active.add(li)

            for li in sorted(self.exit_active):
                q = self.exit_q[li]
                if not q or not self._green(li, g):
                    continue
                while q and self.disch_acc[li] >= 1.0:
                    veh = q[0]
                    nli = veh.links_idx[veh.pos + 1]
                    if self.occupancy[nli] >= self.jam_cap[nli]:
                        break
                    if self.inflow_acc[nli] < 1.0:
                        break
                    q.popleft()
                    self.disch_acc[li] -= 1.0
                    self.inflow_acc[nli] -= 1.0
                    self._exit_link(veh, li, g)
                    veh.pos += 1
                    self._enter_link(veh, nli, g)
                if not q:
                    self.exit_active.discard(li)

            for li in sorted(self.entry_active):
                q = self.entry_q[li]
                while q and self.occupancy[li] < self.jam_cap[li] and self.inflow_acc[li] >= 1.0:
                    veh = q.popleft()
                    self.entry_waiting -= 1
                    self.inflow_acc[li] -= 1.0
                    veh.entered = g
                    self._enter_link(veh, li, g)
                if not q:
                    self.entry_active.discard(li)

            # Door-to-door accounting: vehicles still waiting to enter count
            # toward time in system, so the mean speed reflects demand pressure.
            self.veh_steps += self.on_net + self.entry_waiting

    def snapshot(self, end_clock: int, tau: np.ndarray) -> FrameState:
        vehicles: list[VehicleState] = []

        def _record(veh: _Veh, phase: str, steps_to_ready: int = 0) -> VehicleState:
            return VehicleState(
                vid=veh.vid,
                od_index=veh.od_index,
                route=veh.route,
                pos=veh.pos,
                phase=phase,
                steps_to_ready=steps_to_ready,
                link_elapsed=end_clock - veh.link_entry if veh.link_entry >= 0 else 0,
                trip_elapsed=end_clock - veh.depart,
                entered_elapsed=end_clock - veh.entered if veh.entered >= 0 else -1,
            )

        for key in sorted(self.ready):
            for veh in self.ready[key]:
                vehicles.append(_record(veh, "running", key - end_clock))
        exit_queues: dict[str, list[int]] = {}
        for li in sorted(self.exit_active):
            q = self.exit_q[li]
            if q:
                exit_queues[self.net.links[li].id] = [v.vid for v in q]
                vehicles.extend(_record(v, "queued") for v in q)
        entry_queues: dict[str, list[int]] = {}
        for li in sorted(self.entry_active):
            q = self.entry_q[li]
            if q:
                entry_queues[self.net.links[li].id] = [v.vid for v in q]
                vehicles.extend(_record(v, "waiting") for v in q)

        return FrameState(
            clock=end_clock,
            next_vehicle_id=self.next_vid,
            tau={l.id: float(t) for l, t in zip(self.net.links, tau)},
            vehicles=vehicles,
            entry_queues=entry_queues,
            exit_queues=exit_queues,
            discharge_acc={
                l.id: float(a) for l, a in zip(self.net.links, self.disch_acc)
            },
            inflow_acc={
                l.id: float(a) for l, a in zip(self.net.links, self.inflow_acc)
            },
        )


def simulate_frame(
    net: Network,
    plans: list[VehiclePlan],
    initial: FrameState | None,
    cfg: SimConfig,
    delta: float,
) -> SimResult:
    """Run one frame of ``delta`` seconds and return counts, travel times,
    completed trips, and the carryover state.

    Links with no exiting vehicle keep their previous travel time (free-flow
    at cold start).  Plans are injected in list order; identical inputs give
    a bit-identical result.
    """
    steps = delta / cfg.step
    if abs(steps - round(steps)) > 1e-9:
        raise SimulationError("delta must be a whole number of steps")
    steps = int(round(steps))
    if initial is None:
        initial = empty_state(net)
    sim = _Sim(net, cfg, initial)
    initial_carryover = len(initial.vehicles)
    sim.run(plans, steps)

    tau = np.empty(net.n_links)
    for i in range(net.n_links):
        if sim.tau_cnt[i] > 0:
            tau[i] = sim.tau_sum[i] / sim.tau_cnt[i] * cfg.step
        else:
            tau[i] = sim.prev_tau[i]

    end_clock = initial.clock + steps
    carryover = sim.snapshot(end_clock, tau)

    if initial_carryover + len(plans) != len(sim.completed) + len(carryover.vehicles):
        raise SimulationError("vehicle conservation violated")

    if sim.veh_steps > 0:
        mean_speed = sim.meters / (sim.veh_steps * cfg.step)
    else:
        mean_speed = float(np.mean([l.speed_limit for l in net.links]))

    return SimResult(
        counts=sim.counts,
        tau=tau,
        completed=sim.completed,
        carryover=carryover,
        mean_speed=mean_speed,
        injected=len(plans),
        initial_carryover=initial_carryover,
    )


def save_state(result: SimResult) -> FrameState:
    """State to feed into the next frame's ``simulate_frame``."""
    return result.carryover


def expected_carryover_hits(state: FrameState, net: Network) -> np.ndarray:
    """Sensor hits the carried-over vehicles will still cause.

    Each vehicle's remaining path is deterministic, so the expectation is an
    exact integer count: one hit per instrumented link still to be entered.
    """
    hits = np.zeros(net.n_sensors, dtype=np.int64)
    for v in state.vehicles:
        start = v.pos if v.phase == "waiting" else v.pos + 1
        for lid in v.route[start:]:
            k = net.sensor_index.get(lid)
            if k is not None:
                hits[k] += 1
    return hits


def _state_doc(state: FrameState) -> dict:
    return {
        "format": STATE_FORMAT,
        "clock": state.clock,
        "next_vehicle_id": state.next_vehicle_id,
        "tau": {k: float(v) for k, v in state.tau.items()},
        "vehicles": [
            {
                "vid": v.vid,
                "od_index": v.od_index,
                "route": list(v.route),
                "pos": v.pos,
                "phase": v.phase,
                "steps_to_ready": v.steps_to_ready,
                "link_elapsed": v.link_elapsed,
                "trip_elapsed": v.trip_elapsed,
                "entered_elapsed": v.entered_elapsed,
            }
            for v in state.vehicles
        ],
        "entry_queues": state.entry_queues,
        "exit_queues": state.exit_queues,
        "discharge_acc": state.discharge_acc,
        "inflow_acc": state.inflow_acc,
        "occupancy": state.occupancy(),
    }


def dump_state(state: FrameState, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(_state_doc(state), fh, indent=1)
        fh.write("\n")


def load_state(path: str) -> FrameState:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != STATE_FORMAT:
        raise SimulationError(
            f"{path}: expected format {STATE_FORMAT!r}, got {doc.get('format')!r}"
        )
    return FrameState(
        clock=int(doc["clock"]),
        next_vehicle_id=int(doc["next_vehicle_id"]),
        tau={k: float(v) for k, v in doc["tau"].items()},
        vehicles=[
            VehicleState(
                vid=int(v["vid"]),
                od_index=int(v["od_index"]),
                route=tuple(v["route"]),
                pos=int(v["pos"]),
                phase=v["phase"],
                steps_to_ready=int(v["steps_to_ready"]),
                link_elapsed=int(v["link_elapsed"]),
                trip_elapsed=int(v["trip_elapsed"]),
                entered_elapsed=int(v["entered_elapsed"]),
            )
            for v in doc["vehicles"]
        ],
        entry_queues={k: [int(x) for x in v] for k, v in doc["entry_queues"].items()},
        exit_queues={k: [int(x) for x in v] for k, v in doc["exit_queues"].items()},
        discharge_acc={k: float(v) for k, v in doc["discharge_acc"].items()},
        inflow_acc={k: float(v) for k, v in doc["inflow_acc"].items()},
    )


def state_digest(state: FrameState) -> str:
    """Stable content hash of a frame state."""
    doc = json.dumps(_state_doc(state), sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()
