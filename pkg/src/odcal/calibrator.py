"""Per-frame orchestration of the calibration loop.

One round recomputes route costs from the current travel times, rebuilds the
assignment matrix, scales the seed OD vector, solves the bounded
least-squares problem, samples and simulates R replicates in parallel, picks
the replicate that best matches the observed counts, and grows the route
database.  Rounds are paired as the two map evaluations of one Steffensen
iteration on the travel-time vector; the extrapolated vector seeds the next
round.  A frame exits on its iteration cap or when the count error of a
round drops to the exit threshold, and hands the best round's simulator
state and travel times to the next frame.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import bvls
from .assignment import (
    AssignmentMatrix,
    NodVector,
    build_assignment,
    seed_od,
)
from .fixedpoint import FpConfig, clamp_map, relative_change, steffensen_step
from .mesosim import (
    FrameState,
    SimConfig,
    SimResult,
    empty_state,
    expected_carryover_hits,
    simulate_frame,
)
from .metrics import ErrorRecord
from .network import Network, free_flow_times
from .routing import RouteDb, add_best_new_route, all_route_costs, init_shortest_paths
from .sampler import RouteFlow, route_flows, sample_plans

log = logging.getLogger(__name__)


class CalibrationError(Exception):
    pass


@dataclass
class CalibConfig:
    delta: int = 3600  # frame length, seconds
    lam: float = 1.0  # confidence weight on the seed OD block
    gamma: float = -0.01  # logit cost sensitivity, 1/s
    rho: int = 10  # max routes per OD pair
    replicates: int = 8
    max_iterations: int = 40  # calibrate+simulate rounds per frame
    epsilon_exit: float = 10.0  # percent
    base_seed: int = 0
    u_factor: float = 10.0
    u_floor: float = 1.0
    jobs: int = 1
    fp: FpConfig = field(default_factory=FpConfig)
    sim: SimConfig = field(default_factory=SimConfig)

    def __post_init__(self):
        if self.delta <= 0 or self.replicates < 1 or self.max_iterations < 1:
            raise ValueError("delta, replicates, and max_iterations must be positive")
        if self.rho < 1 or self.epsilon_exit < 0:
            raise ValueError("rho must be >= 1 and epsilon_exit >= 0")


@dataclass
class FrameOutput:
    frame_index: int
    od_estimate: np.ndarray
    seed: np.ndarray
    flows: list[RouteFlow]
    best_result: SimResult
    records: list[ErrorRecord]
    best_iteration: int  # 1-based round index of the reported output
    state: FrameState
    corrected_counts: np.ndarray
    estimated_counts: np.ndarray


@dataclass
class _Round:
    x_star: np.ndarray
    seed: np.ndarray
    assignment: AssignmentMatrix
    flows: list[RouteFlow]
    best_result: SimResult
    tau_out: np.ndarray
    record: ErrorRecord


def _safe_rel(y: np.ndarray, y_star: np.ndarray) -> float:
    """Relative error that treats an all-zero reference as exact-or-missed."""
    return relative_change(np.asarray(y, float), np.asarray(y_star, float))


def select_best(results: list[SimResult], counts: np.ndarray) -> int:
    """Replicate with the smallest count error; ties go to the lowest index."""
    if not results:
        raise CalibrationError("no simulation results to select from")
    errors = [_safe_rel(counts, r.counts) for r in results]
    return int(np.argmin(errors))


def correct_counts(raw_counts_next: np.ndarray, carryover_hits: np.ndarray) -> np.ndarray:
    """Remove carryover trips' expected hits, clamping at zero."""
    return np.maximum(
        np.asarray(raw_counts_next, dtype=float) - np.asarray(carryover_hits, dtype=float),
        0.0,
    )


def _replicate_seed(base_seed: int, frame: int, round_idx: int, replicate: int) -> int:
    payload = struct.pack("<qqq", base_seed, frame, round_idx)
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return (int.from_bytes(digest, "big") ^ replicate) & 0xFFFFFFFFFFFFFFFF


def _run_replicate(args):
    net, flows, delta, seed, state, sim_cfg = args
    plans = sample_plans(flows, delta, seed)
    return simulate_frame(net, plans, state, sim_cfg, delta)


def _run_round(
    net: Network,
    db: RouteDb,
    nod: NodVector,
    counts: np.ndarray,
    tau_in: np.ndarray,
    nu: np.ndarray,
    initial_state: FrameState,
    cfg: CalibConfig,
    frame_index: int,
    round_idx: int,
    executor: ProcessPoolExecutor | None,
) -> _Round:
    costs = all_route_costs(db, net, tau_in)
    a = build_assignment(db, costs, cfg.gamma, cfg.delta, net.n_sensors)
    seed = seed_od(nod, a, counts)
    system = bvls.StackedSystem.from_calibration(
        a.alpha, cfg.lam, counts, seed,
        u_factor=cfg.u_factor, u_floor=cfg.u_floor,
    )
    solution = bvls.solve(system)
    if not solution.converged:
        log.warning(
            "frame %d round %d: bounded least squares returned an approximate solution",
            frame_index, round_idx,
        )
    x_star = solution.x
    flows = route_flows(x_star, a)

    jobs = [
        (net, flows, cfg.delta,
         _replicate_seed(cfg.base_seed, frame_index, round_idx, r),
         initial_state, cfg.sim)
        for r in range(cfg.replicates)
    ]
    if executor is not None:
        results = list(executor.map(_run_replicate, jobs))
    else:
        results = [_run_replicate(j) for j in jobs]
    best = results[select_best(results, counts)]

    expected = a.expected_counts(x_star)
    tau_out = clamp_map(best.tau, nu, cfg.fp.d)
    record = ErrorRecord(
        iteration=round_idx,
        od_cal_err=_safe_rel(counts, expected),
        cal_to_sim_err=_safe_rel(expected, best.counts),
        iter_err=_safe_rel(counts, best.counts),
        fp_err=relative_change(tau_in, tau_out),
        mean_speed=best.mean_speed,
    )

    for m in range(db.n_od):
        add_best_new_route(db, net, tau_out, m)

    return _Round(
        x_star=x_star, seed=seed, assignment=a, flows=flows,
        best_result=best, tau_out=tau_out, record=record,
    )


def run_frame(
    net: Network,
    db: RouteDb,
    nod: NodVector,
    counts_t: np.ndarray,
    prev_state: FrameState | None,
    prev_tau: np.ndarray | None,
    cfg: CalibConfig,
    frame_index: int = 0,
) -> tuple[FrameOutput, FrameState, np.ndarray, RouteDb]:
    """Calibrate one frame against its (already corrected) sensor counts.

    Returns the best round's output together with the state and travel-time
    vector to carry into the next frame.
    """
    counts = np.asarray(counts_t, dtype=float)
    if counts.shape != (net.n_sensors,):
        raise CalibrationError(
            f"counts length {counts.shape} does not match {net.n_sensors} sensors"
        )
    nu = free_flow_times(net)
    if prev_state is None:
        prev_state = empty_state(net, nu)
    tau = clamp_map(prev_tau, nu, cfg.fp.d) if prev_tau is not None else nu.copy()

    executor = None
    if cfg.jobs > 1:
        executor = ProcessPoolExecutor(max_workers=min(cfg.jobs, cfg.replicates))

    rounds: list[_Round] = []
    try:
        tau0 = tau
        pair: list[np.ndarray] = []
        round_idx = 0
        while round_idx < cfg.max_iterations:
            round_idx += 1
            rnd = _run_round(
                net, db, nod, counts, tau, nu, prev_state, cfg,
                frame_index, round_idx, executor,
            )
            rounds.append(rnd)
            if rnd.record.iter_err <= cfg.epsilon_exit:
                break
            pair.append(rnd.tau_out)
            if len(pair) == 1:
                tau = pair[0]
            else:
                tau = steffensen_step(tau0, pair[0], pair[1], nu, cfg.fp)
                tau0 = tau
                pair = []
    finally:
        if executor is not None:
            executor.shutdown()

    best_idx = int(np.argmin([r.record.iter_err for r in rounds]))
    best = rounds[best_idx]
    output = FrameOutput(
        frame_index=frame_index,
        od_estimate=best.x_star,
        seed=best.seed,
        flows=best.flows,
        best_result=best.best_result,
        records=[r.record for r in rounds],
        best_iteration=best_idx + 1,
        state=best.best_result.carryover,
        corrected_counts=counts,
        estimated_counts=np.asarray(best.best_result.counts, dtype=float),
    )
    return output, best.best_result.carryover, best.tau_out, db


def iter_frames(net: Network, nod: NodVector, count_stream, cfg: CalibConfig):
    """Consume ``(frame_index, raw_counts)`` pairs in order, yielding one
    FrameOutput per frame as soon as it is final.

    Raw counts of frame t are corrected by the expected sensor hits of frame
    t-1's carryover vehicles before calibration.  Frames must arrive as
    0, 1, 2, ...; anything else is a hard error.
    """
    db = init_shortest_paths(net, free_flow_times(net), rho=cfg.rho)
    state: FrameState | None = None
    tau: np.ndarray | None = None
    hits = np.zeros(net.n_sensors)
    expected_frame = 0
    for frame_index, raw in count_stream:
        if frame_index != expected_frame:
            raise CalibrationError(
                f"out-of-order frame {frame_index}, expected {expected_frame}"
            )
        expected_frame += 1
        corrected = correct_counts(np.asarray(raw, dtype=float), hits)
        output, state, tau, db = run_frame(
            net, db, nod, corrected, state, tau, cfg, frame_index=frame_index
        )
        hits = expected_carryover_hits(state, net)
        long_trips = sum(1 for v in state.vehicles if v.trip_elapsed >= cfg.delta)
        if long_trips:
            log.warning(
                "frame %d: %d carried-over trips already span a full frame "
                "(trips are assumed to finish within two frames)",
                frame_index, long_trips,
            )
        yield output


def run_sequence(
    net: Network,
    nod: NodVector,
    count_stream,
    cfg: CalibConfig,
) -> list[FrameOutput]:
    """Run the streaming loop to completion and collect all frame outputs."""
    return list(iter_frames(net, nod, count_stream, cfg))
