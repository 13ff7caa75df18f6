"""Demand-to-sensor mapping: logit route choice, crossing probabilities,
assignment matrix, and seed-OD scaling."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .network import Network
from .routing import Route, RouteCosts, RouteDb

log = logging.getLogger(__name__)


class AssignmentError(Exception):
    pass


@dataclass
class NodVector:
    """Normalized trip distribution over OD pairs (entries sum to 1)."""

    eta: np.ndarray

    @classmethod
    def from_weights(cls, weights, renormalize: bool = True) -> "NodVector":
        eta = np.asarray(weights, dtype=float).copy()
        if eta.ndim != 1 or eta.size == 0:
            raise AssignmentError("NOD weights must be a nonempty vector")
        if np.any(eta < 0):
            raise AssignmentError("NOD weights must be nonnegative")
        total = float(eta.sum())
        if total <= 0:
            raise AssignmentError("NOD weights sum to zero")
        if abs(total - 1.0) > 1e-9:
            if not renormalize:
                raise AssignmentError(f"NOD weights sum to {total}, not 1")
            log.warning("NOD weights sum to %.6g; renormalizing", total)
            eta /= total
        return cls(eta=eta)


@dataclass
class AssignmentMatrix:
    """Sensor-crossing probabilities per OD pair plus the producing route probabilities.

    ``alpha[m, k]`` is the probability that a trip of OD pair m crosses
    sensor k within the frame.  ``route_probs[m]`` and ``routes[m]`` snapshot
    the logit distribution over the route set used to build the matrix.
    """

    alpha: sp.csr_matrix  # (|W|, q)
    route_probs: list[np.ndarray]
    routes: list[list[Route]]

    def expected_counts(self, x: np.ndarray) -> np.ndarray:
        """Expected sensor counts for OD demand ``x`` (length q)."""
        return np.asarray(self.alpha.T @ x).ravel()


def logit_probs(thetas, gamma: float) -> np.ndarray:
    """Logit route-choice probabilities ``exp(g*theta_i) / sum exp(g*theta_s)``.

    Computed with max-subtraction so large cost magnitudes cannot overflow.
    """
    thetas = np.asarray(thetas, dtype=float)
    if thetas.size == 0:
        raise AssignmentError("empty route set")
    if not np.all(np.isfinite(thetas)):
        raise AssignmentError("route costs must be finite")
    z = gamma * thetas
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def crossing_prob(delta: float, theta_ik: float) -> float:
    """Probability that a uniformly departing trip reaches the sensor in-frame."""
    if delta <= 0:
        raise AssignmentError("delta must be positive")
    if theta_ik < delta:
        return (delta - theta_ik) / delta
    return 0.0


def build_assignment(
    db: RouteDb,
    costs: list[list[RouteCosts]],
    gamma: float,
    delta: float,
    n_sensors: int,
) -> AssignmentMatrix:
    """Assemble ``alpha[m, k] = sum_i P_ik * P_i`` over each OD route set."""
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    route_probs: list[np.ndarray] = []
    routes: list[list[Route]] = []
    for m in range(db.n_od):
        route_set = db.routes(m)
        if not route_set:
            raise AssignmentError(f"OD pair {m} has no routes")
        thetas = [c.theta_i for c in costs[m]]
        probs = logit_probs(thetas, gamma)
        route_probs.append(probs)
        routes.append(list(route_set))
        acc: dict[int, float] = {}
        for p_i, cost in zip(probs, costs[m]):
            for k, theta in cost.theta_ik.items():
                p_ik = crossing_prob(delta, theta)
                if p_ik > 0.0:
                    acc[k] = acc.get(k, 0.0) + p_i * p_ik
        for k, v in acc.items():
            rows.append(m)
            cols.append(k)
            vals.append(min(max(v, 0.0), 1.0))
    alpha = sp.csr_matrix(
        (vals, (rows, cols)), shape=(db.n_od, n_sensors), dtype=float
    )
    return AssignmentMatrix(alpha=alpha, route_probs=route_probs, routes=routes)


def seed_od(nod: NodVector, a: AssignmentMatrix, counts: np.ndarray) -> np.ndarray:
    """Scale the normalized distribution to a seed OD vector.

    The scale is total observed counts over the expected sensor hits of one
    trip drawn from the normalized distribution.
    """
    counts = np.asarray(counts, dtype=float)
    hits_per_od = np.asarray(a.alpha.sum(axis=1)).ravel()
    s = float(nod.eta @ hits_per_od)
    if s <= 0.0:
        raise AssignmentError("no demand can reach any sensor (expected hits = 0)")
    sigma = float(counts.sum()) / s
    return sigma * nod.eta


def load_nod(path: str, net: Network) -> NodVector:
    """Read ``origin_node,destination_node,weight`` rows; unlisted pairs get 0."""
    weights = np.zeros(net.n_od)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for row in reader:
            if not row or row[0].startswith("#"):
                continue
            if row[0] == "origin_node":  # header
                continue
            o, d, w = row[0].strip(), row[1].strip(), float(row[2])
            m = net.od_index.get((o, d))
            if m is None:
                raise AssignmentError(f"{path}: unknown OD pair ({o!r}, {d!r})")
            weights[m] = w
    return NodVector.from_weights(weights)


def save_nod(net: Network, eta: np.ndarray, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["origin_node", "destination_node", "weight"])
        for (o, d), w in zip(net.od_pairs, eta):
            writer.writerow([o, d, repr(float(w))])
