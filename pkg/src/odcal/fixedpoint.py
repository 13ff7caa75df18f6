"""Steffensen acceleration of the link travel-time fixed point.

The map under iteration is the clamped supply response ``F``: travel times
in, travel times out, bounded to ``[nu, d * nu]``.  Aitken's delta-squared
extrapolation is applied componentwise, falling back to plain iteration on
components with a vanishing second difference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class FpConfig:
    d: float = 5.0
    iteration_number: int = 10
    denom_epsilon: float = 1e-9

    def __post_init__(self):
        if self.d <= 1:
            raise ValueError("clamp multiplier d must be > 1")
        if self.iteration_number < 1:
            raise ValueError("iteration_number must be >= 1")


def clamp_map(tau_raw: np.ndarray, nu: np.ndarray, d: float) -> np.ndarray:
    """Clamp travel times into ``[nu, d * nu]`` componentwise."""
    return np.minimum(np.maximum(np.asarray(tau_raw, dtype=float), nu), d * nu)


def relative_change(tau_prev: np.ndarray, tau: np.ndarray) -> float:
    """Relative L2 change in percent; 0 when both vectors are zero."""
    norm_prev = float(np.linalg.norm(tau_prev))
    diff = float(np.linalg.norm(np.asarray(tau_prev) - np.asarray(tau)))
    if norm_prev == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return diff / norm_prev * 100.0


def steffensen_step(
    tau0: np.ndarray,
    tau1: np.ndarray,
    tau2: np.ndarray,
    nu: np.ndarray,
    cfg: FpConfig,
) -> np.ndarray:
    """One Aitken extrapolation from two successive map evaluations.

    ``tau1`` and ``tau2`` must be the clamped map applied once and twice to
    ``tau0``.  Components whose denominator ``tau2 - 2*tau1 + tau0`` falls
    below ``denom_epsilon`` use plain iteration (``tau1``) instead.  The
    result is clamped back into the travel-time box.
    """
    tau0 = np.asarray(tau0, dtype=float)
    tau1 = np.asarray(tau1, dtype=float)
    tau2 = np.asarray(tau2, dtype=float)
    denom = tau2 - 2.0 * tau1 + tau0
    safe = np.abs(denom) >= cfg.denom_epsilon
    out = tau1.copy()
    num = (tau1 - tau0) ** 2
    out[safe] = tau0[safe] - num[safe] / denom[safe]
    return clamp_map(out, nu, cfg.d)


def run(
    f_bar: Callable[[np.ndarray], np.ndarray],
    tau0: np.ndarray,
    nu: np.ndarray,
    cfg: FpConfig,
) -> tuple[np.ndarray, list[float]]:
    """Iterate the accelerated fixed point for ``cfg.iteration_number`` rounds.

    Each round evaluates the map twice, extrapolates, clamps, and tracks the
    relative change against the round's starting point.  Returns the iterate
    with the smallest relative change seen, plus the running-minimum error
    trace (one entry per round, non-increasing).
    """
    tau0 = np.asarray(tau0, dtype=float)
    min_error = float("inf")
    tau_star = tau0
    trace: list[float] = []
    for _ in range(cfg.iteration_number):
        tau1 = np.asarray(f_bar(tau0), dtype=float)
        tau2 = np.asarray(f_bar(tau1), dtype=float)
        tau = steffensen_step(tau0, tau1, tau2, nu, cfg)
        error = relative_change(tau0, tau)
        if error < min_error:
            min_error = error
            tau_star = tau
        trace.append(min_error)
        tau0 = tau
    return tau_star, trace
