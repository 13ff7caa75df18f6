"""Bounded-variable least squares for the stacked calibration system.

Active-set solver in the Stark-Parker style: repeatedly solve the
unconstrained least-squares problem on the free variables (via the normal
equations), clamp bound violations with an interpolated step, and release
bound variables whose KKT multiplier says the objective improves inward.
Releases happen in blocks for speed, falling back to one-at-a-time when a
block pass stops reducing the worst violation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

# Up to this many columns the Gram matrix is materialized densely.
_DENSE_GRAM_LIMIT = 4000


class BvlsError(Exception):
    pass


@dataclass
class StackedSystem:
    """Least-squares system ``min ||a_prime @ x - b_tilde||`` with box bounds."""

    a_prime: sp.spmatrix | np.ndarray
    b_tilde: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.b_tilde = np.asarray(self.b_tilde, dtype=float)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        m, n = self.a_prime.shape
        if self.b_tilde.shape != (m,):
            raise BvlsError("b_tilde length does not match a_prime rows")
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise BvlsError("bound vectors must match a_prime columns")
        if np.any(self.lower > self.upper):
            raise BvlsError("lower bound exceeds upper bound")

    @classmethod
    def from_calibration(
        cls,
        alpha: sp.spmatrix,
        lam: float,
        counts: np.ndarray,
        seed: np.ndarray,
        lower: np.ndarray | None = None,
        upper: np.ndarray | None = None,
        u_factor: float = 10.0,
        u_floor: float = 1.0,
    ) -> "StackedSystem":
        """Stack the sensor block on top of the prior block ``lam * I``.

        ``alpha`` is the (|W|, q) assignment matrix; the stacked matrix maps
        OD demand to (sensor counts, weighted prior) residuals.  The identity
        block stays sparse.
        """
        if lam <= 0:
            raise BvlsError("lam must be positive")
        counts = np.asarray(counts, dtype=float)
        seed = np.asarray(seed, dtype=float)
        n = alpha.shape[0]
        sensor_block = alpha.T.tocsr()
        a_prime = sp.vstack(
            [sensor_block, lam * sp.identity(n, format="csr")], format="csr"
        )
        b_tilde = np.concatenate([counts, lam * seed])
        if lower is None:
            lower = np.zeros(n)
        if upper is None:
            upper = u_factor * np.maximum(seed, u_floor)
        return cls(a_prime=a_prime, b_tilde=b_tilde, lower=lower, upper=upper)


@dataclass
class BvlsResult:
    x: np.ndarray
    cost: float  # ||a_prime @ x - b_tilde||_2
    converged: bool
    iterations: int


class _Normal:
    """Normal-equation workspace G = A'^T A', h = A'^T b."""

    def __init__(self, a, b):
        n = a.shape[1]
        if sp.issparse(a):
            gram = (a.T @ a).tocsc()
            self.dense = n <= _DENSE_GRAM_LIMIT
            self.g = gram.toarray() if self.dense else gram
        else:
            self.g = np.asarray(a, dtype=float).T @ a
            self.dense = True
        self.h = np.asarray(a.T @ b).ravel()

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.g @ x).ravel() - self.h

    def solve_free(self, free: np.ndarray, active: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Minimize over x[free] with x[active] held at their bounds."""
        if self.dense:
            rhs = self.h[free]
            if active.size:
                rhs = rhs - self.g[np.ix_(free, active)] @ x[active]
            g_ff = self.g[np.ix_(free, free)]
            try:
                c, low = scipy.linalg.cho_factor(g_ff, check_finite=False)
                return scipy.linalg.cho_solve((c, low), rhs, check_finite=False)
            except scipy.linalg.LinAlgError:
                return np.linalg.lstsq(g_ff, rhs, rcond=None)[0]
        rhs = self.h[free]
        if active.size:
            rhs = rhs - np.asarray(self.g[free][:, active] @ x[active]).ravel()
        g_ff = self.g[free][:, free].tocsc()
        try:
            return spla.spsolve(g_ff, rhs)
        except RuntimeError:
            return spla.lsqr(g_ff, rhs)[0]


def solve(system: StackedSystem, tol: float = 1e-8, max_iter: int | None = None) -> BvlsResult:
    """Minimize ``||A'x - b||_2`` subject to ``lower <= x <= upper``.

    Returns the optimum when the KKT conditions hold within ``tol`` on the
    residual gradient, otherwise the best iterate found with
    ``converged=False``.
    """
    a = system.a_prime
    lb, ub = system.lower, system.upper
    n = a.shape[1]
    if max_iter is None:
        max_iter = max(3 * n, 30)

    normal = _Normal(a, system.b_tilde)

    x = np.clip(np.zeros(n), lb, ub)
    on_bound = np.zeros(n, dtype=int)
    on_bound[x <= lb] = -1
    up = x >= ub
    on_bound[up] = 1
    x[up] = ub[up]
    pinned = lb == ub

    def _sets():
        return np.flatnonzero(on_bound == 0), np.flatnonzero(on_bound != 0)

    def _feasibility_loop() -> None:
        # Move toward the free least-squares point, clamping the first bound
        # crossed, until the free solution is interior.
        while True:
            free, active = _sets()
            if free.size == 0:
                return
            z = normal.solve_free(free, active, x)
            lbv = z < lb[free]
            ubv = z > ub[free]
            if not (lbv.any() or ubv.any()):
                x[free] = z
                return
            step = z - x[free]
            alphas = np.full(free.size, np.inf)
            with np.errstate(divide="ignore", invalid="ignore"):
                alphas[lbv] = (lb[free[lbv]] - x[free[lbv]]) / step[lbv]
                alphas[ubv] = (ub[free[ubv]] - x[free[ubv]]) / step[ubv]
            alphas = np.where(np.isfinite(alphas), alphas, np.inf)
            alpha = float(max(np.min(alphas), 0.0))
            x[free] = x[free] + alpha * step
            hit = np.flatnonzero(alphas <= alpha + 1e-15)
            for j in hit:
                idx = free[j]
                if lbv[j]:
                    x[idx] = lb[idx]
                    on_bound[idx] = -1
                else:
                    x[idx] = ub[idx]
                    on_bound[idx] = 1

    # Warm start: solve on all free variables, clamp violators outright.
    free, active = _sets()
    while free.size > 0:
        z = normal.solve_free(free, active, x)
        lbv = z < lb[free]
        ubv = z > ub[free]
        x[free] = np.clip(z, lb[free], ub[free])
        if not (lbv.any() or ubv.any()):
            break
        on_bound[free[lbv]] = -1
        on_bound[free[ubv]] = 1
        free, active = _sets()

    iterations = 0
    converged = False
    block_release = True
    last_worst = np.inf
    while iterations < max_iter:
        iterations += 1
        grad = normal.gradient(x)
        viol = np.where(
            on_bound == 0,
            np.abs(grad),
            np.where(on_bound == -1, -grad, grad),
        )
        viol[pinned] = -np.inf
        worst = float(viol.max(initial=-np.inf))
        if worst <= tol:
            converged = True
            break
        # A block pass that stopped shrinking the violation can cycle; from
        # then on release only the worst variable per pass.
        if block_release and worst >= last_worst:
            block_release = False
        last_worst = worst

        bound_viol = (on_bound != 0) & (viol > tol)
        if block_release and np.count_nonzero(bound_viol) > 1:
            on_bound[bound_viol] = 0
        else:
            candidates = np.where(on_bound != 0, viol, -np.inf)
            j = int(np.argmax(candidates))
            if candidates[j] <= tol:
                # Violation sits on free variables only; re-solving handles it.
                pass
            else:
                on_bound[j] = 0
        _feasibility_loop()

    cost = float(np.linalg.norm(np.asarray(a @ x).ravel() - system.b_tilde))
    return BvlsResult(x=x, cost=cost, converged=converged, iterations=iterations)


def kkt_max_violation(system: StackedSystem, x: np.ndarray, bound_tol: float = 1e-9) -> float:
    """Largest KKT violation of ``x`` for the bounded least-squares problem.

    Components within ``bound_tol`` of a bound are treated as active there.
    Infeasible points return +inf.
    """
    x = np.asarray(x, dtype=float)
    lb, ub = system.lower, system.upper
    if np.any(x < lb - bound_tol) or np.any(x > ub + bound_tol):
        return float("inf")
    resid = np.asarray(system.a_prime @ x).ravel() - system.b_tilde
    grad = np.asarray(system.a_prime.T @ resid).ravel()
    at_lower = x <= lb + bound_tol
    at_upper = x >= ub - bound_tol
    viol = np.abs(grad.copy())
    viol[at_lower] = np.maximum(-grad[at_lower], 0.0)
    viol[at_upper] = np.maximum(grad[at_upper], 0.0)
    viol[at_lower & at_upper] = 0.0
    return float(viol.max(initial=0.0))


def dump_system(system: StackedSystem, path: str) -> None:
    """Write the stacked system in a matrix-market-style text layout."""
    a = sp.coo_matrix(system.a_prime)
    with open(path, "w") as fh:
        fh.write("%%stacked-system coordinate real general\n")
        fh.write(f"{a.shape[0]} {a.shape[1]} {a.nnz}\n")
        for i, j, v in zip(a.row, a.col, a.data):
            fh.write(f"{i + 1} {j + 1} {v!r}\n")
        fh.write("%b_tilde\n")
        for v in system.b_tilde:
            fh.write(f"{v!r}\n")
        fh.write("%lower\n")
        for v in system.lower:
            fh.write(f"{v!r}\n")
        fh.write("%upper\n")
        for v in system.upper:
            fh.write(f"{v!r}\n")
