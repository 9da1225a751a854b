"""Dense small-scale convex QP solver and polyhedral LP utilities.

The QP solver is a primal active-set method: it tracks a working set of
constraints treated as equalities, moves along equality-constrained Newton
steps, and adds/removes constraints with deterministic lowest-index
tie-breaking.  Problems here are tiny (a handful of variables, a few dozen
rows), so dense factorizations are fine.

LP subproblems (phase-1 feasibility, Chebyshev centers, redundancy removal)
go through scipy's HiGHS linprog.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

__all__ = [
    "DenseQp",
    "QpSolution",
    "QpError",
    "solve_qp",
    "lp_feasible",
    "chebyshev_center",
    "remove_redundant",
]

FEAS_TOL = 1e-8
MULT_TOL = 1e-9


class QpError(Exception):
    pass


@dataclass(frozen=True)
class DenseQp:
    """min 0.5 z'Hz + f'z  s.t.  G z <= w."""

    H: np.ndarray
    f: np.ndarray
    G: np.ndarray
    w: np.ndarray

    def __post_init__(self) -> None:
        if not np.allclose(self.H, self.H.T, atol=1e-10):
            raise QpError("H must be symmetric")


@dataclass(frozen=True)
class QpSolution:
    z_star: np.ndarray | None
    active_set: tuple[int, ...]
    multipliers: np.ndarray
    status: str  # "optimal" or "infeasible"


def _feasible_start(G: np.ndarray, w: np.ndarray, candidates,
                    tol: float) -> np.ndarray | None:
    for z in candidates:
        if z is not None and np.all(G @ z <= w + tol):
            return np.asarray(z, dtype=float)
    n = G.shape[1]
    res = linprog(np.zeros(n), A_ub=G, b_ub=w, bounds=[(None, None)] * n,
                  method="highs")
    if not res.success:
        return None
    return res.x


def solve_qp(qp: DenseQp, tol: float = FEAS_TOL,
             z0: np.ndarray | None = None) -> QpSolution:
    """Solve the QP; H must be positive definite.

    Rows of G that are (numerically) zero cannot become active: they are
    either trivially satisfied or make the problem infeasible outright.
    """
    H, f, G, w = qp.H, np.asarray(qp.f, float), qp.G, np.asarray(qp.w, float)
    n = H.shape[0]
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise QpError("H is not positive definite") from exc
    z_free = -np.linalg.solve(H, f)

    m = 0 if G is None else G.shape[0]
    if m == 0:
        return QpSolution(z_free, (), np.zeros(0), "optimal")
    G = np.asarray(G, float).reshape(m, n)

    row_norm = np.linalg.norm(G, axis=1)
    nonzero = row_norm > 1e-12
    if np.any(w[~nonzero] < -tol):
        return QpSolution(None, (), np.zeros(0), "infeasible")
    Gi, wi = G[nonzero], w[nonzero]
    idx_map = np.flatnonzero(nonzero)

    if Gi.shape[0] == 0:
        return QpSolution(z_free, (), np.zeros(0), "optimal")

    z = _feasible_start(Gi, wi, [z0, z_free, np.zeros(n)], tol)
    if z is None:
        return QpSolution(None, (), np.zeros(0), "infeasible")

    work: list[int] = []
    for _ in range(200 + 20 * m):
        grad = H @ z + f
        if work:
            A = Gi[work]
            K = np.block([[H, A.T],
                          [A, np.zeros((len(work), len(work)))]])
            rhs = np.concatenate([-grad, np.zeros(len(work))])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError as exc:
                raise QpError("singular KKT system") from exc
            p, lam = sol[:n], sol[n:]
        else:
            p, lam = np.linalg.solve(H, -grad), np.zeros(0)

        if np.linalg.norm(p) <= 1e-11:
            if len(lam) == 0 or lam.min() >= -MULT_TOL:
                order = np.argsort(work)
                act = tuple(int(idx_map[work[i]]) for i in order)
                mult = np.maximum(lam[order], 0.0) if len(lam) else np.zeros(0)
                return QpSolution(z, act, mult, "optimal")
            # drop the most negative multiplier, lowest index on ties
            worst = min(range(len(work)),
                        key=lambda i: (lam[i], work[i]))
            work.pop(worst)
            continue

        # ratio test over constraints not in the working set
        alpha, blocker = 1.0, None
        gp = Gi @ p
        slack = wi - Gi @ z
        for i in range(Gi.shape[0]):
            if i in work or gp[i] <= 1e-12:
                continue
            a = slack[i] / gp[i]
            if a < alpha - 1e-12:
                alpha, blocker = a, i
        z = z + max(alpha, 0.0) * p
        if blocker is not None:
            work.append(blocker)
    raise QpError("active-set iteration limit exceeded")


def chebyshev_center(G: np.ndarray, w: np.ndarray, box: float = 1e6,
                     ) -> tuple[np.ndarray, float] | None:
    """Largest inscribed ball of {z: Gz <= w}; None when empty.

    The ball radius is capped and z is boxed so the LP stays bounded for
    unbounded polyhedra.
    """
    G = np.atleast_2d(np.asarray(G, float))
    w = np.asarray(w, float)
    m, n = G.shape
    norms = np.linalg.norm(G, axis=1)
    keep = norms > 1e-12
    if np.any(w[~keep] < 0):
        return None
    G, w, norms = G[keep], w[keep], norms[keep]
    if G.shape[0] == 0:
        return np.zeros(n), box
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A = np.hstack([G, norms[:, None]])
    bounds = [(-box, box)] * n + [(0.0, box)]
    res = linprog(c, A_ub=A, b_ub=w, bounds=bounds, method="highs")
    if not res.success:
        return None
    return res.x[:n], float(res.x[n])


def lp_feasible(G: np.ndarray, w: np.ndarray, tol: float = 1e-9,
                ) -> tuple[bool, np.ndarray | None]:
    """Strict-interior feasibility via the Chebyshev-center LP.

    Returns (True, witness) when the polyhedron has nonempty interior,
    (False, None) otherwise.
    """
    out = chebyshev_center(G, w)
    if out is None:
        return False, None
    center, radius = out
    if radius <= tol:
        return False, None
    return True, center


def remove_redundant(G: np.ndarray, w: np.ndarray, tol: float = 1e-9,
                     ) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Minimal representation of a nonempty polyhedron {Gz <= w}.

    Row i is redundant when max G_i z over the remaining rows stays at or
    below w_i.  The max LP adds the row G_i z <= w_i + 1 so it is bounded
    even for unbounded polyhedra.
    """
    G = np.atleast_2d(np.asarray(G, float))
    w = np.asarray(w, float)
    m, n = G.shape
    norms = np.linalg.norm(G, axis=1)

    kept = [i for i in range(m) if norms[i] > 1e-12]
    # drop exact duplicates (same normalized row, same or looser bound)
    uniq: list[int] = []
    for i in kept:
        gi, wi_ = G[i] / norms[i], w[i] / norms[i]
        dup = False
        for j in uniq:
            if (np.linalg.norm(G[j] / norms[j] - gi) < 1e-12
                    and w[j] / norms[j] <= wi_ + 1e-12):
                dup = True
                break
        if not dup:
            uniq.append(i)
    kept = uniq

    i_pos = 0
    while i_pos < len(kept):
        i = kept[i_pos]
        others = [j for j in kept if j != i]
        A = np.vstack([G[others], G[i:i + 1]])
        b = np.concatenate([w[others], [w[i] + 1.0]])
        res = linprog(-G[i], A_ub=A, b_ub=b,
                      bounds=[(None, None)] * n, method="highs")
        if res.success and -res.fun <= w[i] + tol:
            kept.pop(i_pos)
        else:
            i_pos += 1
    return G[kept], w[kept], kept
