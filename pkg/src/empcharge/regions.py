"""Offline explicit solution of the parametric QP and online point location.

For a fixed optimal active set A the KKT conditions are linear in theta, so
the optimizer is affine, z*(theta) = K theta + g, valid on the polyhedral
critical region where the multipliers stay nonnegative and the inactive
constraints stay satisfied.  Exploration walks region to region by stepping
a small distance past each facet and solving the QP there.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .mpqp import MpqpProblem, THETA_DIM
from .qp import DenseQp, chebyshev_center, remove_redundant, solve_qp

__all__ = [
    "CriticalRegion",
    "ExplicitSolution",
    "DEFAULT_THETA_BOX",
    "DegenerateActiveSet",
    "InfeasibleAtTheta0",
    "ExplorationStalled",
    "region_for",
    "explore",
    "locate",
    "coverage_check",
    "export_table",
    "rounded",
    "import_table",
]

# rows: Vb, Vs, I, r, u_prev
DEFAULT_THETA_BOX = np.array([
    [0.0, 1.0],
    [0.0, 1.0],
    [0.0, 3.0],
    [0.2, 1.0],
    [-3.0, 3.0],
])

_EPS_STEP = 1e-6
_MIN_RADIUS = 1e-9


class DegenerateActiveSet(Exception):
    pass


class InfeasibleAtTheta0(Exception):
    pass


class ExplorationStalled(Exception):
    def __init__(self, theta: np.ndarray, msg: str):
        super().__init__(f"{msg} at theta={theta}")
        self.theta = theta


@dataclass(frozen=True)
class CriticalRegion:
    E: np.ndarray            # p x 5, region {theta: E theta <= e}
    e: np.ndarray
    K: np.ndarray            # Nu x 5
    g: np.ndarray            # Nu
    active_set: tuple[int, ...]
    segment_index: int
    interior: np.ndarray | None = None
    radius: float = 0.0

    def stored_reals(self) -> int:
        return self.E.size + self.e.size + self.K.size + self.g.size


@dataclass
class ExplicitSolution:
    regions: list[CriticalRegion]
    segment_index: int
    theta_box: np.ndarray
    Nu: int
    # membership slack used by locate(); tables stored with rounded
    # entries carry a matching coarser tolerance so that points on a
    # (shifted) facet still land in an adjacent region
    locate_tol: float = 1e-9

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    @property
    def stored_reals(self) -> int:
        return sum(r.stored_reals() for r in self.regions)


def box_halfspaces(theta_box: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = theta_box.shape[0]
    G = np.vstack([np.eye(n), -np.eye(n)])
    w = np.concatenate([theta_box[:, 1], -theta_box[:, 0]])
    return G, w


def law_for_active_set(problem: MpqpProblem, active_set,
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray,
                                  np.ndarray]:
    """Affine optimizer and multipliers for a candidate active set.

    Returns (K, g, Lam, lam_c) with z*(theta) = K theta + g and
    lambda(theta) = Lam theta + lam_c for the active rows.
    """
    Sig, F = problem.Sigma, problem.F
    Sig_inv = np.linalg.inv(Sig)
    A = list(active_set)
    if not A:
        return -Sig_inv @ F, np.zeros(Sig.shape[0]), \
            np.zeros((0, THETA_DIM)), np.zeros(0)
    GA = problem.G[A]
    SA = problem.S[A]
    WA = problem.W[A]
    M = GA @ Sig_inv @ GA.T
    try:
        M_inv = np.linalg.inv(M)
    except np.linalg.LinAlgError as exc:
        raise DegenerateActiveSet(str(active_set)) from exc
    if np.linalg.cond(M) > 1e10:
        raise DegenerateActiveSet(str(active_set))
    Lam = -M_inv @ (SA + GA @ Sig_inv @ F)
    lam_c = -M_inv @ WA
    K = -Sig_inv @ (F + GA.T @ Lam)
    g = -Sig_inv @ GA.T @ lam_c
    return K, g, Lam, lam_c


def region_for(problem: MpqpProblem, theta0: np.ndarray,
               theta_box: np.ndarray | None = None) -> CriticalRegion:
    """Build the critical region around theta0 from the QP's active set."""
    theta_box = DEFAULT_THETA_BOX if theta_box is None else theta_box
    qp = DenseQp(problem.Sigma, problem.F @ theta0, problem.G,
                 problem.S @ theta0 + problem.W)
    sol = solve_qp(qp)
    if sol.status != "optimal":
        raise InfeasibleAtTheta0(str(theta0))
    K, g, Lam, lam_c = law_for_active_set(problem, sol.active_set)

    rows_E, rows_e = [], []
    # multipliers stay nonnegative: -(Lam theta) <= lam_c
    for i in range(Lam.shape[0]):
        rows_E.append(-Lam[i])
        rows_e.append(lam_c[i])
    # inactive constraints stay satisfied: (G K - S) theta <= W - G g.
    # Rows of G that are zero depend on theta only and carve the feasible
    # parameter set itself.
    inactive = [i for i in range(problem.G.shape[0])
                if i not in sol.active_set]
    GK = problem.G[inactive] @ K - problem.S[inactive]
    Ge = problem.W[inactive] - problem.G[inactive] @ g
    rows_E.extend(GK)
    rows_e.extend(Ge)
    Gb, wb = box_halfspaces(theta_box)
    rows_E.extend(Gb)
    rows_e.extend(wb)

    E, e, _ = remove_redundant(np.array(rows_E), np.array(rows_e))
    inner = chebyshev_center(E, e)
    if inner is None or inner[1] <= _MIN_RADIUS:
        raise DegenerateActiveSet(
            f"region around {theta0} has empty interior")
    return CriticalRegion(E=E, e=e, K=K, g=g, active_set=sol.active_set,
                          segment_index=problem.segment_index,
                          interior=inner[0], radius=inner[1])


def _facet_center(E: np.ndarray, e: np.ndarray, i: int,
                  ) -> np.ndarray | None:
    """Chebyshev center of facet i (largest ball within the facet)."""
    n = E.shape[1]
    rows = [j for j in range(E.shape[0]) if j != i]
    norms = np.linalg.norm(E[rows], axis=1)
    A_ub = np.hstack([E[rows], norms[:, None]])
    c = np.zeros(n + 1)
    c[-1] = -1.0
    res = linprog(c, A_ub=A_ub, b_ub=e[rows],
                  A_eq=np.hstack([E[i:i + 1], [[0.0]]]), b_eq=[e[i]],
                  bounds=[(-1e6, 1e6)] * n + [(0.0, 1e6)], method="highs")
    if not res.success or res.x[n] <= 1e-10:
        return None
    return res.x[:n]


def _seed_theta(problem: MpqpProblem, theta_box: np.ndarray,
                ) -> np.ndarray | None:
    """Interior point of the joint feasible set, projected onto theta."""
    Nu = problem.Sigma.shape[0]
    Gj = np.hstack([-problem.S, problem.G])
    Gb, wb = box_halfspaces(theta_box)
    Gj = np.vstack([Gj, np.hstack([Gb, np.zeros((Gb.shape[0], Nu))])])
    wj = np.concatenate([problem.W, wb])
    out = chebyshev_center(Gj, wj)
    if out is None or out[1] <= _MIN_RADIUS:
        return None
    return out[0][:THETA_DIM]


def explore(problem: MpqpProblem, theta_box: np.ndarray | None = None,
            seed: int = 0, max_regions: int = 500) -> ExplicitSolution:
    """Facet-stepping enumeration of all critical regions in theta_box."""
    theta_box = DEFAULT_THETA_BOX if theta_box is None else theta_box
    rng = np.random.default_rng(seed)
    Nu = problem.Sigma.shape[0]
    solution = ExplicitSolution(regions=[], segment_index=
                                problem.segment_index,
                                theta_box=theta_box, Nu=Nu)
    theta0 = _seed_theta(problem, theta_box)
    if theta0 is None:
        return solution

    seen: set[tuple[int, ...]] = set()
    frontier: list[np.ndarray] = [theta0]
    while frontier:
        theta = frontier.pop()
        if not _in_box(theta, theta_box, 1e-12):
            continue
        if locate(solution, theta) is not None:
            continue
        region = None
        probe = theta
        for attempt in range(6):
            try:
                region = region_for(problem, probe, theta_box)
                break
            except InfeasibleAtTheta0:
                region = None
                break
            except DegenerateActiveSet:
                probe = theta + 1e-7 * rng.standard_normal(THETA_DIM)
        if region is None:
            continue
        if region.active_set in seen:
            continue
        seen.add(region.active_set)
        solution.regions.append(region)
        if len(solution.regions) > max_regions:
            raise ExplorationStalled(theta, "region budget exhausted")
        for i in range(region.E.shape[0]):
            center = _facet_center(region.E, region.e, i)
            if center is None:
                continue
            step = region.E[i] / np.linalg.norm(region.E[i])
            frontier.append(center + _EPS_STEP * step)
    return solution


def _in_box(theta: np.ndarray, theta_box: np.ndarray, tol: float) -> bool:
    return bool(np.all(theta >= theta_box[:, 0] - tol)
                and np.all(theta <= theta_box[:, 1] + tol))


def locate(solution: ExplicitSolution, theta: np.ndarray,
           tol: float | None = None) -> int | None:
    """Sequential search; first region containing theta wins."""
    if tol is None:
        tol = solution.locate_tol
    for idx, r in enumerate(solution.regions):
        if np.all(r.E @ theta <= r.e + tol):
            return idx
    return None


def coverage_check(solution: ExplicitSolution, problem: MpqpProblem,
                   n_samples: int = 100_000, seed: int = 1,
                   tol: float = 1e-9) -> float:
    """Fraction of random feasible theta in the box covered by some region.

    Sampling is vectorized over the stacked region halfspaces; only points
    that miss every region get an LP feasibility test (a miss may simply be
    an infeasible parameter).
    """
    rng = np.random.default_rng(seed)
    box = solution.theta_box
    thetas = rng.uniform(box[:, 0], box[:, 1], size=(n_samples, THETA_DIM))
    covered = np.zeros(n_samples, dtype=bool)
    for r in solution.regions:
        hit = np.all(thetas @ r.E.T <= r.e + tol, axis=1)
        covered |= hit
    n_covered = int(covered.sum())
    n_feas_missed = 0
    from .qp import lp_feasible
    for theta in thetas[~covered]:
        ok, _ = lp_feasible(problem.G,
                            problem.S @ theta + problem.W, tol=1e-12)
        if ok:
            n_feas_missed += 1
    total = n_covered + n_feas_missed
    return 1.0 if total == 0 else n_covered / total


# ---------------------------------------------------------------------------
# persistence

_MAGIC = b"EMPCTB01"


def rounded(solution: ExplicitSolution, decimals: int | None,
            ) -> ExplicitSolution:
    """Copy of a solution with entries rounded to the given decimals and a
    matching locate tolerance; decimals=None returns the input unchanged."""
    if decimals is None:
        return solution
    regs = [CriticalRegion(E=np.round(r.E, decimals),
                           e=np.round(r.e, decimals),
                           K=np.round(r.K, decimals),
                           g=np.round(r.g, decimals),
                           active_set=r.active_set,
                           segment_index=r.segment_index)
            for r in solution.regions]
    # worst-case facet shift: |dE . theta| + |de| over the theta box
    span = np.abs(solution.theta_box).max(axis=1).sum()
    tol = 0.5 * 10.0 ** (-decimals) * (span + 1.0)
    return ExplicitSolution(regions=regs,
                            segment_index=solution.segment_index,
                            theta_box=solution.theta_box, Nu=solution.Nu,
                            locate_tol=max(solution.locate_tol, tol))


def _atomic_write(path, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def export_table(solution: ExplicitSolution, path, fmt: str = "json",
                 round_decimals: int | None = None) -> None:
    """Persist a region table; fmt is "json" or "bin".

    Round-tripping through either format reproduces the table bit-exactly
    (floats go through repr in JSON, raw IEEE754 in binary).
    """
    sol = rounded(solution, round_decimals)
    if fmt == "json":
        doc = {
            "format": "empc-table",
            "version": 1,
            "segment_index": sol.segment_index,
            "Nu": sol.Nu,
            "theta_dim": THETA_DIM,
            "locate_tol": sol.locate_tol,
            "theta_box": sol.theta_box.tolist(),
            "regions": [
                {
                    "E": r.E.tolist(),
                    "e": r.e.tolist(),
                    "K": r.K.tolist(),
                    "g": r.g.tolist(),
                    "active_set": list(r.active_set),
                }
                for r in sol.regions
            ],
        }
        _atomic_write(path, json.dumps(doc, indent=1).encode())
    elif fmt == "bin":
        parts = [_MAGIC,
                 struct.pack("<iiii", sol.segment_index, sol.Nu, THETA_DIM,
                             len(sol.regions)),
                 struct.pack("<d", sol.locate_tol),
                 np.ascontiguousarray(sol.theta_box, dtype="<f8").tobytes()]
        for r in sol.regions:
            parts.append(struct.pack("<ii", r.E.shape[0],
                                     len(r.active_set)))
            parts.append(np.asarray(r.active_set,
                                    dtype="<i4").tobytes())
            for arr in (r.E, r.e, r.K, r.g):
                parts.append(np.ascontiguousarray(arr,
                                                  dtype="<f8").tobytes())
        _atomic_write(path, b"".join(parts))
    else:
        raise ValueError(f"unknown table format: {fmt}")


def import_table(path) -> ExplicitSolution:
    with open(path, "rb") as f:
        head = f.read(8)
        f.seek(0)
        raw = f.read()
    if head == _MAGIC:
        return _import_binary(raw)
    doc = json.loads(raw.decode())
    if doc.get("format") != "empc-table" or doc.get("version") != 1:
        raise ValueError(f"{path}: not a version-1 region table")
    Nu = doc["Nu"]
    regs = [CriticalRegion(E=np.array(r["E"], float).reshape(-1, THETA_DIM),
                           e=np.array(r["e"], float),
                           K=np.array(r["K"], float).reshape(Nu, THETA_DIM),
                           g=np.array(r["g"], float),
                           active_set=tuple(r["active_set"]),
                           segment_index=doc["segment_index"])
            for r in doc["regions"]]
    return ExplicitSolution(regions=regs,
                            segment_index=doc["segment_index"],
                            theta_box=np.array(doc["theta_box"], float),
                            Nu=Nu,
                            locate_tol=float(doc.get("locate_tol", 1e-9)))


def _import_binary(raw: bytes) -> ExplicitSolution:
    off = 8
    seg, Nu, tdim, n_reg = struct.unpack_from("<iiii", raw, off)
    off += 16
    if tdim != THETA_DIM:
        raise ValueError("unexpected parameter dimension in table file")
    (locate_tol,) = struct.unpack_from("<d", raw, off)
    off += 8
    theta_box = np.frombuffer(raw, "<f8", THETA_DIM * 2, off)
    theta_box = theta_box.reshape(THETA_DIM, 2).copy()
    off += THETA_DIM * 2 * 8
    regs = []
    for _ in range(n_reg):
        p, n_act = struct.unpack_from("<ii", raw, off)
        off += 8
        act = tuple(int(v) for v in np.frombuffer(raw, "<i4", n_act, off))
        off += 4 * n_act
        sizes = [p * THETA_DIM, p, Nu * THETA_DIM, Nu]
        arrs = []
        for sz in sizes:
            arrs.append(np.frombuffer(raw, "<f8", sz, off).copy())
            off += sz * 8
        regs.append(CriticalRegion(E=arrs[0].reshape(p, THETA_DIM),
                                   e=arrs[1],
                                   K=arrs[2].reshape(Nu, THETA_DIM),
                                   g=arrs[3], active_set=act,
                                   segment_index=seg))
    return ExplicitSolution(regions=regs, segment_index=seg,
                            theta_box=theta_box, Nu=Nu,
                            locate_tol=locate_tol)
