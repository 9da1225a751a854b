"""Closed-loop charging: explicit-MPC law, online-QP and relinearized-NMPC
baselines, EKF output feedback, and the simulation loop.

Controller semantics per step, given state x = [Vb, Vs, I], target r and the
previous move u_prev: pick the segment for x.Vs, evaluate the law at
theta = [Vb, Vs, I, r, u_prev] to get du0, and apply

    I_next = clip(u_prev + du0 + I, I_min, I_max).

Because the segment law is linearized at a fixed operating point, a step
whose predicted surface voltage crosses into the next segment can slightly
under-predict terminal voltage.  A switch guard re-evaluates the law of the
segment owning the predicted Vs and keeps the smaller current, preserving
the conservatism of the upper-end R0 choice across switches.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as mdl
from .model import DiscreteModel, NdcParams, NdcState
from .mpqp import MpcConfig, MpqpProblem, assemble_theta, build
from .qp import DenseQp, solve_qp
from .regions import ExplicitSolution, locate
from .segments import SegmentTable, select_segment, _segment

__all__ = [
    "ControllerState",
    "EkfState",
    "StepResult",
    "TraceRow",
    "SimTrace",
    "RunSetup",
    "empc_step",
    "online_mpc_step",
    "nmpc_step",
    "ekf_step",
    "run_closed_loop",
]


@dataclass
class ControllerState:
    u_prev: float = 0.0
    I_applied: float = 0.0
    step_index: int = 0
    last_region: tuple[int, int] | None = None
    fallback_count: int = 0


@dataclass
class StepResult:
    I_next: float
    du_applied: float
    segment: int
    region: int | None
    fallback: bool
    iterations: int = 1


@dataclass
class EkfState:
    x_hat: np.ndarray
    P: np.ndarray
    Q_proc: np.ndarray
    R_meas: float


def default_ekf(x0: np.ndarray) -> EkfState:
    # current is driven by the controller, so its process channel is tiny
    return EkfState(x_hat=np.array(x0, float),
                    P=np.eye(3) * 1e-4,
                    Q_proc=np.diag([1e-6, 1e-6, 1e-12]),
                    R_meas=9e-6)


def _predicted_vs(model: DiscreteModel, x: NdcState, du: float) -> float:
    x1 = model.A_aug @ x.as_array() + model.B_aug.ravel() * du
    return float(x1[1])


def _finish(move_of_segment, model: DiscreteModel, table: SegmentTable,
            ctrl: ControllerState, x: NdcState, theta: np.ndarray,
            I_min: float, I_max: float) -> StepResult:
    """Shared tail of the eMPC/online-QP steps: evaluate the governing
    segment's law, apply the switch guard, saturate, update ctrl."""
    si = select_segment(table, x.Vs)
    du0, region, fallback = move_of_segment(si, theta)
    I_next = float(np.clip(ctrl.u_prev + du0 + x.I, I_min, I_max))
    seg_used = si
    vs1 = _predicted_vs(model, x, I_next - x.I)
    sj = select_segment(table, vs1)
    if sj != si:
        du_b, region_b, fb_b = move_of_segment(sj, theta)
        I_b = float(np.clip(ctrl.u_prev + du_b + x.I, I_min, I_max))
        if I_b < I_next:
            I_next, region, fallback, seg_used = I_b, region_b, fb_b, sj
    du_applied = I_next - x.I
    ctrl.u_prev = du_applied
    ctrl.I_applied = I_next
    ctrl.step_index += 1
    if fallback:
        ctrl.fallback_count += 1
    if region is not None:
        ctrl.last_region = (seg_used, region)
    return StepResult(I_next=I_next, du_applied=du_applied, segment=seg_used,
                      region=region, fallback=fallback)


def empc_step(solutions: list[ExplicitSolution], table: SegmentTable,
              model: DiscreteModel, ctrl: ControllerState, x: NdcState,
              r: float, I_min: float = 0.0, I_max: float = 3.0,
              ) -> StepResult:
    theta = assemble_theta(x, r, ctrl.u_prev)

    def move(si: int, th: np.ndarray):
        idx = locate(solutions[si], th)
        if idx is None:
            return 0.0, None, True
        reg = solutions[si].regions[idx]
        return float(reg.K[0] @ th + reg.g[0]), idx, False

    return _finish(move, model, table, ctrl, x, theta, I_min, I_max)


def online_mpc_step(problems: list[MpqpProblem], table: SegmentTable,
                    model: DiscreteModel, ctrl: ControllerState, x: NdcState,
                    r: float, I_min: float = 0.0, I_max: float = 3.0,
                    ) -> StepResult:
    theta = assemble_theta(x, r, ctrl.u_prev)

    def move(si: int, th: np.ndarray):
        prob = problems[si]
        sol = solve_qp(DenseQp(prob.Sigma, prob.F @ th, prob.G,
                               prob.S @ th + prob.W))
        if sol.status != "optimal":
            return 0.0, None, True
        return float(sol.z_star[0]), None, False

    return _finish(move, model, table, ctrl, x, theta, I_min, I_max)


def nmpc_step(params: NdcParams, model: DiscreteModel, table: SegmentTable,
              cfg: MpcConfig, ctrl: ControllerState, x: NdcState, r: float,
              max_iters: int = 10, I_min: float = 0.0, I_max: float = 3.0,
              ) -> StepResult:
    """Iteratively relinearized MPC: linearize h and R0 at the current
    (then predicted) Vs instead of at fixed table operating points, and
    re-solve until the first move settles."""
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    theta = assemble_theta(x, r, ctrl.u_prev)
    vs_lin = float(np.clip(x.Vs, 0.0, 1.0))
    du0, du_last, fallback, iters = 0.0, None, False, 0
    for it in range(max_iters):
        iters = it + 1
        seg = _segment(params, 0, 0.0, 1.0, vs_lin, table.gamma1)
        prob = build(model, seg, cfg)
        sol = solve_qp(DenseQp(prob.Sigma, prob.F @ theta, prob.G,
                               prob.S @ theta + prob.W))
        if sol.status != "optimal":
            du0, fallback = 0.0, True
            break
        du0 = float(sol.z_star[0])
        if du_last is not None and abs(du0 - du_last) < 1e-6:
            break
        du_last = du0
        I_next_est = float(np.clip(ctrl.u_prev + du0 + x.I, I_min, I_max))
        vs_lin = float(np.clip(_predicted_vs(model, x, I_next_est - x.I),
                               0.0, 1.0))
    I_next = float(np.clip(ctrl.u_prev + du0 + x.I, I_min, I_max))
    du_applied = I_next - x.I
    ctrl.u_prev = du_applied
    ctrl.I_applied = I_next
    ctrl.step_index += 1
    if fallback:
        ctrl.fallback_count += 1
    return StepResult(I_next=I_next, du_applied=du_applied,
                      segment=select_segment(table, x.Vs), region=None,
                      fallback=fallback, iterations=iters)


def ekf_step(params: NdcParams, model: DiscreteModel, ekf: EkfState,
             du_applied: float, V_measured: float) -> EkfState:
    """One predict-update cycle with terminal voltage as the measurement."""
    A, B = model.A_aug, model.B_aug.ravel()
    x_pred = A @ ekf.x_hat + B * du_applied
    P_pred = A @ ekf.P @ A.T + ekf.Q_proc
    vb, vs, i = x_pred
    H = np.array([0.0,
                  float(mdl.ocv_slope(params, vs))
                  + float(mdl.r0_slope(params, vs)) * i,
                  float(mdl.r0(params, vs))])
    V_pred = float(mdl.ocv(params, vs)) + float(mdl.r0(params, vs)) * i
    S = float(H @ P_pred @ H) + ekf.R_meas
    K = P_pred @ H / S
    x_new = x_pred + K * (V_measured - V_pred)
    P_new = (np.eye(3) - np.outer(K, H)) @ P_pred
    P_new = 0.5 * (P_new + P_new.T)
    return EkfState(x_hat=x_new, P=P_new, Q_proc=ekf.Q_proc,
                    R_meas=ekf.R_meas)


@dataclass(frozen=True)
class TraceRow:
    step: int
    time_s: float
    Vb: float
    Vs: float
    I: float
    V: float
    SoC: float
    eta: float
    segment: int
    region: int
    du: float
    solver_time_ns: int
    fallback_flag: int


CSV_HEADER = ("step,time_s,Vb,Vs,I,V,SoC,eta,segment,region,du,"
              "solver_time_ns,fallback_flag")


@dataclass
class SimTrace:
    rows: list[TraceRow]
    completed: bool
    fallback_count: int = 0

    @property
    def charging_steps(self) -> int:
        return len(self.rows)

    def soc_series(self) -> np.ndarray:
        return np.array([r.SoC for r in self.rows])

    def to_csv(self, path) -> None:
        lines = [CSV_HEADER]
        for r in self.rows:
            lines.append(
                f"{r.step},{r.time_s!r},{r.Vb!r},{r.Vs!r},{r.I!r},{r.V!r},"
                f"{r.SoC!r},{r.eta!r},{r.segment},{r.region},{r.du!r},"
                f"{r.solver_time_ns},{r.fallback_flag}")
        data = ("\n".join(lines) + "\n").encode()
        from .regions import _atomic_write
        _atomic_write(path, data)


@dataclass
class RunSetup:
    params: NdcParams
    model: DiscreteModel
    table: SegmentTable
    cfg: MpcConfig
    controller: str = "empc"            # empc | qp | nmpc
    feedback: str = "state"             # state | ekf
    solutions: list[ExplicitSolution] | None = None
    problems: list[MpqpProblem] | None = None
    soc_start: float = 0.2
    soc_target: float = 0.9
    step_budget: int = 150
    stop_at_target: bool = True
    completion_slack: float = 0.005
    noise: bool = False
    seed: int = 0
    process_cov: float = 1e-6
    meas_var: float = 9e-6
    nmpc_max_iters: int = 10


def run_closed_loop(setup: RunSetup) -> SimTrace:
    """Simulate plant + (optional) observer + controller until the SoC
    target is met or the step budget runs out."""
    if setup.controller == "empc" and not setup.solutions:
        raise ValueError("empc controller needs explicit solutions")
    if setup.controller == "qp" and not setup.problems:
        raise ValueError("qp controller needs condensed problems")
    p, model, table, cfg = (setup.params, setup.model, setup.table,
                            setup.cfg)
    rng = np.random.default_rng(setup.seed)
    x = NdcState(Vb=setup.soc_start, Vs=setup.soc_start, I=0.0)
    ctrl = ControllerState()
    ekf = default_ekf(x.as_array()) if setup.feedback == "ekf" else None
    du_prev = 0.0
    rows: list[TraceRow] = []
    completed = False
    for k in range(setup.step_budget):
        V_true = mdl.terminal_voltage(p, x)
        if setup.feedback == "ekf":
            V_meas = V_true
            if setup.noise:
                V_meas += rng.normal(0.0, np.sqrt(setup.meas_var))
            ekf = ekf_step(p, model, ekf, du_prev, V_meas)
            x_ctrl = NdcState(*ekf.x_hat)
        else:
            x_ctrl = x

        t0 = time.perf_counter_ns()
        if setup.controller == "empc":
            res = empc_step(setup.solutions, table, model, ctrl, x_ctrl,
                            setup.soc_target)
        elif setup.controller == "qp":
            res = online_mpc_step(setup.problems, table, model, ctrl,
                                  x_ctrl, setup.soc_target)
        elif setup.controller == "nmpc":
            res = nmpc_step(p, model, table, cfg, ctrl, x_ctrl,
                            setup.soc_target,
                            max_iters=setup.nmpc_max_iters)
        else:
            raise ValueError(f"unknown controller: {setup.controller}")
        solver_ns = time.perf_counter_ns() - t0

        soc_true = mdl.soc(p, x.Vb, x.Vs)
        rows.append(TraceRow(
            step=k, time_s=k * model.dt, Vb=float(x.Vb), Vs=float(x.Vs),
            I=float(x.I), V=float(V_true), SoC=float(soc_true),
            eta=float(mdl.eta(p, table.gamma1, x.Vb, x.Vs)),
            segment=res.segment,
            region=-1 if res.region is None else res.region,
            du=res.du_applied, solver_time_ns=solver_ns,
            fallback_flag=int(res.fallback)))

        soc_ctrl = mdl.soc(p, x_ctrl.Vb, x_ctrl.Vs)
        if soc_ctrl >= setup.soc_target - setup.completion_slack:
            completed = True
            if setup.stop_at_target:
                break

        # the controller commands I_{k+1}; the move applied to the plant is
        # relative to the plant's true current state
        du_plant = res.I_next - x.I
        xv = model.A_aug @ x.as_array() + model.B_aug.ravel() * du_plant
        if setup.noise:
            xv = xv + rng.normal(0.0, np.sqrt(setup.process_cov), 3)
        x = NdcState(*xv)
        du_prev = res.du_applied
    return SimTrace(rows=rows, completed=completed,
                    fallback_count=ctrl.fallback_count)
