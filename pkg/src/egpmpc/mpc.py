"""Linearized-ensemble receding-horizon controller.

Per control step: linearize every surface model about an operating trajectory
(the previous optimal solution shifted by one stage), combine the per-model
affine models with the current ensemble weights, solve the finite-time optimal
control problem as a condensed QP over the input sequence, apply the first
input to the plant, measure the realized increment, and re-estimate the
weights from the sliding observation window.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from egpmpc import ensemble as enslib
from egpmpc import qpsolve
from egpmpc import vehicle
from egpmpc.vehicle import (
    NX, NU, IDX_VX, IDX_PSI, IDX_DELTA, DYNAMIC_ROWS, GP_STATE_COLS,
    ControlInput, VehicleState,
)


class DimensionMismatch(ValueError):
    pass


def _diag(values):
    return np.diag(np.asarray(values, dtype=float))


@dataclass
class MpcConfig:
    horizon: int = 20
    dt: float = 0.02
    q: np.ndarray = field(default_factory=lambda: _diag([20, 20, 5, 10, 0, 0, 0]))
    q_terminal: np.ndarray = field(default_factory=lambda: 2 * _diag([20, 20, 5, 10, 0, 0, 0]))
    r: np.ndarray = field(default_factory=lambda: _diag([1e-7, 5]))
    r_rate: np.ndarray = field(default_factory=lambda: _diag([1e-7, 10]))
    x_lo: np.ndarray = field(default_factory=lambda: np.array(
        [-np.inf, -np.inf, 0.0, -np.inf, -np.inf, -np.inf, -0.4]))
    x_hi: np.ndarray = field(default_factory=lambda: np.array(
        [np.inf, np.inf, 45.0, np.inf, np.inf, np.inf, 0.4]))
    u_lo: np.ndarray = field(default_factory=lambda: np.array([-7000.0, -3.2]))
    u_hi: np.ndarray = field(default_factory=lambda: np.array([7000.0, 3.2]))
    qp_eps: float = 1e-5
    qp_max_iter: int = 2000

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2")
        for name in ("q", "q_terminal", "r", "r_rate", "x_lo", "x_hi", "u_lo", "u_hi"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))

    def qp_tolerances(self) -> qpsolve.ToleranceConfig:
        return qpsolve.ToleranceConfig(eps_primal=self.qp_eps, eps_dual=self.qp_eps,
                                       max_iter=self.qp_max_iter)


@dataclass
class OperatingTrajectory:
    states: np.ndarray  # (T+1, 7)
    inputs: np.ndarray  # (T, 2)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        if self.states.shape[0] != self.inputs.shape[0] + 1:
            raise ValueError("states must have one more row than inputs")


@dataclass
class LtvModel:
    a: np.ndarray  # (T, 7, 7)
    b: np.ndarray  # (T, 7, 2)
    c: np.ndarray  # (T, 7)

    @property
    def horizon(self) -> int:
        return self.a.shape[0]


class KinematicModel:
    """Surface-model stand-in with kinematic single-track velocity increments.

    Predicted increments pull the velocity states to their kinematic values:
    yaw rate v_x tan(delta) / L, sideslip l_r * yaw rate, and a point-mass
    longitudinal acceleration F_x / m.  Variance is identically zero.
    """

    label = "kinematic"

    def __init__(self, wheelbase: float, lr: float, mass: float, dt: float,
                 relax: float = 1.0):
        self.wheelbase = wheelbase
        self.lr = lr
        self.mass = mass
        self.dt = dt
        self.relax = relax

    def predict_mean(self, x_rows: np.ndarray) -> np.ndarray:
        x_rows = np.atleast_2d(x_rows)
        v_x, v_y, omega, delta, f_x = (x_rows[:, 0], x_rows[:, 1], x_rows[:, 2],
                                       x_rows[:, 3], x_rows[:, 4])
        omega_kin = v_x * np.tan(delta) / self.wheelbase
        d_vx = self.dt * f_x / self.mass
        d_vy = self.relax * (self.lr * omega_kin - v_y)
        d_om = self.relax * (omega_kin - omega)
        return np.column_stack([d_vx, d_vy, d_om])

    def predict(self, x_rows: np.ndarray):
        means = self.predict_mean(x_rows)
        return means, np.zeros_like(means)

    def mean_jacobians(self, x_rows: np.ndarray) -> np.ndarray:
        x_rows = np.atleast_2d(x_rows)
        n = x_rows.shape[0]
        v_x, delta = x_rows[:, 0], x_rows[:, 3]
        jac = np.zeros((n, 3, 6))
        t = np.tan(delta)
        sec2 = 1.0 + t * t
        dok_dvx = t / self.wheelbase
        dok_ddl = v_x * sec2 / self.wheelbase
        jac[:, 0, 4] = self.dt / self.mass
        jac[:, 1, 0] = self.relax * self.lr * dok_dvx
        jac[:, 1, 3] = self.relax * self.lr * dok_ddl
        jac[:, 1, 1] = -self.relax
        jac[:, 2, 0] = self.relax * dok_dvx
        jac[:, 2, 3] = self.relax * dok_ddl
        jac[:, 2, 2] = -self.relax
        return jac

    def target_stds(self) -> np.ndarray:
        return np.ones(3)


def model_step(model, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """One-step prediction of a single surface model (exact kinematic rows)."""
    x_next = x.copy()
    kin = vehicle.kinematic_rows_update(x, u, dt)
    for i, row in enumerate(vehicle.KINEMATIC_ROWS):
        x_next[row] = kin[i]
    mean = model.predict_mean(vehicle.gp_input(x, u)[None, :])[0]
    for j, row in enumerate(DYNAMIC_ROWS):
        x_next[row] = x[row] + mean[j]
    return x_next


def linearize_model(model, traj: OperatingTrajectory, dt: float) -> LtvModel:
    """Affine model (A, B, C) of one surface model along the operating trajectory.

    Kinematic rows use the analytic geometry Jacobians; dynamic rows come from
    the model's mean Jacobian.  C makes the affine model exact at the anchor.
    """
    t_hor = traj.inputs.shape[0]
    xs, us = traj.states[:t_hor], traj.inputs
    gp_rows = np.column_stack([xs[:, list(GP_STATE_COLS)], us])
    means = model.predict_mean(gp_rows)        # (T, 3)
    jacs = model.mean_jacobians(gp_rows)       # (T, 3, 6)

    a = np.zeros((t_hor, NX, NX))
    b = np.zeros((t_hor, NX, NU))
    c = np.zeros((t_hor, NX))
    for t in range(t_hor):
        a_kin, b_kin = vehicle.kinematic_rows_jacobian(xs[t], dt)
        for i, row in enumerate(vehicle.KINEMATIC_ROWS):
            a[t, row] = a_kin[i]
            b[t, row] = b_kin[i]
        for j, row in enumerate(DYNAMIC_ROWS):
            a[t, row, row] = 1.0
            a[t, row, list(GP_STATE_COLS)] += jacs[t, j, :4]
            b[t, row] = jacs[t, j, 4:]
        f_t = model_step_from_mean(xs[t], us[t], means[t], dt)
        c[t] = f_t - a[t] @ xs[t] - b[t] @ us[t]
    return LtvModel(a, b, c)


def model_step_from_mean(x, u, mean3, dt):
    x_next = x.copy()
    kin = vehicle.kinematic_rows_update(x, u, dt)
    for i, row in enumerate(vehicle.KINEMATIC_ROWS):
        x_next[row] = kin[i]
    for j, row in enumerate(DYNAMIC_ROWS):
        x_next[row] = x[row] + mean3[j]
    return x_next


def assemble_ensemble_ltv(per_model, w) -> LtvModel:
    """Weighted sum of per-model (A, B, C) stacks."""
    w = np.asarray(w, dtype=float)
    if len(per_model) != w.shape[0] or len(per_model) < 1:
        raise DimensionMismatch("model matrices and weights disagree")
    a = w[0] * per_model[0].a
    b = w[0] * per_model[0].b
    c = w[0] * per_model[0].c
    for n in range(1, len(per_model)):
        a = a + w[n] * per_model[n].a
        b = b + w[n] * per_model[n].b
        c = c + w[n] * per_model[n].c
    return LtvModel(a, b, c)


# -- condensed finite-time optimal control problem ---------------------------

def _condense(x0, ltv: LtvModel):
    """Prediction matrices: stacked x_{1..T} = S u + e."""
    t_hor = ltv.horizon
    s_mat = np.zeros((t_hor, NX, NU * t_hor))
    e_vec = np.zeros((t_hor + 1, NX))
    e_vec[0] = x0
    cur = np.zeros((NX, NU * t_hor))
    for t in range(t_hor):
        cur = ltv.a[t] @ cur
        cur[:, NU * t:NU * (t + 1)] += ltv.b[t]
        s_mat[t] = cur
        e_vec[t + 1] = ltv.a[t] @ e_vec[t] + ltv.c[t]
    return s_mat.reshape(t_hor * NX, NU * t_hor), e_vec


def _rate_matrix(t_hor):
    d = np.zeros((NU * (t_hor - 1), NU * t_hor))
    for t in range(t_hor - 1):
        d[NU * t:NU * (t + 1), NU * t:NU * (t + 1)] = -np.eye(NU)
        d[NU * t:NU * (t + 1), NU * (t + 1):NU * (t + 2)] = np.eye(NU)
    return d


def solve_ftocp(x0, ref: np.ndarray, ltv: LtvModel, cfg: MpcConfig,
                warm: qpsolve.QpSolution | None = None):
    """Solve the tracking QP over the input sequence.

    Returns (u_seq (T,2), x_seq (T+1,7), diagnostics).  On a non-solved status
    the caller is expected to fall back; the predicted sequence for the
    returned u is still consistent with the LTV model.
    """
    t_hor = cfg.horizon
    x0 = np.asarray(x0, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if ltv.horizon != t_hor or ref.shape != (t_hor + 1, NX):
        raise DimensionMismatch("ltv/ref inconsistent with horizon")

    s_mat, e_vec = _condense(x0, ltv)
    e_free = e_vec[1:].reshape(-1)              # stacked x_{1..T} at u = 0
    q_bar = np.concatenate([np.tile(np.diag(cfg.q), t_hor - 1), np.diag(cfg.q_terminal)])
    resid0 = e_free - ref[1:].reshape(-1)

    qs = s_mat * q_bar[:, None]
    p_mat = 2.0 * (s_mat.T @ qs)
    r_diag = np.tile(np.diag(cfg.r), t_hor)
    p_mat[np.diag_indices_from(p_mat)] += 2.0 * r_diag
    d_mat = _rate_matrix(t_hor)
    rd_diag = np.tile(np.diag(cfg.r_rate), t_hor - 1)
    p_mat += 2.0 * (d_mat.T * rd_diag[None, :]) @ d_mat
    q_vec = 2.0 * (qs.T @ resid0)

    # constraints: input boxes, then bounded-state prediction rows
    bounded = [i for i in range(NX) if np.isfinite(cfg.x_lo[i]) or np.isfinite(cfg.x_hi[i])]
    state_rows = []
    for t in range(t_hor):
        state_rows.extend(t * NX + i for i in bounded)
    a_con = np.vstack([np.eye(NU * t_hor), s_mat[state_rows]])
    lo = np.concatenate([np.tile(cfg.u_lo, t_hor),
                         np.tile(cfg.x_lo[bounded], t_hor) - e_free[state_rows]])
    hi = np.concatenate([np.tile(cfg.u_hi, t_hor),
                         np.tile(cfg.x_hi[bounded], t_hor) - e_free[state_rows]])

    problem = qpsolve.QpProblem(p_mat, q_vec, a_con, lo, hi)
    sol = qpsolve.solve(problem, warm=warm, tol=cfg.qp_tolerances())

    u_seq = sol.z.reshape(t_hor, NU)
    x_seq = np.vstack([x0, (e_free + s_mat @ sol.z).reshape(t_hor, NX)])
    diagnostics = {
        "status": sol.status,
        "iterations": sol.iterations,
        "n_var": problem.n,
        "n_con": problem.m,
        "polished": sol.polished,
        "objective": sol.objective,
        "solution": sol,
        "n_bounded_states": len(bounded),
    }
    return u_seq, x_seq, diagnostics


def shift_solution(sol: qpsolve.QpSolution, t_hor: int, n_bounded: int) -> qpsolve.QpSolution:
    """Warm-start guess for the next step: advance all stages by one."""
    z = sol.z.reshape(t_hor, NU)
    z_shift = np.vstack([z[1:], z[-1:]]).reshape(-1)
    y_u = sol.y[:NU * t_hor].reshape(t_hor, NU)
    y_x = sol.y[NU * t_hor:].reshape(t_hor, n_bounded)
    y_shift = np.concatenate([
        np.vstack([y_u[1:], y_u[-1:]]).reshape(-1),
        np.vstack([y_x[1:], y_x[-1:]]).reshape(-1),
    ])
    return qpsolve.QpSolution(z_shift, y_shift, sol.status, 0, np.inf, np.inf)


# -- closed loop --------------------------------------------------------------

@dataclass
class LoopSetup:
    """Everything the closed loop needs besides models and controller configs."""

    plant_params: vehicle.PlantParams
    reference: object            # tracks.ReferenceTrajectory-like
    friction: object             # callable (state_array, s) -> mu
    initial_state: VehicleState
    max_steps: int = 5000
    abort_lateral_error: float = 5.0
    complete_laps: float = 1.0   # closed tracks: laps to complete
    noise_seed: int | None = None


@dataclass
class RunLog:
    n_models: int
    horizon: int
    dt: float
    records: dict = field(default_factory=dict)
    completed: bool = False
    failure_reason: str = ""
    failure_s: float = np.nan

    def append(self, **kv):
        for k, v in kv.items():
            self.records.setdefault(k, []).append(v)

    def column(self, key):
        return np.asarray(self.records[key])

    @property
    def n_steps(self):
        return len(self.records.get("t", []))


def control_loop(setup: LoopSetup, models, mpc_cfg: MpcConfig,
                 weight_cfg: enslib.WeightConfig,
                 fixed_weights: np.ndarray | None = None) -> RunLog:
    """Run the adaptive-ensemble receding-horizon loop until completion or failure.

    With a single model (or fixed_weights) the weight QP is skipped and the
    loop reduces exactly to single-model MPC.
    """
    n_models = len(models)
    if fixed_weights is not None:
        fixed_weights = np.asarray(fixed_weights, dtype=float)
        if fixed_weights.shape != (n_models,):
            raise DimensionMismatch("fixed_weights length mismatch")
    t_hor = mpc_cfg.horizon
    dt = mpc_cfg.dt
    if weight_cfg.output_scales is None and n_models > 1:
        weight_cfg = enslib.WeightConfig(weight_cfg.window_length, weight_cfg.alpha,
                                         enslib.default_output_scales(models))

    w = fixed_weights if fixed_weights is not None else enslib.uniform_weights(n_models)
    window = enslib.ObservationWindow(weight_cfg.window_length)
    rng = (np.random.default_rng(setup.noise_seed)
           if setup.noise_seed is not None and np.any(np.asarray(setup.plant_params.noise_std) > 0)
           else None)

    log = RunLog(n_models=n_models, horizon=t_hor, dt=dt)
    state = setup.initial_state
    prev_u_seq = None
    prev_x_seq = None
    prev_qp = None
    s_prev = None
    progress = 0.0
    track_len = setup.reference.length

    for k in range(setup.max_steps):
        t_start = time.perf_counter()
        x_arr = state.to_array()
        s_now, lat_err, v_err = setup.reference.locate(x_arr)
        if s_prev is not None:
            progress += setup.reference.advance(s_prev, s_now)
        s_prev = s_now

        if abs(lat_err) > setup.abort_lateral_error:
            log.completed = False
            log.failure_reason = "lateral_error"
            log.failure_s = progress
            break

        ref = setup.reference.horizon_states(s_now, x_arr[IDX_PSI], t_hor, dt)

        if prev_u_seq is None:
            traj = OperatingTrajectory(ref.copy(), np.zeros((t_hor, NU)))
        else:
            traj = OperatingTrajectory(
                np.vstack([prev_x_seq[1:], prev_x_seq[-1:]]),
                np.vstack([prev_u_seq[1:], prev_u_seq[-1:]]),
            )

        t0 = time.perf_counter()
        per_model = [linearize_model(m, traj, dt) for m in models]
        lin_ms = (time.perf_counter() - t0) * 1e3
        ltv = assemble_ensemble_ltv(per_model, w)

        t0 = time.perf_counter()
        u_seq, x_seq, diag = solve_ftocp(x_arr, ref, ltv, mpc_cfg, warm=prev_qp)
        qp_ms = (time.perf_counter() - t0) * 1e3

        solved = diag["status"] == qpsolve.QpStatus.SOLVED
        if solved:
            prev_qp = shift_solution(diag["solution"], t_hor, diag["n_bounded_states"])
            prev_u_seq, prev_x_seq = u_seq, x_seq
        elif prev_u_seq is not None:
            # fallback: previous sequence shifted, last input held
            u_seq = np.vstack([prev_u_seq[1:], prev_u_seq[-1:]])
            x_seq = np.vstack([prev_x_seq[1:], prev_x_seq[-1:]])
            prev_u_seq, prev_x_seq = u_seq, x_seq
            prev_qp = None
        else:
            u_seq = np.zeros((t_hor, NU))
            x_seq = np.vstack([x_arr[None, :]] * (t_hor + 1))
            prev_qp = None

        u0 = np.clip(u_seq[0], mpc_cfg.u_lo, mpc_cfg.u_hi)
        u_cmd = ControlInput.from_array(u0)
        x_i = vehicle.gp_input(x_arr, u0)
        mu = setup.friction(x_arr, s_now)

        t0 = time.perf_counter()
        ens_var = np.zeros(3)
        if n_models >= 1:
            _, ens_var = enslib.ensemble_predict(models, w, x_i)
        try:
            new_state = vehicle.plant_step(state, u_cmd, setup.plant_params, mu, dt, rng=rng)
        except vehicle.NonFiniteState:
            log.completed = False
            log.failure_reason = "non_finite_state"
            log.failure_s = progress
            break
        new_arr = new_state.to_array()
        y = new_arr[list(DYNAMIC_ROWS)] - x_arr[list(DYNAMIC_ROWS)]
        enslib.push_observation(window, y, x_i)
        weight_ms = 0.0
        if fixed_weights is None and n_models > 1:
            tw = time.perf_counter()
            w = enslib.estimate_weights(models, window, w, weight_cfg)
            weight_ms = (time.perf_counter() - tw) * 1e3
        other_ms = (time.perf_counter() - t0) * 1e3

        total_ms = (time.perf_counter() - t_start) * 1e3
        log.append(
            t=k * dt, step=k, state=x_arr, input=u0, weights=w.copy(),
            lat_err=lat_err, v_err=v_err, mu=mu, s=s_now, progress=progress,
            ens_var=ens_var, qp_solved=int(solved), qp_iterations=diag["iterations"],
            lin_ms=lin_ms, qp_ms=qp_ms, weight_ms=weight_ms, other_ms=other_ms,
            total_ms=total_ms,
        )
        state = new_state

        if setup.reference.closed:
            if progress >= setup.complete_laps * track_len - 1e-9:
                log.completed = True
                break
        elif s_now >= setup.reference.end_s:
            log.completed = True
            break
    else:
        log.failure_reason = "max_steps"
    if not log.completed and not log.failure_reason:
        log.failure_reason = "max_steps"
    return log
