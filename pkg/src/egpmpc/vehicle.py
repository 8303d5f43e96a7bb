"""Ground-truth plant and controller-side model skeleton.

The plant is a dynamic single-track model with magic-formula lateral tire
forces scaled by the road friction coefficient, integrated with RK4 at a fine
inner step.  Below a blend speed the lateral states relax toward their
kinematic values to avoid the standstill singularity.  The controller-side
hybrid model advances position/heading/steering exactly from geometry and the
velocity states by learned (ensemble) increments.

State ordering (fixed): [p_x, p_y, v_x, psi, v_y, omega, delta].
Input ordering: [F_x, delta_dot].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRAVITY = 9.81
NX = 7
NU = 2
IDX_PX, IDX_PY, IDX_VX, IDX_PSI, IDX_VY, IDX_OMEGA, IDX_DELTA = range(NX)
KINEMATIC_ROWS = (IDX_PX, IDX_PY, IDX_PSI, IDX_DELTA)
DYNAMIC_ROWS = (IDX_VX, IDX_VY, IDX_OMEGA)
# GP input = [v_x, v_y, omega, delta, F_x, delta_dot]
GP_STATE_COLS = (IDX_VX, IDX_VY, IDX_OMEGA, IDX_DELTA)


class NonFiniteState(RuntimeError):
    pass


@dataclass(frozen=True)
class VehicleState:
    p_x: float = 0.0
    p_y: float = 0.0
    v_x: float = 0.0
    psi: float = 0.0
    v_y: float = 0.0
    omega: float = 0.0
    delta: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array([self.p_x, self.p_y, self.v_x, self.psi,
                         self.v_y, self.omega, self.delta])

    @staticmethod
    def from_array(x) -> "VehicleState":
        x = np.asarray(x, dtype=float)
        return VehicleState(*x.tolist())


@dataclass(frozen=True)
class ControlInput:
    f_x: float = 0.0
    delta_dot: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array([self.f_x, self.delta_dot])

    @staticmethod
    def from_array(u) -> "ControlInput":
        u = np.asarray(u, dtype=float)
        return ControlInput(float(u[0]), float(u[1]))


@dataclass(frozen=True)
class PlantParams:
    """Fixed full-scale single-track parameter set (documented stand-in values)."""

    mass: float = 1200.0            # kg
    inertia_z: float = 1800.0       # kg m^2
    lf: float = 1.2                 # m, CoG to front axle
    lr: float = 1.4                 # m, CoG to rear axle
    # magic-formula lateral coefficients; D is peak axle force at mu = 1
    tire_b_front: float = 10.0
    tire_c_front: float = 1.5
    tire_d_front: float = 6340.0    # N ~ static front axle load
    tire_b_rear: float = 10.5
    tire_c_rear: float = 1.55
    tire_d_rear: float = 5440.0     # N ~ static rear axle load
    drag_coeff: float = 0.7         # N / (m/s)^2
    roll_coeff: float = 0.012       # rolling resistance fraction of weight
    max_steer: float = 0.4          # rad
    max_steer_rate: float = 3.2     # rad/s
    max_drive_force: float = 7000.0 # N
    blend_speed_lo: float = 0.5     # m/s, fully kinematic below
    blend_speed_hi: float = 3.0     # m/s, fully dynamic above
    kinematic_relax_time: float = 0.1  # s, low-speed lateral relaxation
    inner_dt: float = 1e-3          # s, RK4 sub-step cap
    noise_std: tuple = (0.0,) * NX  # per-state additive noise (off by default)

    @property
    def wheelbase(self) -> float:
        return self.lf + self.lr


@dataclass
class FrictionMap:
    """Piecewise-constant friction over arc length or longitudinal position.

    segments: list of (lo, hi, mu); lookup uses the first segment containing
    the coordinate and clamps outside the covered range.
    """

    segments: list
    mode: str = "arclength"  # or "position_x"

    def __post_init__(self):
        if self.mode not in ("arclength", "position_x"):
            raise ValueError("mode must be arclength or position_x")
        segs = sorted((float(a), float(b), float(m)) for a, b, m in self.segments)
        for (a, b, m) in segs:
            if not (b > a and 0.0 < m <= 1.5):
                raise ValueError("bad friction segment (%r, %r, %r)" % (a, b, m))
        for (_, b1, _), (a2, _, _) in zip(segs, segs[1:]):
            if a2 < b1 - 1e-9:
                raise ValueError("friction segments overlap")
        self.segments = segs

    def lookup(self, coord: float) -> float:
        segs = self.segments
        if coord < segs[0][0]:
            return segs[0][2]
        for a, b, m in segs:
            if coord < b:
                return m
        return segs[-1][2]

    def transitions(self):
        """Coordinates where mu changes, with (coord, mu_before, mu_after)."""
        out = []
        for (a1, b1, m1), (a2, b2, m2) in zip(self.segments, self.segments[1:]):
            if m1 != m2:
                out.append((a2, m1, m2))
        return out


def _tire_force(alpha, b, c, d_peak, mu):
    return mu * d_peak * np.sin(c * np.arctan(b * alpha))


def _derivatives(x, u, p: PlantParams, mu: float):
    """Continuous-time single-track derivatives with low-speed kinematic blend."""
    v_x, psi, v_y, omega, delta = x[IDX_VX], x[IDX_PSI], x[IDX_VY], x[IDX_OMEGA], x[IDX_DELTA]
    f_x, delta_dot = u

    dx = np.empty(NX)
    dx[IDX_PX] = v_x * np.cos(psi) - v_y * np.sin(psi)
    dx[IDX_PY] = v_x * np.sin(psi) + v_y * np.cos(psi)
    dx[IDX_PSI] = omega
    # steering actuator: rate input, position clamped at the limit
    if (delta >= p.max_steer and delta_dot > 0) or (delta <= -p.max_steer and delta_dot < 0):
        dx[IDX_DELTA] = 0.0
    else:
        dx[IDX_DELTA] = delta_dot

    f_drag = p.drag_coeff * v_x * abs(v_x)
    f_roll = p.roll_coeff * p.mass * GRAVITY * np.sign(v_x)

    # dynamic branch (slip denominators clamped at the blend floor)
    v_den = max(abs(v_x), p.blend_speed_lo)
    alpha_f = delta - np.arctan((v_y + p.lf * omega) / v_den)
    alpha_r = -np.arctan((v_y - p.lr * omega) / v_den)
    f_yf = _tire_force(alpha_f, p.tire_b_front, p.tire_c_front, p.tire_d_front, mu)
    f_yr = _tire_force(alpha_r, p.tire_b_rear, p.tire_c_rear, p.tire_d_rear, mu)

    lam = np.clip((abs(v_x) - p.blend_speed_lo) / (p.blend_speed_hi - p.blend_speed_lo), 0.0, 1.0)

    dvy_dyn = (f_yf * np.cos(delta) + f_yr) / p.mass - v_x * omega
    dom_dyn = (p.lf * f_yf * np.cos(delta) - p.lr * f_yr) / p.inertia_z

    # kinematic branch: relax lateral states toward the kinematic single-track values
    omega_kin = v_x * np.tan(delta) / p.wheelbase
    v_y_kin = p.lr * omega_kin
    tau = p.kinematic_relax_time
    dvy_kin = (v_y_kin - v_y) / tau
    dom_kin = (omega_kin - omega) / tau

    # lateral-force drag on v_x blends out with the rest of the dynamic branch
    dx[IDX_VX] = (f_x - f_drag - f_roll - lam * f_yf * np.sin(delta)) / p.mass + v_y * omega
    dx[IDX_VY] = lam * dvy_dyn + (1.0 - lam) * dvy_kin
    dx[IDX_OMEGA] = lam * dom_dyn + (1.0 - lam) * dom_kin
    return dx


def plant_step(s: VehicleState, u: ControlInput, params: PlantParams,
               mu: float, dt: float, rng: np.random.Generator | None = None) -> VehicleState:
    """Advance the plant by dt (RK4 at an inner step <= params.inner_dt).

    Actuation limits are enforced on the inputs; steering position is clamped
    to +-max_steer.  With a Generator supplied and nonzero noise_std, additive
    zero-mean Gaussian noise is applied to the final state.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = s.to_array()
    if not np.all(np.isfinite(x)):
        raise NonFiniteState("non-finite state on entry")
    u_arr = np.array([
        np.clip(u.f_x, -params.max_drive_force, params.max_drive_force),
        np.clip(u.delta_dot, -params.max_steer_rate, params.max_steer_rate),
    ])
    n_sub = max(1, int(np.ceil(dt / params.inner_dt - 1e-12)))
    h = dt / n_sub
    for _ in range(n_sub):
        k1 = _derivatives(x, u_arr, params, mu)
        k2 = _derivatives(x + 0.5 * h * k1, u_arr, params, mu)
        k3 = _derivatives(x + 0.5 * h * k2, u_arr, params, mu)
        k4 = _derivatives(x + h * k3, u_arr, params, mu)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        x[IDX_DELTA] = np.clip(x[IDX_DELTA], -params.max_steer, params.max_steer)
    if rng is not None:
        sigma = np.asarray(params.noise_std, dtype=float)
        if np.any(sigma > 0):
            x = x + sigma * rng.standard_normal(NX)
    if not np.all(np.isfinite(x)):
        raise NonFiniteState("plant state diverged")
    return VehicleState.from_array(x)


def gp_input(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Assemble the 6-vector GP input [v_x, v_y, omega, delta, F_x, delta_dot]."""
    return np.array([x[IDX_VX], x[IDX_VY], x[IDX_OMEGA], x[IDX_DELTA], u[0], u[1]])


def kinematic_rows_update(x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """Exact discrete updates of the four kinematic rows, shape (4,)."""
    psi = x[IDX_PSI]
    return np.array([
        x[IDX_PX] + (x[IDX_VX] * np.cos(psi) - x[IDX_VY] * np.sin(psi)) * dt,
        x[IDX_PY] + (x[IDX_VX] * np.sin(psi) + x[IDX_VY] * np.cos(psi)) * dt,
        x[IDX_PSI] + x[IDX_OMEGA] * dt,
        x[IDX_DELTA] + u[1] * dt,
    ])


def kinematic_rows_jacobian(s: VehicleState | np.ndarray, dt: float):
    """Analytic Jacobians of the kinematic rows.

    Returns (A_kin, B_kin) of shapes (4, 7) and (4, 2), rows ordered
    (p_x, p_y, psi, delta) as in KINEMATIC_ROWS.
    """
    x = s.to_array() if isinstance(s, VehicleState) else np.asarray(s, dtype=float)
    psi, v_x, v_y = x[IDX_PSI], x[IDX_VX], x[IDX_VY]
    cp, sp = np.cos(psi), np.sin(psi)
    a_kin = np.zeros((4, NX))
    b_kin = np.zeros((4, NU))
    # p_x row
    a_kin[0, IDX_PX] = 1.0
    a_kin[0, IDX_VX] = cp * dt
    a_kin[0, IDX_VY] = -sp * dt
    a_kin[0, IDX_PSI] = (-v_x * sp - v_y * cp) * dt
    # p_y row
    a_kin[1, IDX_PY] = 1.0
    a_kin[1, IDX_VX] = sp * dt
    a_kin[1, IDX_VY] = cp * dt
    a_kin[1, IDX_PSI] = (v_x * cp - v_y * sp) * dt
    # psi row
    a_kin[2, IDX_PSI] = 1.0
    a_kin[2, IDX_OMEGA] = dt
    # delta row
    a_kin[3, IDX_DELTA] = 1.0
    b_kin[3, 1] = dt
    return a_kin, b_kin


def hybrid_model_step(s: VehicleState, u: ControlInput, models, w, dt: float) -> VehicleState:
    """One controller-model step: exact kinematic rows + ensemble increments."""
    from egpmpc import ensemble as enslib

    x = s.to_array()
    u_arr = u.to_array()
    mean = enslib.ensemble_mean(models, w, gp_input(x, u_arr)[None, :])[0]
    x_next = x.copy()
    kin = kinematic_rows_update(x, u_arr, dt)
    for i, row in enumerate(KINEMATIC_ROWS):
        x_next[row] = kin[i]
    for j, row in enumerate(DYNAMIC_ROWS):
        x_next[row] = x[row] + mean[j]
    return VehicleState.from_array(x_next)
