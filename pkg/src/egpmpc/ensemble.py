"""Convex ensembles of per-surface GP models with online weight adaptation.

A SurfaceModel bundles the three scalar GPs (longitudinal velocity, lateral
velocity, yaw-rate increments) trained on one friction regime.  The ensemble
prediction is the weighted mean/variance combination; weights live on the
probability simplex and are re-estimated from a sliding window of observed
increments by solving a small QP with an L1 pull toward the previous weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from egpmpc import gp as gplib
from egpmpc import qpsolve

N_OUTPUTS = 3


class DimensionMismatch(ValueError):
    pass


class EmptyWindow(ValueError):
    pass


class SolverFailure(RuntimeError):
    pass


@dataclass
class SurfaceModel:
    """Three scalar-output GPs for one friction regime."""

    gp_vx: gplib.GpModel
    gp_vy: gplib.GpModel
    gp_omega: gplib.GpModel
    label: str = ""

    @property
    def gps(self):
        return (self.gp_vx, self.gp_vy, self.gp_omega)

    def predict_mean(self, x_rows: np.ndarray) -> np.ndarray:
        """Mean increments for rows of GP inputs, shape (n, 3)."""
        x_rows = np.atleast_2d(x_rows)
        return np.column_stack([gplib.predict_mean_batch(g, x_rows) for g in self.gps])

    def predict(self, x_rows: np.ndarray):
        """(means, variances), each (n, 3)."""
        x_rows = np.atleast_2d(x_rows)
        outs = [gplib.predict_batch(g, x_rows) for g in self.gps]
        return np.column_stack([o[0] for o in outs]), np.column_stack([o[1] for o in outs])

    def mean_jacobians(self, x_rows: np.ndarray) -> np.ndarray:
        """Stacked mean Jacobians, shape (n, 3, 6)."""
        x_rows = np.atleast_2d(x_rows)
        return np.stack([gplib.mean_jacobian_batch(g, x_rows) for g in self.gps], axis=1)

    def target_stds(self) -> np.ndarray:
        return np.array([g.y_std for g in self.gps])


def save_surface_model(model: SurfaceModel, path) -> None:
    payload = {
        "format": "surface-model-v1",
        "label": model.label,
        "gp_vx": gplib.gp_to_dict(model.gp_vx),
        "gp_vy": gplib.gp_to_dict(model.gp_vy),
        "gp_omega": gplib.gp_to_dict(model.gp_omega),
    }
    with open(path, "w") as f:
        json.dump(payload, f)


def load_surface_model(path) -> SurfaceModel:
    with open(path) as f:
        payload = json.load(f)
    if payload.get("format") != "surface-model-v1":
        raise ValueError("unrecognized surface model format")
    return SurfaceModel(
        gp_vx=gplib.gp_from_dict(payload["gp_vx"]),
        gp_vy=gplib.gp_from_dict(payload["gp_vy"]),
        gp_omega=gplib.gp_from_dict(payload["gp_omega"]),
        label=payload.get("label", ""),
    )


class ObservationWindow:
    """Ring buffer of up to K (y, x_i) pairs, newest first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.targets: list[np.ndarray] = []
        self.inputs: list[np.ndarray] = []

    def __len__(self):
        return len(self.targets)

    def as_arrays(self):
        return np.array(self.targets), np.array(self.inputs)


def push_observation(window: ObservationWindow, y, x_i) -> ObservationWindow:
    """Prepend the newest pair, dropping the oldest beyond capacity."""
    y = np.asarray(y, dtype=float)
    x_i = np.asarray(x_i, dtype=float)
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x_i))):
        raise ValueError("non-finite observation")
    window.targets.insert(0, y)
    window.inputs.insert(0, x_i)
    if len(window.targets) > window.capacity:
        window.targets.pop()
        window.inputs.pop()
    return window


@dataclass
class WeightConfig:
    window_length: int = 11
    alpha: float = 0.1
    output_scales: np.ndarray | None = None

    def __post_init__(self):
        if self.window_length < 1:
            raise ValueError("window_length must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.output_scales is not None:
            self.output_scales = np.asarray(self.output_scales, dtype=float)
            if self.output_scales.shape != (N_OUTPUTS,) or np.any(self.output_scales <= 0):
                raise ValueError("output_scales must be 3 positive scalars")


def default_output_scales(models) -> np.ndarray:
    """Reciprocal of the library-average per-dimension training-target std."""
    stds = np.mean([m.target_stds() for m in models], axis=0)
    return 1.0 / np.maximum(stds, 1e-12)


def uniform_weights(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def validate_weights(w: np.ndarray, tol: float = 1e-8) -> bool:
    w = np.asarray(w)
    return bool(np.all(w >= -tol) and np.all(w <= 1 + tol) and abs(w.sum() - 1.0) <= tol)


def ensemble_predict(models, w, x_i):
    """Weighted ensemble mean and variance of the 3 output increments.

    mean_d = sum_n w_n mu_d^n,  var_d = sum_n w_n^2 (sigma_d^n)^2.
    """
    w = np.asarray(w, dtype=float)
    if len(models) != w.shape[0] or len(models) < 1:
        raise DimensionMismatch("models and weights disagree: %d vs %s" % (len(models), w.shape))
    x_i = np.asarray(x_i, dtype=float)
    means = np.empty((len(models), N_OUTPUTS))
    varis = np.empty((len(models), N_OUTPUTS))
    for n, m in enumerate(models):
        mu, var = m.predict(x_i[None, :])
        means[n] = mu[0]
        varis[n] = var[0]
    return w @ means, (w**2) @ varis


def ensemble_mean(models, w, x_rows: np.ndarray) -> np.ndarray:
    """Ensemble mean increments for rows of GP inputs, shape (n, 3)."""
    w = np.asarray(w, dtype=float)
    if len(models) != w.shape[0]:
        raise DimensionMismatch("models and weights disagree")
    out = w[0] * models[0].predict_mean(x_rows)
    for n in range(1, len(models)):
        out += w[n] * models[n].predict_mean(x_rows)
    return out


def ensemble_linear_predict(models, w, x_l, dx):
    """First-order Taylor prediction of the ensemble mean about x_l.

    Returns mu(x_l) + dx' sum_n w_n (d mu^n / dx) per output dimension.
    """
    w = np.asarray(w, dtype=float)
    if len(models) != w.shape[0] or len(models) < 1:
        raise DimensionMismatch("models and weights disagree")
    x_l = np.asarray(x_l, dtype=float)
    dx = np.asarray(dx, dtype=float)
    mean0, _ = ensemble_predict(models, w, x_l)
    jac = np.zeros((N_OUTPUTS, x_l.shape[0]))
    for n, m in enumerate(models):
        jac += w[n] * m.mean_jacobians(x_l[None, :])[0]
    return mean0 + jac @ dx


def weight_objective(w, f_mat, y_vec, w_prev, alpha):
    """Tracking objective ||Y - F w||^2 + alpha * ||w - w_prev||_1."""
    r = y_vec - f_mat @ w
    return float(r @ r + alpha * np.abs(w - w_prev).sum())


def build_weight_lsq(models, window: ObservationWindow, cfg: WeightConfig):
    """Stack the window into (F, Y): per-model predictions vs measured increments.

    All three output dimensions of every window entry are stacked, scaled per
    dimension so that m/s and rad/s contribute comparably.
    """
    if len(window) == 0:
        raise EmptyWindow("observation window is empty")
    targets, inputs = window.as_arrays()
    scales = cfg.output_scales if cfg.output_scales is not None \
        else default_output_scales(models)
    y_vec = (targets * scales[None, :]).ravel()          # (3K,)
    cols = []
    for m in models:
        pred = m.predict_mean(inputs) * scales[None, :]  # (K, 3)
        cols.append(pred.ravel())
    f_mat = np.column_stack(cols)                        # (3K, N)
    return f_mat, y_vec


def estimate_weights(models, window: ObservationWindow, w_prev, cfg: WeightConfig,
                     tol: qpsolve.ToleranceConfig | None = None) -> np.ndarray:
    """Minimize ||Y - F w||^2 + alpha ||w - w_prev||_1 over the simplex.

    The L1 term is handled by epigraph variables t >= |w - w_prev|; the
    resulting QP is solved by the dense operator-splitting solver.
    """
    w_prev = np.asarray(w_prev, dtype=float)
    n = len(models)
    if w_prev.shape != (n,):
        raise DimensionMismatch("w_prev has wrong length")
    f_mat, y_vec = build_weight_lsq(models, window, cfg)

    # variables z = [w (n), t (n)]
    p_mat = np.zeros((2 * n, 2 * n))
    p_mat[:n, :n] = 2.0 * (f_mat.T @ f_mat)
    q_vec = np.concatenate([-2.0 * (f_mat.T @ y_vec), cfg.alpha * np.ones(n)])

    eye = np.eye(n)
    a_mat = np.vstack([
        np.hstack([eye, -eye]),            #  w - t <= w_prev
        np.hstack([-eye, -eye]),           # -w - t <= -w_prev
        np.hstack([eye, np.zeros((n, n))]),    # 0 <= w <= 1
        np.hstack([np.ones((1, n)), np.zeros((1, n))]),  # sum w = 1
    ])
    lo = np.concatenate([np.full(n, -np.inf), np.full(n, -np.inf),
                         np.zeros(n), [1.0]])
    hi = np.concatenate([w_prev, -w_prev, np.ones(n), [1.0]])
    problem = qpsolve.QpProblem(p_mat, q_vec, a_mat, lo, hi)
    sol = qpsolve.solve(problem, tol=tol)
    if sol.status != qpsolve.QpStatus.SOLVED:
        raise SolverFailure("weight QP did not solve: %s" % sol.status.value)
    w = np.clip(sol.z[:n], 0.0, None)
    return w / w.sum()
