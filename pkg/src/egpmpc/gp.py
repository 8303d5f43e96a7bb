"""Exact Gaussian-process regression for scalar one-step dynamics increments.

Squared-exponential kernel with per-dimension lengthscales (ARD), hyperparameters
fitted by multi-restart maximization of the log marginal likelihood with analytic
gradients.  Inputs and targets are z-scored internally; predictions and mean
Jacobians are returned in the original units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize

INPUT_DIM = 6
MIN_SAMPLES = 10
# Jitter added to the kernel diagonal, relative to the signal variance.
NOISE_FLOOR_RATIO = 1e-8

MODEL_FORMAT = "gp-model-v1"


class TooFewSamples(ValueError):
    pass


class SingularKernel(RuntimeError):
    pass


@dataclass(frozen=True)
class GpHyperparams:
    """SE-ARD kernel hyperparameters (in the space the kernel operates on)."""

    lengthscales: np.ndarray  # (INPUT_DIM,)
    signal_variance: float
    noise_variance: float

    def __post_init__(self):
        ls = np.asarray(self.lengthscales, dtype=float)
        object.__setattr__(self, "lengthscales", ls)
        if ls.shape != (INPUT_DIM,) or not np.all(ls > 0):
            raise ValueError("lengthscales must be %d positive scalars" % INPUT_DIM)
        if not (self.signal_variance > 0 and self.noise_variance > 0):
            raise ValueError("variances must be strictly positive")


@dataclass
class FitConfig:
    restarts: int = 4
    max_iter: int = 60
    seed: int = 0


def kernel(a, b, h: GpHyperparams) -> float:
    """SE-ARD covariance between two input points."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    r2 = np.sum(((a - b) / h.lengthscales) ** 2)
    return float(h.signal_variance * np.exp(-0.5 * r2))


def kernel_matrix(xa: np.ndarray, xb: np.ndarray, h: GpHyperparams) -> np.ndarray:
    """Cross-covariance matrix between two sets of rows, shape (len(xa), len(xb))."""
    da = xa / h.lengthscales
    db = xb / h.lengthscales
    r2 = (
        np.sum(da**2, axis=1)[:, None]
        + np.sum(db**2, axis=1)[None, :]
        - 2.0 * da @ db.T
    )
    np.maximum(r2, 0.0, out=r2)
    return h.signal_variance * np.exp(-0.5 * r2)


class GpModel:
    """A trained GP: hyperparameters, standardized training set, cached factorization.

    Instances are immutable by convention; predict/mean_jacobian are pure.
    """

    def __init__(self, hyperparams, train_inputs, train_targets,
                 x_mean, x_std, y_mean, y_std, log_marginal_likelihood=np.nan):
        self.hyperparams = hyperparams
        self.train_inputs = np.array(train_inputs, dtype=float)
        self.train_targets = np.array(train_targets, dtype=float)
        self.x_mean = np.asarray(x_mean, dtype=float)
        self.x_std = np.asarray(x_std, dtype=float)
        self.y_mean = float(y_mean)
        self.y_std = float(y_std)
        self.log_marginal_likelihood = float(log_marginal_likelihood)
        self.xs = (self.train_inputs - self.x_mean) / self.x_std
        self.ys = (self.train_targets - self.y_mean) / self.y_std
        self.chol, self.alpha = _factorize(self.xs, self.ys, hyperparams)

    @property
    def n_train(self) -> int:
        return self.train_inputs.shape[0]

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.x_mean) / self.x_std

    def factorization_residual(self) -> float:
        """Max-norm residual of K~ @ alpha = ys; consistency checksum for serialization."""
        kmat = kernel_matrix(self.xs, self.xs, self.hyperparams)
        kmat[np.diag_indices_from(kmat)] += _effective_noise(self.hyperparams)
        return float(np.max(np.abs(kmat @ self.alpha - self.ys)))


def _effective_noise(h: GpHyperparams) -> float:
    return h.noise_variance + NOISE_FLOOR_RATIO * h.signal_variance


def _factorize(xs, ys, h):
    kmat = kernel_matrix(xs, xs, h)
    kmat[np.diag_indices_from(kmat)] += _effective_noise(h)
    try:
        chol = sla.cholesky(kmat, lower=True)
    except sla.LinAlgError as exc:
        raise SingularKernel("kernel factorization failed at the noise floor") from exc
    alpha = sla.cho_solve((chol, True), ys)
    return chol, alpha


def _spd_inverse(chol):
    """Inverse of an SPD matrix from its lower Cholesky factor (LAPACK potri)."""
    potri, = sla.get_lapack_funcs(("potri",), (chol,))
    inv, info = potri(chol, lower=True)
    if info != 0:
        raise sla.LinAlgError("potri failed")
    inv = np.tril(inv) + np.tril(inv, -1).T
    return inv


def _neg_lml_and_grad(theta, dist_sq, ys):
    """Negative log marginal likelihood and gradient over log-hyperparameters.

    theta = log([lengthscales (6), signal_variance, noise_variance]);
    dist_sq is the (INPUT_DIM, m, m) per-dimension squared-difference stack.
    """
    m = ys.shape[0]
    ls2 = np.exp(2.0 * theta[:INPUT_DIM])
    sf2 = np.exp(theta[INPUT_DIM])
    sn2 = np.exp(theta[INPUT_DIM + 1])

    # r2 = sum_d dist_sq[d] / ls2[d], accumulated in place
    expmat = dist_sq[0] * (-0.5 / ls2[0])
    for d in range(1, INPUT_DIM):
        expmat += dist_sq[d] * (-0.5 / ls2[d])
    np.exp(expmat, out=expmat)
    kmat = sf2 * expmat
    noise = sn2 + NOISE_FLOOR_RATIO * sf2
    kmat[np.diag_indices_from(kmat)] += noise
    try:
        chol = sla.cholesky(kmat, lower=True, check_finite=False, overwrite_a=True)
        kinv = _spd_inverse(chol)
    except sla.LinAlgError:
        return 1e25, np.zeros_like(theta)

    alpha = sla.cho_solve((chol, True), ys, check_finite=False)
    lml = -0.5 * float(ys @ alpha) - float(np.sum(np.log(np.diag(chol)))) \
        - 0.5 * m * np.log(2.0 * np.pi)

    # dLML/dK = 0.5 * w; base = w .* K (noise-free part)
    tr_w = float(alpha @ alpha) - float(np.trace(kinv))
    base = np.outer(alpha, alpha)
    base -= kinv
    base *= expmat
    base *= sf2

    grad = np.empty_like(theta)
    # dK/dlog(ls_d) = sf2 * E .* dist_sq_d / ls_d^2
    for d in range(INPUT_DIM):
        grad[d] = 0.5 * float(np.einsum("ij,ij->", base, dist_sq[d])) / ls2[d]
    # dK/dlog(sf2) = sf2*E + floor*sf2*I
    grad[INPUT_DIM] = 0.5 * (float(np.sum(base)) + NOISE_FLOOR_RATIO * sf2 * tr_w)
    grad[INPUT_DIM + 1] = 0.5 * sn2 * tr_w
    return -lml, -grad


_THETA_BOUNDS = [(np.log(1e-3), np.log(1e3))] * INPUT_DIM + \
    [(np.log(1e-6), np.log(1e3)), (np.log(1e-12), np.log(10.0))]


def fit(inputs, targets, config: FitConfig | None = None) -> GpModel:
    """Fit a GP to (inputs, targets) by maximizing the log marginal likelihood.

    Runs `config.restarts` L-BFGS ascents from the canonical initialization
    (unit lengthscales, unit signal variance, 1e-4 noise in standardized space)
    plus seeded random perturbations of it, and keeps the best optimum.
    """
    config = config or FitConfig()
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float).ravel()
    if x.ndim != 2 or x.shape[1] != INPUT_DIM:
        raise ValueError("inputs must be (m, %d)" % INPUT_DIM)
    if x.shape[0] != y.shape[0]:
        raise ValueError("inputs and targets row counts differ")
    if x.shape[0] < MIN_SAMPLES:
        raise TooFewSamples("need at least %d samples, got %d" % (MIN_SAMPLES, x.shape[0]))
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite training data")

    x_mean = x.mean(axis=0)
    x_std = x.std(axis=0)
    x_std = np.where(x_std < 1e-12, 1.0, x_std)
    y_mean = float(y.mean())
    y_std = float(y.std())
    if y_std < 1e-12:
        y_std = 1.0
    xs = (x - x_mean) / x_std
    ys = (y - y_mean) / y_std

    dist_sq = np.empty((INPUT_DIM, xs.shape[0], xs.shape[0]))
    for d in range(INPUT_DIM):
        diff = xs[:, d][:, None] - xs[:, d][None, :]
        dist_sq[d] = diff * diff

    theta0 = np.concatenate([np.zeros(INPUT_DIM), [0.0, np.log(1e-4)]])
    rng = np.random.default_rng(config.seed)
    best_theta, best_nll = None, np.inf
    for r in range(max(1, config.restarts)):
        t_init = theta0 if r == 0 else theta0 + rng.uniform(-1.5, 1.5, size=theta0.shape)
        f0, _ = _neg_lml_and_grad(t_init, dist_sq, ys)
        res = minimize(_neg_lml_and_grad, t_init, args=(dist_sq, ys), jac=True,
                       method="L-BFGS-B", bounds=_THETA_BOUNDS,
                       options={"maxiter": config.max_iter, "ftol": 1e-8, "gtol": 1e-5})
        # keep only runs that did not regress below their own start
        if res.fun <= f0 + 1e-12 and res.fun < best_nll:
            best_nll, best_theta = res.fun, res.x
    if best_theta is None:
        raise SingularKernel("all hyperparameter restarts failed to factorize")

    h = GpHyperparams(
        lengthscales=np.exp(best_theta[:INPUT_DIM]),
        signal_variance=float(np.exp(best_theta[INPUT_DIM])),
        noise_variance=float(np.exp(best_theta[INPUT_DIM + 1])),
    )
    return GpModel(h, x, y, x_mean, x_std, y_mean, y_std,
                   log_marginal_likelihood=-best_nll)


def predict(model: GpModel, x) -> tuple[float, float]:
    """Posterior mean and (latent, noise-free) variance at one input point."""
    mean, var = predict_batch(model, np.asarray(x, dtype=float)[None, :])
    return float(mean[0]), float(var[0])


def predict_batch(model: GpModel, x: np.ndarray):
    """Vectorized posterior mean/variance over rows of x, in original units."""
    xs = model.standardize(np.atleast_2d(x))
    kstar = kernel_matrix(xs, model.xs, model.hyperparams)
    mean_s = kstar @ model.alpha
    v = sla.solve_triangular(model.chol, kstar.T, lower=True)
    var_s = model.hyperparams.signal_variance - np.sum(v * v, axis=0)
    np.maximum(var_s, 0.0, out=var_s)  # clamp tiny negative round-off
    return model.y_mean + model.y_std * mean_s, model.y_std**2 * var_s


def predict_mean_batch(model: GpModel, x: np.ndarray) -> np.ndarray:
    """Posterior mean only (skips the variance back-solve)."""
    xs = model.standardize(np.atleast_2d(x))
    kstar = kernel_matrix(xs, model.xs, model.hyperparams)
    return model.y_mean + model.y_std * (kstar @ model.alpha)


def mean_jacobian(model: GpModel, x) -> np.ndarray:
    """Gradient of the posterior mean w.r.t. the 6 input components."""
    return mean_jacobian_batch(model, np.asarray(x, dtype=float)[None, :])[0]


def mean_jacobian_batch(model: GpModel, x: np.ndarray) -> np.ndarray:
    """Vectorized posterior-mean Jacobians, shape (len(x), INPUT_DIM).

    For the SE kernel, d mu / dx = sum_i alpha_i k(x, x_i) (x_i - x) / ls^2,
    computed in standardized space and chain-ruled back to original units.
    """
    xs = model.standardize(np.atleast_2d(x))
    h = model.hyperparams
    kstar = kernel_matrix(xs, model.xs, h)        # (n, m)
    ka = kstar * model.alpha[None, :]             # (n, m)
    # sum_i ka[n,i] * (xtrain[i,:] - xs[n,:])
    grad_s = ka @ model.xs - np.sum(ka, axis=1)[:, None] * xs
    grad_s /= h.lengthscales[None, :] ** 2
    return grad_s * (model.y_std / model.x_std)[None, :]


def save_gp(model: GpModel, path) -> None:
    """Serialize a model to structured text (JSON); factorizations are not stored."""
    with open(path, "w") as f:
        json.dump(gp_to_dict(model), f)


def load_gp(path) -> GpModel:
    """Load a model, recompute the factorization, and verify it against the checksum."""
    with open(path) as f:
        payload = json.load(f)
    return gp_from_dict(payload)


def gp_to_dict(model: GpModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "lengthscales": model.hyperparams.lengthscales.tolist(),
        "signal_variance": model.hyperparams.signal_variance,
        "noise_variance": model.hyperparams.noise_variance,
        "x_mean": model.x_mean.tolist(),
        "x_std": model.x_std.tolist(),
        "y_mean": model.y_mean,
        "y_std": model.y_std,
        "train_inputs": model.train_inputs.tolist(),
        "train_targets": model.train_targets.tolist(),
        "log_marginal_likelihood": model.log_marginal_likelihood,
        "residual_checksum": model.factorization_residual(),
    }


def gp_from_dict(payload: dict) -> GpModel:
    if payload.get("format") != MODEL_FORMAT:
        raise ValueError("unrecognized model format: %r" % payload.get("format"))
    h = GpHyperparams(
        lengthscales=np.array(payload["lengthscales"]),
        signal_variance=payload["signal_variance"],
        noise_variance=payload["noise_variance"],
    )
    model = GpModel(
        h, payload["train_inputs"], payload["train_targets"],
        payload["x_mean"], payload["x_std"], payload["y_mean"], payload["y_std"],
        log_marginal_likelihood=payload.get("log_marginal_likelihood", np.nan),
    )
    resid = model.factorization_residual()
    stored = payload["residual_checksum"]
    if resid > max(1e-7, 10.0 * stored):
        raise SingularKernel(
            "recomputed K@alpha residual %.3e inconsistent with stored %.3e" % (resid, stored)
        )
    return model
