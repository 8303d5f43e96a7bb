"""State/input-space sampling of GP training tuples from the plant.

Samples (state, input) uniformly from bounded sets, rolls the noise-free plant
for a short burst while holding the input, and records one (GP input, 3-vector
increment) tuple per step.  Tuples are stored flat, in rollout order, so that
consecutive-tuple pairs can be reconstructed from the rollout length recorded
in the metadata.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from egpmpc import vehicle
from egpmpc.vehicle import ControlInput, PlantParams, VehicleState

DATASET_FORMAT = "dataset-v1"


class UnreachableBounds(RuntimeError):
    pass


@dataclass
class SamplingBounds:
    v_x: tuple = (2.0, 25.0)
    v_y: tuple = (-2.0, 2.0)
    omega: tuple = (-1.5, 1.5)
    delta: tuple = (-0.35, 0.35)
    f_x: tuple = (-7000.0, 7000.0)
    delta_dot: tuple = (-3.2, 3.2)

    def __post_init__(self):
        for name in ("v_x", "v_y", "omega", "delta", "f_x", "delta_dot"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError("bad bounds for %s" % name)

    def state_box(self):
        return np.array([self.v_x, self.v_y, self.omega, self.delta])

    def input_box(self):
        return np.array([self.f_x, self.delta_dot])


@dataclass
class Dataset:
    mu: float
    inputs: np.ndarray   # (n, 6) GP inputs
    targets: np.ndarray  # (n, 3) increments over one dt
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.inputs.shape[0]

    def rollout_length(self) -> int:
        return int(self.meta.get("steps_per_rollout", 1))

    def consecutive_pairs(self):
        """Indices (i_prev, i_cur) of tuple pairs adjacent within one rollout."""
        rl = self.rollout_length()
        pairs = []
        for i in range(1, len(self)):
            if i % rl != 0:
                pairs.append((i - 1, i))
        return pairs


def collect(bounds: SamplingBounds, mu: float, n_tuples: int = 1000, seed: int = 0,
            params: PlantParams | None = None, dt: float = 0.02,
            rollout_time: float = 0.1) -> Dataset:
    """Sample short held-input rollouts until n_tuples tuples are recorded.

    Rollouts that go non-finite are discarded and resampled; if more than 90%
    of attempts diverge the bounds are considered misconfigured.
    """
    if n_tuples < 1:
        raise ValueError("n_tuples must be >= 1")
    params = params or PlantParams()
    rng = np.random.default_rng(seed)
    steps = max(1, int(round(rollout_time / dt)))
    state_box = bounds.state_box()
    input_box = bounds.input_box()

    inputs, targets = [], []
    attempts = failures = 0
    while len(inputs) < n_tuples:
        attempts += 1
        if attempts > 50 and failures / attempts > 0.9:
            raise UnreachableBounds("more than 90%% of rollouts diverged (%d/%d)"
                                    % (failures, attempts))
        sv = rng.uniform(state_box[:, 0], state_box[:, 1])
        su = rng.uniform(input_box[:, 0], input_box[:, 1])
        state = VehicleState(p_x=0.0, p_y=0.0, v_x=sv[0], psi=0.0,
                             v_y=sv[1], omega=sv[2],
                             delta=float(np.clip(sv[3], -params.max_steer, params.max_steer)))
        u = ControlInput(su[0], su[1])
        rows_x, rows_y = [], []
        try:
            for _ in range(steps):
                x_arr = state.to_array()
                nxt = vehicle.plant_step(state, u, params, mu, dt)
                nxt_arr = nxt.to_array()
                rows_x.append(vehicle.gp_input(x_arr, u.to_array()))
                rows_y.append(nxt_arr[list(vehicle.DYNAMIC_ROWS)] - x_arr[list(vehicle.DYNAMIC_ROWS)])
                state = nxt
        except vehicle.NonFiniteState:
            failures += 1
            continue
        keep = min(steps, n_tuples - len(inputs))
        inputs.extend(rows_x[:keep])
        targets.extend(rows_y[:keep])

    meta = {
        "format": DATASET_FORMAT,
        "mu": mu,
        "seed": seed,
        "dt": dt,
        "rollout_time": rollout_time,
        "steps_per_rollout": steps,
        "n_tuples": n_tuples,
        "bounds": asdict(bounds),
        "mode": "random_bounds",
    }
    return Dataset(mu=mu, inputs=np.array(inputs), targets=np.array(targets), meta=meta)


def split(d: Dataset, train_fraction: float, seed: int = 0):
    """Random disjoint train/validation partition at rollout-block granularity.

    Whole rollouts are assigned to one side so that consecutive-tuple pairs
    survive inside each part; the union of the two parts recovers the dataset.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    rl = d.rollout_length()
    n = len(d)
    n_blocks = int(np.ceil(n / rl))
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_blocks)
    n_train_blocks = int(round(train_fraction * n_blocks))
    train_blocks = set(order[:n_train_blocks].tolist())
    tr_idx, va_idx = [], []
    for b in range(n_blocks):
        sel = tr_idx if b in train_blocks else va_idx
        sel.extend(range(b * rl, min((b + 1) * rl, n)))
    def _sub(idx, tag):
        meta = dict(d.meta)
        meta["split"] = {"of": d.meta.get("n_tuples", n), "part": tag,
                         "train_fraction": train_fraction, "seed": seed}
        return Dataset(d.mu, d.inputs[idx], d.targets[idx], meta)
    return _sub(tr_idx, "train"), _sub(va_idx, "val")


def concatenate(datasets) -> Dataset:
    """Union of datasets (for cross-surface training); pair structure is kept per part."""
    rls = {d.rollout_length() for d in datasets}
    if len(rls) != 1:
        raise ValueError("datasets have differing rollout lengths")
    meta = {
        "format": DATASET_FORMAT,
        "mu": [d.mu for d in datasets],
        "steps_per_rollout": rls.pop(),
        "mode": "union",
    }
    return Dataset(
        mu=float(np.mean([d.mu for d in datasets])),
        inputs=np.concatenate([d.inputs for d in datasets]),
        targets=np.concatenate([d.targets for d in datasets]),
        meta=meta,
    )


_COLUMNS = ["vx", "vy", "omega", "delta", "Fx", "delta_dot",
            "d_vx", "d_vy", "d_omega"]


def save_dataset(d: Dataset, path) -> None:
    """CSV with a header row plus a JSON metadata sidecar (<path>.meta.json)."""
    path = str(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(_COLUMNS)
        for xi, yi in zip(d.inputs, d.targets):
            writer.writerow(["%.17g" % v for v in (*xi, *yi)])
    with open(path + ".meta.json", "w") as f:
        json.dump(d.meta, f, indent=1)


def load_dataset(path) -> Dataset:
    path = str(path)
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    data = np.atleast_2d(data)
    with open(path + ".meta.json") as f:
        meta = json.load(f)
    mu = meta["mu"]
    if isinstance(mu, list):
        mu = float(np.mean(mu))
    return Dataset(mu=mu, inputs=data[:, :6], targets=data[:, 6:9], meta=meta)
