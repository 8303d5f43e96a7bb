"""Track files, reference-trajectory lookup, and track/maneuver builders.

A track is an ordered list of waypoints (s, x, y, psi, v_ref) plus a
piecewise-constant friction map and a closed-loop flag, stored as CSV with a
small commented JSON header.  ReferenceTrajectory wraps a track for the
controller: nearest-point location, signed lateral error, and horizon
references with headings unwrapped against the vehicle heading.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from egpmpc.vehicle import GRAVITY, NX, IDX_VX, FrictionMap

TRACK_FORMAT = "track-v1"


@dataclass
class TrackFile:
    s: np.ndarray
    x: np.ndarray
    y: np.ndarray
    psi: np.ndarray          # unwrapped along s
    v_ref: np.ndarray
    friction: FrictionMap
    closed: bool = True
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("s", "x", "y", "psi", "v_ref"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        validate_track(self)

    @property
    def length(self) -> float:
        if self.closed:
            return float(self.s[-1] + np.hypot(self.x[0] - self.x[-1],
                                               self.y[0] - self.y[-1]))
        return float(self.s[-1])


def validate_track(track: TrackFile) -> None:
    if not np.all(np.diff(track.s) > 0):
        raise ValueError("track arc length must be strictly increasing")
    dx = np.diff(track.x)
    dy = np.diff(track.y)
    tangent = np.arctan2(dy, dx)
    mid_psi = 0.5 * (track.psi[:-1] + track.psi[1:])
    err = np.abs(np.angle(np.exp(1j * (tangent - mid_psi))))
    if np.max(err) > 0.1:
        raise ValueError("waypoint headings inconsistent with tangents (max %.3f rad)"
                         % float(np.max(err)))


def save_track(track: TrackFile, path) -> None:
    header = {
        "format": TRACK_FORMAT,
        "closed": track.closed,
        "friction_mode": track.friction.mode,
        "friction_segments": track.friction.segments,
        **track.meta,
    }
    with open(path, "w", newline="") as f:
        f.write("# " + json.dumps(header) + "\n")
        writer = csv.writer(f)
        writer.writerow(["s", "x", "y", "psi", "v_ref"])
        for row in zip(track.s, track.x, track.y, track.psi, track.v_ref):
            writer.writerow(["%.17g" % v for v in row])


def load_track(path) -> TrackFile:
    with open(path) as f:
        first = f.readline()
        if not first.startswith("# "):
            raise ValueError("missing track header line")
        header = json.loads(first[2:])
        if header.get("format") != TRACK_FORMAT:
            raise ValueError("unrecognized track format")
        data = np.loadtxt(f, delimiter=",", skiprows=1)
    fmap = FrictionMap(header["friction_segments"], mode=header["friction_mode"])
    meta = {k: v for k, v in header.items()
            if k not in ("format", "closed", "friction_mode", "friction_segments")}
    return TrackFile(s=data[:, 0], x=data[:, 1], y=data[:, 2], psi=data[:, 3],
                     v_ref=data[:, 4], friction=fmap, closed=bool(header["closed"]),
                     meta=meta)


class ReferenceTrajectory:
    """Controller-facing view of a track: location queries and horizon references."""

    def __init__(self, track: TrackFile, end_margin: float = 5.0):
        self.track = track
        self.closed = track.closed
        self.length = track.length
        self.end_s = track.s[-1] - end_margin if not track.closed else np.inf
        self._xy = np.column_stack([track.x, track.y])
        if track.closed:
            # sentinel row at s = length closing the loop
            self._s = np.concatenate([track.s, [self.length]])
            self._x = np.concatenate([track.x, [track.x[0]]])
            self._y = np.concatenate([track.y, [track.y[0]]])
            winding = track.meta.get("winding", 2.0 * np.pi)
            self._psi = np.concatenate([track.psi, [track.psi[0] + winding]])
            self._v = np.concatenate([track.v_ref, [track.v_ref[0]]])
            self._winding = self._psi[-1] - self._psi[0]
        else:
            self._s = track.s
            self._x, self._y, self._psi, self._v = track.x, track.y, track.psi, track.v_ref
            self._winding = 0.0

    # -- location ------------------------------------------------------------

    def locate(self, state_arr: np.ndarray):
        """(s, signed lateral error, speed error) at the nearest path point."""
        p = state_arr[:2]
        d2 = np.sum((self._xy - p[None, :]) ** 2, axis=1)
        i = int(np.argmin(d2))
        best = None
        n = self._xy.shape[0]
        for j in (i - 1, i):
            if j < 0 or (j >= n - 1 and not self.closed):
                continue
            a = self._xy[j % n]
            b = self._xy[(j + 1) % n]
            seg = b - a
            seg_len2 = float(seg @ seg)
            if seg_len2 < 1e-12:
                continue
            t = float(np.clip((p - a) @ seg / seg_len2, 0.0, 1.0))
            proj = a + t * seg
            dist2 = float(np.sum((p - proj) ** 2))
            if best is None or dist2 < best[0]:
                s_here = self.track.s[j % n] + t * np.sqrt(seg_len2)
                lat = float(np.cross(seg / np.sqrt(seg_len2), p - proj))
                best = (dist2, s_here % self.length if self.closed else s_here, lat)
        _, s_here, lat = best
        v_err = float(state_arr[IDX_VX] - self.v_ref_at(s_here))
        return s_here, lat, v_err

    def advance(self, s_prev: float, s_now: float) -> float:
        ds = s_now - s_prev
        if self.closed:
            half = 0.5 * self.length
            ds = (ds + half) % self.length - half
        return ds

    # -- interpolation -------------------------------------------------------

    def _wrap_s(self, s):
        return np.mod(s, self.length) if self.closed else np.clip(s, self._s[0], self._s[-1])

    def v_ref_at(self, s):
        return np.interp(self._wrap_s(s), self._s, self._v)

    def mu_at(self, s) -> float:
        return self.track.friction.lookup(float(self._wrap_s(np.asarray(s))))

    def pose_at(self, s):
        sw = self._wrap_s(s)
        x = np.interp(sw, self._s, self._x)
        y = np.interp(sw, self._s, self._y)
        psi = np.interp(sw, self._s, self._psi)
        if self.closed:
            psi = psi + self._winding * np.floor(np.asarray(s) / self.length)
        return x, y, psi

    def horizon_states(self, s0: float, psi_now: float, t_hor: int, dt: float) -> np.ndarray:
        """(T+1, 7) reference rows [x, y, v_ref, psi, 0, 0, 0] along the path.

        Arc length advances with the reference speed; headings are unwrapped
        and shifted onto the branch nearest the current vehicle heading.
        """
        s_vals = np.empty(t_hor + 1)
        s_vals[0] = s0
        for t in range(t_hor):
            s_vals[t + 1] = s_vals[t] + max(self.v_ref_at(s_vals[t]), 0.1) * dt
        x, y, psi = self.pose_at(s_vals)
        psi = np.unwrap(np.atleast_1d(psi))
        psi += 2.0 * np.pi * np.round((psi_now - psi[0]) / (2.0 * np.pi))
        ref = np.zeros((t_hor + 1, NX))
        ref[:, 0] = x
        ref[:, 1] = y
        ref[:, 2] = self.v_ref_at(s_vals)
        ref[:, 3] = psi
        return ref


# -- builders -----------------------------------------------------------------

def _segment_centerline(segments, spacing):
    """Sample a centerline from ('straight', L) / ('arc', R, angle) segments."""
    pts = [(0.0, 0.0)]
    psis = [0.0]
    curvs = [0.0 if segments[0][0] == "straight"
             else np.sign(segments[0][2]) / segments[0][1]]
    x = y = psi = 0.0
    for seg in segments:
        if seg[0] == "straight":
            length, curv = seg[1], 0.0
        elif seg[0] == "arc":
            radius, angle = seg[1], seg[2]
            length = abs(angle) * radius
            curv = np.sign(angle) / radius
        else:
            raise ValueError("unknown segment kind %r" % (seg[0],))
        n = max(2, int(np.ceil(length / spacing)))
        step = length / n
        for _ in range(n):
            if curv == 0.0:
                x += step * np.cos(psi)
                y += step * np.sin(psi)
            else:
                dpsi = curv * step
                r = 1.0 / curv
                x += r * (np.sin(psi + dpsi) - np.sin(psi))
                y += r * (-np.cos(psi + dpsi) + np.cos(psi))
                psi += dpsi
            pts.append((x, y))
            psis.append(psi)
            curvs.append(curv)
    xy = np.array(pts)
    s = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(xy[:, 0]), np.diff(xy[:, 1])))])
    return s, xy[:, 0], xy[:, 1], np.array(psis), np.array(curvs)


def speed_profile(s, curvature, mu_of_s, margin: float = 0.85, v_cap: float = 20.0,
                  a_long: float = 3.5, closed: bool = True, v_end: float | None = None):
    """Curvature/friction-limited speed with forward/backward acceleration passes."""
    mu = np.array([mu_of_s(si) for si in s])
    with np.errstate(divide="ignore"):
        v_lim = np.sqrt(margin * mu * GRAVITY / np.maximum(np.abs(curvature), 1e-9))
    v = np.minimum(v_lim, v_cap)
    if v_end is not None:
        v[-1] = min(v[-1], v_end)
    ds = np.diff(s)
    n = len(s)
    sweeps = 3 if closed else 1
    for _ in range(sweeps):
        for i in range(n - 1):  # forward: acceleration limit
            v[i + 1] = min(v[i + 1], np.sqrt(v[i] ** 2 + 2 * a_long * ds[i]))
        if closed:
            v[0] = min(v[0], np.sqrt(v[-1] ** 2 + 2 * a_long * (s[1] - s[0])))
        for i in range(n - 1, 0, -1):  # backward: braking limit
            v[i - 1] = min(v[i - 1], np.sqrt(v[i] ** 2 + 2 * a_long * ds[i - 1]))
        if closed:
            v[-1] = min(v[-1], np.sqrt(v[0] ** 2 + 2 * a_long * ds[-1]))
    return v


def build_loop_track(segments, friction_segments, spacing: float = 1.0,
                     margin: float = 0.85, v_cap: float = 20.0, a_long: float = 3.5,
                     name: str = "loop") -> TrackFile:
    """Closed circuit from geometric segments with a zone-aware speed profile."""
    s, x, y, psi, curv = _segment_centerline(segments, spacing)
    gap = np.hypot(x[-1] - x[0], y[-1] - y[0])
    total_turn = psi[-1] - psi[0]
    if gap > 0.5:
        raise ValueError("segments do not close the loop (gap %.3f m)" % gap)
    if abs(abs(total_turn) - 2 * np.pi) > 0.05:
        raise ValueError("closed loop must turn by +-2pi (got %.3f)" % total_turn)
    # drop the duplicated closure point
    s, x, y, psi, curv = s[:-1], x[:-1], y[:-1], psi[:-1], curv[:-1]
    fmap = FrictionMap(friction_segments, mode="arclength")
    v = speed_profile(s, curv, fmap.lookup, margin=margin, v_cap=v_cap,
                      a_long=a_long, closed=True)
    return TrackFile(s=s, x=x, y=y, psi=psi, v_ref=v, friction=fmap, closed=True,
                     meta={"name": name, "winding": float(round(total_turn / (2 * np.pi)) * 2 * np.pi),
                           "margin": margin})


def quintic_blend(tau):
    """C2 smoothstep (zero first/second derivatives at both ends)."""
    tau = np.clip(tau, 0.0, 1.0)
    return tau**3 * (10.0 - 15.0 * tau + 6.0 * tau**2)


def build_lane_change_track(v_ref: float, friction_segments,
                            entry: float = 60.0, shift_out: float = 35.0,
                            hold: float = 70.0, shift_back: float = 35.0,
                            exit_len: float = 90.0, offset: float = 3.5,
                            spacing: float = 0.5, name: str = "lane_change") -> TrackFile:
    """Dual-lane-change reference: lateral offset out and back, constant speed.

    Friction segments are keyed to longitudinal position (position_x mode).
    """
    x_end = entry + shift_out + hold + shift_back + exit_len
    x = np.arange(0.0, x_end + spacing, spacing)
    y = np.zeros_like(x)
    m1 = (x >= entry) & (x < entry + shift_out)
    y[m1] = offset * quintic_blend((x[m1] - entry) / shift_out)
    m2 = (x >= entry + shift_out) & (x < entry + shift_out + hold)
    y[m2] = offset
    x3 = entry + shift_out + hold
    m3 = (x >= x3) & (x < x3 + shift_back)
    y[m3] = offset * (1.0 - quintic_blend((x[m3] - x3) / shift_back))
    dy = np.gradient(y, x)
    psi = np.arctan(dy)
    s = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(x), np.diff(y)))])
    fmap = FrictionMap(friction_segments, mode="position_x")
    v = np.full_like(x, v_ref)
    return TrackFile(s=s, x=x, y=y, psi=psi, v_ref=v, friction=fmap, closed=False,
                     meta={"name": name, "offset": offset,
                           "sections": {"entry": entry, "shift_out": shift_out,
                                        "hold": hold, "shift_back": shift_back,
                                        "exit": exit_len}})
