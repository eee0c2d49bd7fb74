"""Nonlinear relative motion of the chaser in the target's LVLH frame.

State ordering is ``[x, y, z, vx, vy, vz]`` (m, m/s); ``z`` points from the
target towards the planet centre, so the target sits at ``(0, 0, -R)`` from
the planet.  Controls are accelerations in m/s^2, held constant over a step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .orbit import OrbitalElements, OrbitSample, orbit_state

STATE_NAMES = ("x", "y", "z", "vx", "vy", "vz")
CONTROL_NAMES = ("ux", "uy", "uz")


class SingularityError(ArithmeticError):
    def __init__(self, distance, step=None):
        where = "" if step is None else f" at step {step}"
        super().__init__(f"|R + r| = {distance:.3e} m below singularity guard{where}")
        self.distance = distance
        self.step = step


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray  # (N+1, 6)
    controls: np.ndarray  # (N, 3)
    t_grid: np.ndarray  # (N+1,)

    def __post_init__(self):
        n = len(self.controls)
        if self.states.shape != (n + 1, 6) or self.t_grid.shape != (n + 1,):
            raise ValueError("inconsistent trajectory lengths")

    @property
    def N(self) -> int:
        return len(self.controls)

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("k", "t") + STATE_NAMES + CONTROL_NAMES)
            for k in range(self.N + 1):
                u = [_fmt(v) for v in self.controls[k]] if k < self.N else ["", "", ""]
                w.writerow([k, _fmt(self.t_grid[k])] + [_fmt(v) for v in self.states[k]] + u)
        return path

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with Path(path).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        t = np.array([float(r["t"]) for r in rows])
        states = np.array([[float(r[c]) for c in STATE_NAMES] for r in rows])
        controls = np.array([[float(r[c]) for c in CONTROL_NAMES] for r in rows[:-1]]).reshape(-1, 3)
        return cls(states, controls, t)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


class Frame:
    """Orbit quantities (omega, omega_dot, R) as a function of time.

    With ``freeze_anomaly`` the frame stays at its epoch values, which turns
    the relative dynamics into an autonomous system.
    """

    def __init__(self, elements: OrbitalElements, freeze_anomaly: bool = False):
        self.elements = elements
        self.freeze_anomaly = freeze_anomaly

    def at(self, t):
        t = np.asarray(t, dtype=float)
        if self.freeze_anomaly:
            t = np.zeros_like(t)
        _, _, _, omega, omega_dot, R = orbit_state(self.elements, t)
        return omega, omega_dot, R


def accel(state, u, omega, omega_dot, R, mu, eps_sing=1.0):
    """Time derivative of ``state`` (shape ``(6,)`` or ``(6, n)``)."""
    x, y, z, vx, vy, vz = state
    ux, uy, uz = u
    D2 = x * x + y * y + (z - R) ** 2
    if np.any(D2 <= eps_sing * eps_sing):
        raise SingularityError(float(np.sqrt(np.min(D2))))
    D3 = D2 * np.sqrt(D2)
    # (z - R)/D^3 + 1/R^2 rewritten as z/D^3 + (1 - (D/R)^-3)/R^2 to avoid
    # cancelling two nearly equal terms when r << R
    q = (x * x + y * y + z * (z - 2.0 * R)) / (R * R)
    grav_z = z / D3 - np.expm1(-1.5 * np.log1p(q)) / (R * R)
    w2 = omega * omega
    ax = 2.0 * omega * vz + omega_dot * z + w2 * x - mu * x / D3 + ux
    ay = -mu * y / D3 + uy
    az = w2 * z - 2.0 * omega * vx - omega_dot * x - mu * grav_z + uz
    return np.stack([vx, vy, vz, ax, ay, az])


def vector_field(state, u, sample: OrbitSample, mu: float, eps_sing: float = 1.0) -> np.ndarray:
    state = np.asarray(state, dtype=float)
    u = np.asarray(u, dtype=float)
    return accel(state, u, sample.omega, sample.omega_dot, sample.R, mu, eps_sing)


def _rk4(f, x, u, T, frames):
    (w0, wd0, R0), (w1, wd1, R1), (w2, wd2, R2) = frames
    k1 = f(x, u, w0, wd0, R0)
    k2 = f(x + 0.5 * T * k1, u, w1, wd1, R1)
    k3 = f(x + 0.5 * T * k2, u, w1, wd1, R1)
    k4 = f(x + T * k3, u, w2, wd2, R2)
    return x + (T / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(state, u, t: float, T: float, elements: OrbitalElements,
             freeze_anomaly: bool = False, eps_sing: float = 1.0) -> np.ndarray:
    """One classical RK4 step with the control held over the interval.

    The frame is sampled at t, t+T/2 and t+T for the four stages.
    """
    if T <= 0:
        raise ValueError("step T must be positive")
    frame = Frame(elements, freeze_anomaly)
    w, wd, R = frame.at([t, t + 0.5 * T, t + T])
    f = lambda x, uu, a, b, c: accel(x, uu, a, b, c, elements.mu, eps_sing)  # noqa: E731
    frames = [(w[i], wd[i], R[i]) for i in range(3)]
    return _rk4(f, np.asarray(state, dtype=float), np.asarray(u, dtype=float), T, frames)


def _stage_frames(elements, T, N, freeze_anomaly, t0=0.0):
    times = t0 + 0.5 * T * np.arange(2 * N + 1)
    return Frame(elements, freeze_anomaly).at(times)


def rollout(x0, controls, elements: OrbitalElements, T: float, N: int | None = None,
            freeze_anomaly: bool = False, eps_sing: float = 1.0, t0: float = 0.0) -> Trajectory:
    """Propagate ``x0`` through ``N`` RK4 steps under ``controls`` (shape (N, 3))."""
    controls = np.asarray(controls, dtype=float).reshape(-1, 3)
    if N is None:
        N = len(controls)
    if len(controls) != N:
        raise ValueError(f"expected {N} controls, got {len(controls)}")
    if T <= 0:
        raise ValueError("step T must be positive")
    states = np.empty((N + 1, 6))
    states[0] = x0
    if N:
        w, wd, R = _stage_frames(elements, T, N, freeze_anomaly, t0)
        mu = elements.mu
        f = lambda x, uu, a, b, c: accel(x, uu, a, b, c, mu, eps_sing)  # noqa: E731
        for k in range(N):
            i = 2 * k
            frames = [(w[i], wd[i], R[i]), (w[i + 1], wd[i + 1], R[i + 1]), (w[i + 2], wd[i + 2], R[i + 2])]
            try:
                states[k + 1] = _rk4(f, states[k], controls[k], T, frames)
            except SingularityError as exc:
                raise SingularityError(exc.distance, step=k) from None
    t_grid = t0 + T * np.arange(N + 1)
    return Trajectory(states, controls, t_grid)


def rollout_batch(X0, U, elements: OrbitalElements, T: float, freeze_anomaly: bool = False,
                  eps_sing: float = 1.0, t0: float = 0.0):
    """Propagate many trajectories that share one time grid.

    ``X0`` is ``(6, n)`` and ``U`` is ``(N, 3, n)``.  Returns ``(states, valid)``
    where ``states`` is ``(N+1, 6, n)`` and ``valid[k, j]`` is False once
    trajectory ``j`` came within ``eps_sing`` of the planet centre (its later
    states are NaN).
    """
    X0 = np.asarray(X0, dtype=float)
    U = np.asarray(U, dtype=float)
    N = U.shape[0]
    n = X0.shape[1]
    states = np.full((N + 1, 6, n), np.nan)
    states[0] = X0
    alive = np.ones(n, dtype=bool)
    valid = np.zeros((N + 1, n), dtype=bool)
    valid[0] = True
    if N == 0:
        return states, valid
    w, wd, R = _stage_frames(elements, T, N, freeze_anomaly, t0)
    mu = elements.mu

    def f(x, uu, a, b, c):
        # NaN-free guard: flag offenders instead of raising
        D2 = x[0] ** 2 + x[1] ** 2 + (x[2] - c) ** 2
        bad = ~(D2 > eps_sing * eps_sing)
        if np.any(bad):
            x = np.where(bad, np.array([[0.0]] * 6), x)
        out = accel(x, uu, a, b, c, mu, 0.0)
        f.bad |= bad
        return out

    for k in range(N):
        i = 2 * k
        f.bad = np.zeros(n, dtype=bool)
        nxt = _rk4(f, states[k], U[k], T,
                   [(w[i], wd[i], R[i]), (w[i + 1], wd[i + 1], R[i + 1]), (w[i + 2], wd[i + 2], R[i + 2])])
        alive &= ~f.bad & np.all(np.isfinite(nxt), axis=0)
        states[k + 1] = np.where(alive, nxt, np.nan)
        valid[k + 1] = alive
    return states, valid
