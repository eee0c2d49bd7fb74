"""Target orbit propagation: Kepler's equation, anomaly conversions and the
time-varying quantities (rho, omega, omega_dot, R) that drive the LVLH frame."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MU_EARTH = 3.986004418e14
TWO_PI = 2.0 * math.pi


class KeplerConvergenceError(RuntimeError):
    """Raised when the Kepler solve fails to reach tolerance."""

    def __init__(self, residual: float):
        super().__init__(f"Kepler iteration did not converge (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class OrbitalElements:
    semimajor_axis_m: float
    eccentricity: float
    mu: float = MU_EARTH
    nu0: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.eccentricity < 1.0:
            raise ValueError(f"eccentricity must lie in [0, 1), got {self.eccentricity}")
        if self.semimajor_axis_m <= 0.0 or self.mu <= 0.0:
            raise ValueError("semimajor axis and mu must be positive")

    @property
    def h(self) -> float:
        """Specific angular momentum."""
        e = self.eccentricity
        return math.sqrt(self.mu * self.semimajor_axis_m * (1.0 - e * e))

    @property
    def k(self) -> float:
        return self.mu / self.h ** 1.5

    @property
    def period(self) -> float:
        return TWO_PI * math.sqrt(self.semimajor_axis_m ** 3 / self.mu)

    @property
    def mean_motion(self) -> float:
        return TWO_PI / self.period

    @property
    def mean_anomaly0(self) -> float:
        return eccentric_to_mean(true_to_eccentric(self.nu0, self.eccentricity), self.eccentricity)


@dataclass(frozen=True)
class OrbitSample:
    t: float
    nu: float
    E: float
    rho: float
    omega: float
    omega_dot: float
    R: float


def eccentric_to_mean(E, e):
    return E - e * np.sin(E)


def _newton_kepler(M, e, E0, max_iter):
    E = E0
    for _ in range(max_iter):
        f = E - e * np.sin(E) - M
        E = E - f / (1.0 - e * np.cos(E))
    return E


def _bisect_kepler(M, e, iters=200):
    # E - e sin E - M is increasing on [0, 2pi] and brackets every reduced M
    lo = np.zeros_like(M)
    hi = np.full_like(M, TWO_PI)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        f = mid - e * np.sin(mid) - M
        lo = np.where(f < 0.0, mid, lo)
        hi = np.where(f < 0.0, hi, mid)
    return 0.5 * (lo + hi)


def solve_kepler(M, e, tol: float = 1e-12, max_iter: int = 50):
    """Solve ``M = E - e sin E`` for the eccentric anomaly.

    M may be a scalar or array and is reduced modulo 2*pi; the returned E
    carries the same number of whole revolutions as M, so E(M) is continuous.
    Newton iteration starts from M (e < 0.8) or pi, with a bisection fallback
    for entries that do not converge.
    """
    e = float(e)
    if not 0.0 <= e < 1.0:
        raise ValueError(f"eccentricity must lie in [0, 1), got {e}")
    M_arr = np.asarray(M, dtype=float)
    turns = np.floor(M_arr / TWO_PI)
    Mr = M_arr - TWO_PI * turns
    E0 = Mr.copy() if e < 0.8 else np.full_like(Mr, math.pi)
    E = _newton_kepler(Mr, e, E0, max_iter)
    res = np.abs(E - e * np.sin(E) - Mr)
    bad = ~np.isfinite(E) | (res > tol)
    if np.any(bad):
        E = np.where(bad, _bisect_kepler(Mr, e), E)
        # polish bisection output with a couple of Newton steps
        E = np.where(bad, _newton_kepler(Mr, e, E, 3), E)
        res = np.abs(E - e * np.sin(E) - Mr)
        if np.any(res > tol):
            raise KeplerConvergenceError(float(np.max(res)))
    E = E + TWO_PI * turns
    if np.ndim(M) == 0:
        return float(E)
    return E


def eccentric_to_true(E, e):
    """True anomaly from eccentric anomaly, unwrapped to the same revolution as E."""
    beta = math.sqrt(1.0 - e * e)
    s = beta * np.sin(E)
    c = np.cos(E) - e
    nu = np.arctan2(s, c)
    # keep nu within pi of E so revolutions carry over
    nu = nu + TWO_PI * np.round((np.asarray(E) - nu) / TWO_PI)
    return float(nu) if np.ndim(nu) == 0 else nu


def true_to_eccentric(nu, e):
    beta = math.sqrt(1.0 - e * e)
    denom = 1.0 + e * np.cos(nu)
    s = beta * np.sin(nu) / denom
    c = (e + np.cos(nu)) / denom
    E = np.arctan2(s, c)
    E = E + TWO_PI * np.round((np.asarray(nu) - E) / TWO_PI)
    return float(E) if np.ndim(E) == 0 else E


def orbit_state(elements: OrbitalElements, t):
    """Vectorised orbit quantities at times ``t``.

    Returns ``(nu, E, rho, omega, omega_dot, R)`` as arrays (or floats).
    """
    e = elements.eccentricity
    k = elements.k
    M = elements.mean_anomaly0 + elements.mean_motion * np.asarray(t, dtype=float)
    E = solve_kepler(M, e)
    nu = eccentric_to_true(E, e)
    rho = 1.0 + e * np.cos(nu)
    omega = k * k * rho * rho
    # d(k^2 rho^2)/dt with nu_dot = omega
    omega_dot = -2.0 * k ** 4 * rho ** 3 * e * np.sin(nu)
    R = elements.h ** 2 / (elements.mu * rho)
    return nu, E, rho, omega, omega_dot, R


def sample_orbit(elements: OrbitalElements, t: float) -> OrbitSample:
    if t < 0:
        raise ValueError("t must be non-negative")
    nu, E, rho, omega, omega_dot, R = orbit_state(elements, float(t))
    return OrbitSample(float(t), float(nu), float(E), float(rho), float(omega), float(omega_dot), float(R))
