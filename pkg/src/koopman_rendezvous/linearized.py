"""Relative motion linearised about an eccentric target orbit: continuous matrices, exact
discretisation by state-transition integration, and the terminal map
``x(N) = C_N u + beta``."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .orbit import OrbitalElements, OrbitSample, orbit_state

B_C = np.vstack([np.zeros((3, 3)), np.eye(3)])


@dataclass(frozen=True)
class DiscreteLinearModel:
    A_seq: np.ndarray  # (N, 6, 6)
    B_seq: np.ndarray  # (N, 6, 3)
    T: float

    @property
    def N(self) -> int:
        return len(self.A_seq)

    def step(self, x, u, k):
        return self.A_seq[k] @ x + self.B_seq[k] @ u

    def save(self, path) -> Path:
        path = Path(path)
        doc = {"schema_version": 1, "kind": "discrete_linear_model", "T": self.T, "N": self.N,
               "A_seq": self.A_seq.tolist(), "B_seq": self.B_seq.tolist()}
        path.write_text(json.dumps(doc))
        return path

    @classmethod
    def load(cls, path) -> "DiscreteLinearModel":
        doc = json.loads(Path(path).read_text())
        return cls(np.array(doc["A_seq"], dtype=float), np.array(doc["B_seq"], dtype=float), float(doc["T"]))


def _a_c(omega, omega_dot, k):
    omega = np.asarray(omega, dtype=float)
    omega_dot = np.broadcast_to(np.asarray(omega_dot, dtype=float), omega.shape)
    A = np.zeros(omega.shape + (6, 6))
    A[..., 0, 3] = A[..., 1, 4] = A[..., 2, 5] = 1.0
    g = k * omega ** 1.5  # mu / R^3
    w2 = omega * omega
    A[..., 3, 0] = w2 - g
    A[..., 3, 2] = omega_dot
    A[..., 4, 1] = -g
    A[..., 5, 0] = -omega_dot
    A[..., 5, 2] = w2 + 2.0 * g
    A[..., 3, 5] = 2.0 * omega
    A[..., 5, 3] = -2.0 * omega
    return A


def continuous_matrices(sample: OrbitSample, k: float):
    """``(A_c, B_c)`` of the linearised model at one orbit sample."""
    return _a_c(sample.omega, sample.omega_dot, k), B_C.copy()


def discretize(elements: OrbitalElements, T: float, N: int, substeps: int = 10,
               freeze_anomaly: bool = False, t0: float = 0.0) -> DiscreteLinearModel:
    """Discrete ``A(k) = Phi(t_{k+1}, t_k)`` and ``B(k) = int Phi(t_{k+1}, s) B_c ds``.

    Phi is integrated with ``substeps`` RK4 steps per interval; B uses
    composite Simpson on the same nodes (``substeps`` must be even).
    """
    if T <= 0 or N < 1:
        raise ValueError("need T > 0 and N >= 1")
    if substeps % 2:
        raise ValueError("Simpson quadrature needs an even number of panels")
    h = T / substeps
    # every half substep of every interval, shared endpoints included
    times = t0 + 0.5 * h * np.arange(2 * substeps * N + 1)
    if freeze_anomaly:
        times = np.zeros_like(times)
    _, _, _, omega, omega_dot, _ = orbit_state(elements, times)
    Ac = _a_c(omega, omega_dot, elements.k)

    stride = 2 * substeps
    base = np.arange(N) * stride
    Phi = np.broadcast_to(np.eye(6), (N, 6, 6)).copy()
    nodes = [Phi.copy()]  # Phi(t_k + j h, t_k)
    for j in range(substeps):
        A0 = Ac[base + 2 * j]
        Am = Ac[base + 2 * j + 1]
        A1 = Ac[base + 2 * j + 2]
        k1 = A0 @ Phi
        k2 = Am @ (Phi + 0.5 * h * k1)
        k3 = Am @ (Phi + 0.5 * h * k2)
        k4 = A1 @ (Phi + h * k3)
        Phi = Phi + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        nodes.append(Phi.copy())
    A_seq = Phi
    # Phi(t_{k+1}, s_j) B_c = Phi(t_{k+1}, t_k) Phi(s_j, t_k)^{-1} B_c
    simpson = np.ones(substeps + 1)
    simpson[1:-1:2] = 4.0
    simpson[2:-1:2] = 2.0
    simpson *= h / 3.0
    B_seq = np.zeros((N, 6, 3))
    for j, node in enumerate(nodes):
        B_seq += simpson[j] * (A_seq @ np.linalg.solve(node, np.broadcast_to(B_C, (N, 6, 3))))
    return DiscreteLinearModel(A_seq, B_seq, T)


def phi_d(model: DiscreteLinearModel, k: int, m: int) -> np.ndarray:
    """Discrete transition ``A(k-1) ... A(m)``; identity when ``k == m``."""
    if k < m:
        raise ValueError("need k >= m")
    P = np.eye(6)
    for i in range(m, k):
        P = model.A_seq[i] @ P
    return P


def terminal_map(model: DiscreteLinearModel, x0):
    """``(C_N, beta)`` such that ``x(N) = C_N u + beta`` for stacked ``u``."""
    N = model.N
    C = np.empty((6, 3 * N))
    P = np.eye(6)  # Phi_d(N, tau + 1)
    for tau in range(N - 1, -1, -1):
        C[:, 3 * tau:3 * tau + 3] = P @ model.B_seq[tau]
        P = P @ model.A_seq[tau]
    beta = P @ np.asarray(x0, dtype=float)
    return C, beta


def solve_linear_controller(C, beta, x_f, irls_config=None):
    from .sparse_solver import irls_solve

    return irls_solve(C, beta, np.asarray(x_f, dtype=float), irls_config)
