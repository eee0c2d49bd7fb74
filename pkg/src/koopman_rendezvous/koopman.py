"""Koopman lifting of the relative dynamics and its data-driven (EDMD with
control) fit.

All lifted quantities live in normalised coordinates: positions divided by
``L_ref``, velocities by ``V_ref`` and accelerations by ``U_ref = V_ref**2 / L_ref``.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .dynamics import rollout_batch
from .orbit import OrbitalElements

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
N_FIXED = 19  # identity + hand-picked observables before the radial-basis ones


class SchemaError(ValueError):
    pass


class SingularObservableError(ArithmeticError):
    pass


class RankDeficiencyWarning(RuntimeWarning):
    pass


def substream(seed: int, index: int) -> np.random.Generator:
    """Independent Philox (counter-based) stream ``index`` derived from ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(index),))))


# stream 0 seeds the RBF centres, stream 1 + j drives training trajectory j
CENTER_STREAM = 0


@dataclass(frozen=True)
class Normalization:
    L_ref: float = 1.0
    V_ref: float = 1.0

    def __post_init__(self):
        if not (self.L_ref > 0 and self.V_ref > 0):
            raise ValueError("normalisation scales must be positive")

    @property
    def U_ref(self) -> float:
        return self.V_ref * self.V_ref / self.L_ref

    @property
    def state_scale(self) -> np.ndarray:
        return np.array([self.L_ref] * 3 + [self.V_ref] * 3)

    def to_unit(self, x):
        x = np.asarray(x, dtype=float)
        s = self.state_scale
        return x / (s[:, None] if x.ndim == 2 else s)

    def from_unit(self, xn):
        xn = np.asarray(xn, dtype=float)
        s = self.state_scale
        return xn * (s[:, None] if xn.ndim == 2 else s)


@dataclass(frozen=True, eq=False)
class ObservableBank:
    n_lift: int
    r_ref: float  # normalised length in the shifted-centre observables
    rbf_seed: int
    rbf_centers: np.ndarray  # (n_lift - 19, 6)
    normalization: Normalization = field(default_factory=Normalization)

    def __post_init__(self):
        if self.n_lift < 6:
            raise ValueError("n_lift must be at least 6 (the identity observables)")
        if self.rbf_centers.shape != (max(self.n_lift - N_FIXED, 0), 6):
            raise SchemaError("rbf_centers shape does not match n_lift")

    def __eq__(self, other):
        return (isinstance(other, ObservableBank) and self.n_lift == other.n_lift
                and self.r_ref == other.r_ref and self.rbf_seed == other.rbf_seed
                and np.array_equal(self.rbf_centers, other.rbf_centers)
                and self.normalization == other.normalization)


def make_bank(n_lift: int = 120, r_ref: float = 1.0, seed: int = 0,
              normalization: Normalization | None = None) -> ObservableBank:
    n_rbf = max(n_lift - N_FIXED, 0)
    centers = substream(seed, CENTER_STREAM).uniform(-1.0, 1.0, size=(n_rbf, 6))
    return ObservableBank(n_lift, float(r_ref), int(seed), centers, normalization or Normalization())


def lift_normalized(bank: ObservableBank, Xn) -> np.ndarray:
    """Evaluate the observables on normalised states ``(6,)`` or ``(6, d)``."""
    Xn = np.asarray(Xn, dtype=float)
    single = Xn.ndim == 1
    if single:
        Xn = Xn[:, None]
    x, y, z, vx, vy, vz = Xn
    d = Xn.shape[1]
    out = np.empty((bank.n_lift, d))
    out[:6] = Xn
    if bank.n_lift > 6:
        fixed = np.empty((13, d))
        f = (1.0 + x * x + y * y + z * z) ** -1.5
        fixed[0] = f
        fixed[1:7] = np.stack([vx, vy, vz, x, y, z]) * f
        zs = z - bank.r_ref
        D2 = x * x + y * y + zs * zs
        if np.any(D2 <= 0.0):
            raise SingularObservableError("state sits on the singular point of the shifted observables")
        D = np.sqrt(D2)
        fixed[7:10] = np.stack([x * x * vx, y * y * vy, z * zs * vz]) / (D2 * D2 * D)
        fixed[10:13] = np.stack([x, y, z]) / (D2 * D)
        n_fixed = min(bank.n_lift, N_FIXED) - 6
        out[6:6 + n_fixed] = fixed[:n_fixed]
    if bank.n_lift > N_FIXED:
        sq = np.sum(Xn * Xn, axis=0)
        alpha = sq[None, :] - np.sum(bank.rbf_centers ** 2, axis=1)[:, None]
        out[N_FIXED:] = 1.0 / np.sqrt(1.0 + alpha * alpha)
    return out[:, 0] if single else out


def lift(bank: ObservableBank, state) -> np.ndarray:
    """Lift a physical state (SI units)."""
    return lift_normalized(bank, bank.normalization.to_unit(state))


@dataclass(frozen=True)
class TrainingData:
    X: np.ndarray  # (6, d) normalised states
    U: np.ndarray  # (3, d) normalised controls
    Y: np.ndarray  # (6, d) normalised successors
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        d = self.X.shape[1]
        if self.X.shape != (6, d) or self.U.shape != (3, d) or self.Y.shape != (6, d):
            raise ValueError("inconsistent training data shapes")

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def save(self, path) -> Path:
        path = Path(path)
        with path.open("wb") as fh:
            np.savez(fh, X=self.X, U=self.U, Y=self.Y, meta=json.dumps(self.meta, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "TrainingData":
        with np.load(path) as f:
            return cls(f["X"], f["U"], f["Y"], json.loads(str(f["meta"])))


def generate_training_data(elements: OrbitalElements, bank: ObservableBank, n_traj: int, n_steps: int,
                           T: float, seed: int, u_scale: float = 1.0, freeze_anomaly: bool = False,
                           eps_sing: float = 1.0, batch: int = 250) -> TrainingData:
    """Random-input rollouts of the nonlinear plant, returned in normalised units.

    Each trajectory starts at the orbit epoch from a state drawn uniformly in
    [-1, 1]^6 (normalised) and is driven by controls uniform in
    [-u_scale, u_scale]^3.  Trajectory ``j`` draws from its own substream, so
    the data does not depend on ``batch``.  A trajectory that hits the
    singularity keeps only the steps before the failure.
    """
    if n_traj < 1 or n_steps < 1:
        raise ValueError("need n_traj >= 1 and n_steps >= 1")
    norm = bank.normalization
    s = norm.state_scale[:, None]
    Xs, Us, Ys = [], [], []
    dropped = 0
    for b0 in range(0, n_traj, batch):
        js = range(b0, min(b0 + batch, n_traj))
        x0 = np.empty((6, len(js)))
        U = np.empty((n_steps, 3, len(js)))
        for i, j in enumerate(js):
            g = substream(seed, 1 + j)
            x0[:, i] = g.uniform(-1.0, 1.0, size=6)
            U[:, :, i] = u_scale * g.uniform(-1.0, 1.0, size=(n_steps, 3))
        states, valid = rollout_batch(x0 * s, U * norm.U_ref, elements, T,
                                      freeze_anomaly=freeze_anomaly, eps_sing=eps_sing)
        states = states / s[None]
        for i, j in enumerate(js):
            n_ok = int(np.sum(valid[1:, i]))
            if n_ok < n_steps:
                dropped += 1
                log.warning("training trajectory %d truncated at step %d (singularity)", j, n_ok)
            Xs.append(states[:n_ok, :, i].T)
            Ys.append(states[1:n_ok + 1, :, i].T)
            Us.append(U[:n_ok, :, i].T)
    meta = {"n_traj": n_traj, "n_steps": n_steps, "T": T, "data_seed": int(seed), "u_scale": u_scale,
            "freeze_anomaly": bool(freeze_anomaly), "truncated_trajectories": dropped}
    return TrainingData(np.concatenate(Xs, axis=1), np.concatenate(Us, axis=1), np.concatenate(Ys, axis=1), meta)


@dataclass(frozen=True, eq=False)
class KoopmanModel:
    A: np.ndarray  # (n_lift, n_lift)
    B: np.ndarray  # (n_lift, m)
    bank: ObservableBank
    fit_residual: float
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.bank.n_lift
        if self.A.shape != (n, n) or self.B.ndim != 2 or self.B.shape[0] != n:
            raise SchemaError("Koopman matrices do not match the observable bank")

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def __eq__(self, other):
        return (isinstance(other, KoopmanModel) and np.array_equal(self.A, other.A)
                and np.array_equal(self.B, other.B) and self.bank == other.bank
                and self.fit_residual == other.fit_residual and self.training_meta == other.training_meta)


def _lift_chunks(data: TrainingData, bank: ObservableBank, chunk: int):
    for c0 in range(0, data.d, chunk):
        sl = slice(c0, c0 + chunk)
        Z = np.vstack([lift_normalized(bank, data.X[:, sl]), data.U[:, sl]])
        yield Z, lift_normalized(bank, data.Y[:, sl])


def fit(data: TrainingData, bank: ObservableBank, rcond: float = 1e-10, chunk: int = 20000) -> KoopmanModel:
    """Least-squares ``[A, B] = Y_lift pinv([X_lift; U])``.

    Columns are streamed through an incremental QR factorisation of
    ``[Z^T | Y_lift^T]`` so memory stays bounded; the pseudoinverse is taken
    on the triangular factor with singular values below ``rcond * s_max``
    dropped.
    """
    nz = bank.n_lift + data.U.shape[0]
    if data.d < nz:
        raise ValueError(f"need at least {nz} data columns for a well-posed fit, got {data.d}")
    R = np.zeros((0, nz + bank.n_lift))
    for Z, Yl in _lift_chunks(data, bank, chunk):
        R = sla.qr(np.vstack([R, np.hstack([Z.T, Yl.T])]), mode="r", check_finite=True)[0]
        R = R[:R.shape[1]]
    R11, R12, R22 = R[:nz, :nz], R[:nz, nz:], R[nz:, nz:]
    Uh, s, Vh = np.linalg.svd(R11)
    keep = s > rcond * s[0]
    if not np.all(keep):
        warnings.warn(f"truncated {int(np.sum(~keep))} of {nz} singular directions in the EDMD fit",
                      RankDeficiencyWarning, stacklevel=2)
    theta_t = Vh[keep].T @ ((Uh[:, keep].T @ R12) / s[keep, None])
    resid = math.sqrt(np.sum((R12 - R11 @ theta_t) ** 2) + np.sum(R22 ** 2))
    theta = theta_t.T
    n = bank.n_lift
    meta = dict(data.meta)
    meta["rank"] = int(np.sum(keep))
    return KoopmanModel(theta[:, :n].copy(), theta[:, n:].copy(), bank, resid, meta)


def fit_residual(model: KoopmanModel, data: TrainingData, chunk: int = 20000) -> float:
    """Frobenius residual of the fit recomputed directly on the data."""
    total = 0.0
    AB = np.hstack([model.A, model.B])
    for Z, Yl in _lift_chunks(data, model.bank, chunk):
        total += float(np.sum((Yl - AB @ Z) ** 2))
    return math.sqrt(total)


def lifted_terminal_map(model: KoopmanModel, z0, N: int):
    """``(C, beta)`` with ``z(N) = C u + beta``; ``C = [A^{N-1} B, ..., A B, B]``."""
    if N < 1:
        raise ValueError("N must be at least 1")
    n, m = model.B.shape
    C = np.empty((n, m * N))
    P = model.B.copy()
    for tau in range(N - 1, -1, -1):
        C[:, m * tau:m * tau + m] = P
        if tau:
            P = model.A @ P
    beta = np.asarray(z0, dtype=float)
    for _ in range(N):
        beta = model.A @ beta
    return C, beta


def lifted_rollout(model: KoopmanModel, z0, controls_n) -> np.ndarray:
    z = np.asarray(z0, dtype=float)
    out = [z]
    for u in np.asarray(controls_n, dtype=float).reshape(-1, model.m):
        z = model.A @ z + model.B @ u
        out.append(z)
    return np.array(out)


def predict(model: KoopmanModel, x0, controls, N: int | None = None) -> np.ndarray:
    """Physical state predictions ``(N+1, 6)`` from the lifted linear model."""
    controls = np.asarray(controls, dtype=float).reshape(-1, model.m)
    if N is not None and len(controls) != N:
        raise ValueError(f"expected {N} controls, got {len(controls)}")
    norm = model.bank.normalization
    Z = lifted_rollout(model, lift(model.bank, x0), controls / norm.U_ref)
    return norm.from_unit(Z[:, :6].T).T


def save_model(model: KoopmanModel, path) -> Path:
    bank = model.bank
    doc = {
        "schema_version": SCHEMA_VERSION,
        "n_lift": bank.n_lift,
        "m": model.m,
        "normalization": {"L_ref": bank.normalization.L_ref, "V_ref": bank.normalization.V_ref},
        "r_ref": bank.r_ref,
        "rbf_seed": bank.rbf_seed,
        "rbf_centers": bank.rbf_centers.tolist(),
        "A_koop": model.A.tolist(),
        "B_koop": model.B.tolist(),
        "fit_residual": model.fit_residual,
        "training_meta": model.training_meta,
    }
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1, allow_nan=False) + "\n")
    return path


def load_model(path) -> KoopmanModel:
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SchemaError(f"corrupted model file {path}: {exc}") from None
    if not isinstance(doc, dict) or "schema_version" not in doc:
        raise SchemaError(f"{path} is not a Koopman model file")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise SchemaError(f"unsupported model schema version {doc['schema_version']!r} "
                          f"(this build reads version {SCHEMA_VERSION})")
    try:
        n = int(doc["n_lift"])
        A = np.array(doc["A_koop"], dtype=float)
        B = np.array(doc["B_koop"], dtype=float)
        centers = np.array(doc["rbf_centers"], dtype=float).reshape(-1, 6)
        if A.shape != (n, n) or B.shape != (n, int(doc["m"])):
            raise SchemaError(f"matrix shapes {A.shape}, {B.shape} disagree with n_lift={n}, m={doc['m']}")
        norm = Normalization(**doc["normalization"])
        bank = ObservableBank(n, float(doc["r_ref"]), int(doc["rbf_seed"]), centers, norm)
        return KoopmanModel(A, B, bank, float(doc["fit_residual"]), doc.get("training_meta", {}))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SchemaError):
            raise
        raise SchemaError(f"malformed model file {path}: {exc}") from None
