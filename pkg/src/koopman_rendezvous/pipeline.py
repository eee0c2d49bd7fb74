"""Experiment pipeline: training data, model fit, controller synthesis for the
Koopman and linearised designs, closed application on the nonlinear plant and
the resulting artifacts.

Every stage reads and writes named files in one output directory so that any
stage can be rerun on its own:

    gen-data  -> training_data.npz
    fit       -> model.json
    solve     -> controls_<c>.csv, solve_<c>.json
    simulate  -> trajectory_<c>.csv
    report    -> report.json, plots/*.svg
"""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import os
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import koopman as K
from . import linearized as L
from .config import ScenarioConfig
from .dynamics import CONTROL_NAMES, Trajectory, rollout
from .orbit import orbit_state
from .sparse_solver import irls_solve, l21_cost

log = logging.getLogger(__name__)

CONTROLLERS = ("koopman", "linear")
TRAINING_FILE = "training_data.npz"
MODEL_FILE = "model.json"
REPORT_FILE = "report.json"
COMPARE_HEADER = ("scenario", "controller", "terminal_error_l2", "fuel_cost_l21", "irls_iterations", "irls_residual")

PRODUCER = {TRAINING_FILE: "gen-data", MODEL_FILE: "fit", "controls": "solve", "solve": "solve",
            "trajectory": "simulate", REPORT_FILE: "report"}


class StageError(RuntimeError):
    """A numerical failure inside a named pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class MissingArtifactError(FileNotFoundError):
    pass


class LockError(RuntimeError):
    pass


def controls_path(out: Path, c: str) -> Path:
    return out / f"controls_{c}.csv"


def solve_path(out: Path, c: str) -> Path:
    return out / f"solve_{c}.json"


def trajectory_path(out: Path, c: str) -> Path:
    return out / f"trajectory_{c}.csv"


def _require(path: Path, kind: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{path} not found; run the `{PRODUCER[kind]}` subcommand first "
                                   f"with the same --out directory")
    return path


@contextlib.contextmanager
def output_lock(out: Path):
    """Single process per output directory."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{out} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


@contextlib.contextmanager
def stage(name: str, written: list):
    """Remove whatever the stage wrote if it fails; wrap numerical errors."""
    n0 = len(written)
    try:
        yield
    except BaseException as exc:
        for p in written[n0:]:
            Path(p).unlink(missing_ok=True)
        del written[n0:]
        if isinstance(exc, (ArithmeticError, np.linalg.LinAlgError, ValueError)) and not isinstance(
                exc, MissingArtifactError):
            raise StageError(name, exc) from exc
        raise


def _atomic_write(path: Path, text: str, written: list) -> Path:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
    written.append(path)
    return path


# -- scenario-derived quantities ----------------------------------------------

def normalization_for(cfg: ScenarioConfig) -> K.Normalization:
    """``L_ref`` defaults to the initial separation and ``V_ref`` to ``L_ref``
    times the mean orbital rate over the horizon."""
    L_ref = cfg.L_ref
    if L_ref is None:
        L_ref = float(np.linalg.norm(cfg.x0[:3])) or float(np.linalg.norm(cfg.x_f[:3])) or 1.0
    V_ref = cfg.V_ref
    if V_ref is None:
        t = cfg.T * np.arange(cfg.N + 1)
        if cfg.freeze_anomaly:
            t = np.zeros(1)
        V_ref = L_ref * float(np.mean(orbit_state(cfg.elements, t)[3]))
    return K.Normalization(L_ref, V_ref)


def bank_for(cfg: ScenarioConfig) -> K.ObservableBank:
    norm = normalization_for(cfg)
    r_ref = cfg.r_ref
    if r_ref is None:
        r_ref = float(np.linalg.norm(norm.to_unit(cfg.x0))) or 1.0
    return K.make_bank(cfg.n_lift, r_ref, cfg.rbf_seed, norm)


def compute_terminal_error(traj: Trajectory, x_f) -> float:
    """Mixed-unit l2 norm of ``x(N) - x_f`` (metres and m/s together)."""
    return float(np.linalg.norm(traj.final_state - np.asarray(x_f, dtype=float)))


def weighted_terminal_error(traj: Trajectory, x_f, norm: K.Normalization) -> float:
    """Dimensionless terminal error: position over L_ref, velocity over V_ref."""
    return float(np.linalg.norm(norm.to_unit(traj.final_state - np.asarray(x_f, dtype=float))))


def _trivial(cfg: ScenarioConfig) -> bool:
    return not np.any(cfg.x0) and not np.any(cfg.x_f)


# -- stages -------------------------------------------------------------------

def gen_data(cfg: ScenarioConfig, out: Path, written: list | None = None) -> Path:
    written = [] if written is None else written
    out.mkdir(parents=True, exist_ok=True)
    with stage("gen-data", written):
        bank = bank_for(cfg)
        data = K.generate_training_data(cfg.elements, bank, cfg.n_traj, cfg.n_steps, cfg.T, cfg.data_seed,
                                        cfg.u_scale, cfg.freeze_anomaly, cfg.eps_sing)
        data.meta["config_digest"] = cfg.digest
        path = out / TRAINING_FILE
        tmp = out / (TRAINING_FILE + ".tmp")
        data.save(tmp)
        os.replace(tmp, path)
        written.append(path)
    return path


def fit_model(cfg: ScenarioConfig, out: Path, written: list | None = None) -> K.KoopmanModel:
    written = [] if written is None else written
    data = K.TrainingData.load(_require(out / TRAINING_FILE, TRAINING_FILE))
    if data.meta.get("config_digest") != cfg.digest:
        raise MissingArtifactError(f"{out / TRAINING_FILE} was generated for a different configuration; "
                                   "rerun the `gen-data` subcommand")
    with stage("fit", written):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", K.RankDeficiencyWarning)
            model = K.fit(data, bank_for(cfg))
        if not (np.all(np.isfinite(model.A)) and np.all(np.isfinite(model.B))):
            raise ArithmeticError("EDMD fit produced non-finite matrices")
        path = out / MODEL_FILE
        tmp = out / (MODEL_FILE + ".tmp")
        K.save_model(model, tmp)
        os.replace(tmp, path)
        written.append(path)
    return model


def _cached_model(cfg: ScenarioConfig, out: Path):
    path = out / MODEL_FILE
    if not path.exists():
        return None
    try:
        model = K.load_model(path)
    except K.SchemaError:
        return None
    return model if model.training_meta.get("config_digest") == cfg.digest else None


def _write_controls(path: Path, controls: np.ndarray, T: float, written: list) -> Path:
    lines = [",".join(("k", "t") + CONTROL_NAMES)]
    for k, u in enumerate(controls):
        lines.append(",".join([str(k), format(k * T, ".17g")] + [format(float(v), ".17g") for v in u]))
    return _atomic_write(path, "\n".join(lines) + "\n", written)


def read_controls(path: Path) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r[c]) for c in CONTROL_NAMES] for r in rows]).reshape(-1, 3)


def solve_controller(cfg: ScenarioConfig, out: Path, controller: str, model: K.KoopmanModel | None = None,
                     written: list | None = None) -> dict:
    """Synthesize one controller; writes its controls CSV and IRLS summary."""
    written = [] if written is None else written
    if controller not in CONTROLLERS:
        raise ValueError(f"unknown controller {controller!r}")
    if controller == "koopman" and model is None:
        try:
            model = K.load_model(_require(out / MODEL_FILE, MODEL_FILE))
        except K.SchemaError as exc:
            raise MissingArtifactError(f"{exc}; rerun the `fit` subcommand") from None
    t0 = time.perf_counter()
    with stage(f"solve-{controller}", written):
        N = cfg.N
        extra = {}
        if _trivial(cfg):
            u = np.zeros((N, 3))
            summary = {"converged": True, "iterations": 0, "eps_final": 0.0, "cost_l21": 0.0,
                       "constraint_residual": 0.0, "stop_reason": "trivial: x0 = x_f = 0"}
        elif controller == "linear":
            lin = L.discretize(cfg.elements, cfg.T, N, freeze_anomaly=cfg.freeze_anomaly)
            C, beta = L.terminal_map(lin, cfg.x0)
            res = irls_solve(C, beta, cfg.x_f, cfg.irls)
            u = res.u.reshape(N, 3)
            summary = res.summary()
        else:
            bank = model.bank
            z0, zf = K.lift(bank, cfg.x0), K.lift(bank, cfg.x_f)
            C, beta = K.lifted_terminal_map(model, z0, N)
            if cfg.terminal_constraint == "state":
                C, beta, zf = C[:6], beta[:6], zf[:6]
            if not np.all(np.isfinite(C)) or not np.all(np.isfinite(beta)):
                raise ArithmeticError("lifted terminal map overflowed (unstable A_koop over the horizon)")
            res = irls_solve(C, beta, zf, cfg.irls)
            u = res.u.reshape(N, 3) * bank.normalization.U_ref
            summary = res.summary()
            summary["units"] = "normalised"
            extra["predicted_final_state"] = K.predict(model, cfg.x0, u)[-1].tolist()
        summary["fuel_cost_l21"] = l21_cost(u.ravel(), 3)
        summary["seconds"] = time.perf_counter() - t0
        summary.update(extra)
        _write_controls(controls_path(out, controller), u, cfg.T, written)
        _atomic_write(solve_path(out, controller), json.dumps(summary, indent=1, sort_keys=True) + "\n", written)
    return summary


def simulate(cfg: ScenarioConfig, out: Path, controller: str, written: list | None = None) -> Trajectory:
    """Apply a solved control sequence to the nonlinear plant."""
    written = [] if written is None else written
    u = read_controls(_require(controls_path(out, controller), "controls"))
    if len(u) != cfg.N:
        raise MissingArtifactError(f"{controls_path(out, controller)} has {len(u)} rows, expected {cfg.N}; "
                                   "rerun the `solve` subcommand")
    with stage(f"simulate-{controller}", written):
        traj = rollout(cfg.x0, u, cfg.elements, cfg.T, cfg.N, cfg.freeze_anomaly, cfg.eps_sing)
        path = trajectory_path(out, controller)
        tmp = path.with_name(path.name + ".tmp")
        traj.to_csv(tmp)
        os.replace(tmp, path)
        written.append(path)
    return traj


@dataclass
class RunReport:
    scenario: str
    terminal_error: dict  # controller -> mixed-unit l2 error
    weighted_terminal_error: dict
    fuel_cost: dict  # controller -> J_{2,1} in m/s^2
    irls: dict
    timings: dict = field(default_factory=dict)
    manifest: list = field(default_factory=list)
    model: dict = field(default_factory=dict)

    @property
    def terminal_error_koopman(self):
        return self.terminal_error.get("koopman")

    @property
    def terminal_error_linear(self):
        return self.terminal_error.get("linear")

    @property
    def fuel_cost_koopman(self):
        return self.fuel_cost.get("koopman")

    @property
    def fuel_cost_linear(self):
        return self.fuel_cost.get("linear")

    @property
    def all_converged(self) -> bool:
        return all(v.get("converged", False) for v in self.irls.values())

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "terminal_error": self.terminal_error,
                "weighted_terminal_error": self.weighted_terminal_error, "fuel_cost": self.fuel_cost,
                "irls": self.irls, "model": self.model, "timings": self.timings, "manifest": self.manifest}

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(d["scenario"], d["terminal_error"], d.get("weighted_terminal_error", {}), d["fuel_cost"],
                   d["irls"], d.get("timings", {}), d.get("manifest", []), d.get("model", {}))

    @classmethod
    def load(cls, path) -> "RunReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def report(cfg: ScenarioConfig, out: Path, controllers=CONTROLLERS, timings: dict | None = None,
           written: list | None = None, plots: bool = True) -> RunReport:
    written = [] if written is None else written
    trajs, irls = {}, {}
    for c in controllers:
        trajs[c] = Trajectory.from_csv(_require(trajectory_path(out, c), "trajectory"))
        irls[c] = json.loads(_require(solve_path(out, c), "solve").read_text())
    norm = normalization_for(cfg)
    with stage("report", written):
        rep = RunReport(
            scenario=cfg.name,
            terminal_error={c: compute_terminal_error(t, cfg.x_f) for c, t in trajs.items()},
            weighted_terminal_error={c: weighted_terminal_error(t, cfg.x_f, norm) for c, t in trajs.items()},
            fuel_cost={c: l21_cost(t.controls.ravel(), 3) for c, t in trajs.items()},
            irls=irls, timings=dict(timings or {}))
        model_path = out / MODEL_FILE
        if "koopman" in controllers and model_path.exists():
            model = K.load_model(model_path)
            rep.model = {"fit_residual": model.fit_residual, "rank": model.training_meta.get("rank"),
                         "spectral_radius": float(np.max(np.abs(np.linalg.eigvals(model.A)))),
                         "n_lift": model.bank.n_lift, "r_ref": model.bank.r_ref,
                         "L_ref": model.bank.normalization.L_ref, "V_ref": model.bank.normalization.V_ref}
        files = [p for p in (out / TRAINING_FILE, model_path) if p.exists()]
        for c in controllers:
            files += [controls_path(out, c), solve_path(out, c), trajectory_path(out, c)]
        if plots:
            from .plotting import emit_plots

            plot_files = emit_plots(trajs.get("koopman"), trajs.get("linear"), cfg.x_f, out / "plots")
            written.extend(plot_files)
            files += plot_files
        rep.manifest = sorted(str(Path(p).relative_to(out)) for p in files) + [REPORT_FILE]
        _atomic_write(out / REPORT_FILE, json.dumps(rep.to_dict(), indent=1, sort_keys=True) + "\n", written)
    return rep


def run_pipeline(cfg: ScenarioConfig, out, controllers=CONTROLLERS, plots: bool = True) -> RunReport:
    """generate -> fit (or reuse a cached model) -> solve -> simulate -> report."""
    out = Path(out)
    written: list = []
    timings = {}
    with output_lock(out):
        model = None
        if "koopman" in controllers:
            model = _cached_model(cfg, out)
            if model is None:
                t = time.perf_counter()
                gen_data(cfg, out, written)
                timings["gen_data"] = time.perf_counter() - t
                t = time.perf_counter()
                model = fit_model(cfg, out, written)
                timings["fit"] = time.perf_counter() - t
            else:
                log.info("reusing cached model %s", out / MODEL_FILE)
        for c in controllers:
            t = time.perf_counter()
            solve_controller(cfg, out, c, model, written)
            timings[f"solve_{c}"] = time.perf_counter() - t
            t = time.perf_counter()
            simulate(cfg, out, c, written)
            timings[f"simulate_{c}"] = time.perf_counter() - t
        return report(cfg, out, controllers, timings, written, plots)


def compare(report_paths, out_csv) -> Path:
    """Table of terminal error and fuel cost per scenario and controller."""
    rows = [",".join(COMPARE_HEADER)]
    for rp in report_paths:
        rep = RunReport.load(rp)
        for c in sorted(rep.terminal_error):
            ir = rep.irls.get(c, {})
            rows.append(",".join([rep.scenario, c, format(rep.terminal_error[c], ".17g"),
                                  format(rep.fuel_cost[c], ".17g"), str(ir.get("iterations", "")),
                                  format(ir.get("constraint_residual", float("nan")), ".17g")]))
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    out_csv.write_text("\n".join(rows) + "\n")
    return out_csv
