"""SVG charts of controlled trajectories: one per state component and one per
control axis, each overlaying the Koopman and linear designs with the target."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dynamics import CONTROL_NAMES, STATE_NAMES, Trajectory  # noqa: E402

STATE_UNITS = ("m", "m", "m", "m/s", "m/s", "m/s")
STYLE = {
    "svg.hashsalt": "koopman-rendezvous",  # stable element ids
    "svg.fonttype": "none",
    "figure.figsize": (6.0, 3.2),
    "font.size": 9,
    "axes.linewidth": 0.6,
    "lines.linewidth": 1.2,
    "axes.grid": True,
    "grid.linewidth": 0.3,
}
SERIES = {"koopman": dict(color="tab:blue", label="Koopman"),
          "linear": dict(color="tab:orange", label="linearized", linestyle="--"),
          "target": dict(color="k", label="target", linestyle=":", linewidth=0.8)}


def plot_series(traj_koop: Trajectory | None, traj_lin: Trajectory | None, x_f) -> dict:
    """Polyline data behind every chart: ``{chart: {series: (t, values)}}``."""
    x_f = np.asarray(x_f, dtype=float)
    charts = {}
    trajs = {"koopman": traj_koop, "linear": traj_lin}
    for i, name in enumerate(STATE_NAMES):
        lines = {}
        for key, tr in trajs.items():
            if tr is not None:
                lines[key] = (tr.t_grid, tr.states[:, i])
        t_ref = next((tr.t_grid for tr in trajs.values() if tr is not None), np.zeros(1))
        lines["target"] = (t_ref, np.full(len(t_ref), x_f[i]))
        charts[name] = lines
    for i, name in enumerate(CONTROL_NAMES):
        lines = {}
        for key, tr in trajs.items():
            if tr is None:
                continue
            if tr.N == 0:
                lines[key] = (tr.t_grid[:1], np.zeros(1))
            else:
                # zero-order hold drawn as a step curve
                t = np.repeat(tr.t_grid, 2)[1:-1]
                lines[key] = (t, np.repeat(tr.controls[:, i], 2))
        charts[name] = lines
    return charts


def _render(lines: dict, ylabel: str, path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for key, (t, v) in lines.items():
            ax.plot(t, v, marker="." if len(t) == 1 else None, **SERIES[key])
        ax.set_xlabel("t (s)")
        ax.set_ylabel(ylabel)
        ax.legend(loc="best", frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path


def emit_plots(traj_koop: Trajectory | None, traj_lin: Trajectory | None, x_f, out_dir) -> list[Path]:
    """Write the nine charts into ``out_dir``; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    units = dict(zip(STATE_NAMES, STATE_UNITS)) | {c: "m/s^2" for c in CONTROL_NAMES}
    paths = []
    for name, lines in plot_series(traj_koop, traj_lin, x_f).items():
        prefix = "state" if name in STATE_NAMES else "control"
        paths.append(_render(lines, f"{name} ({units[name]})", out_dir / f"{prefix}_{name}.svg"))
    return paths
