"""CSV interchange and SVG phase-plane output.

Floats are written with 17 significant digits so that re-reading a file
reproduces the in-memory values bit for bit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import AnnulusState, CompressorParams
from .solver import Trajectory

TRAJECTORY_COLUMNS = ("t", "Phi", "Psi", "gamma", "phi_min", "phi_max")
LOG_COLUMNS = ("t", "phase", "gamma_command", "gamma_applied", "err_Phi", "err_Psi")
BRANCH_COLUMNS = ("gamma", "Phi0", "Psi0", "re_ev1", "im_ev1", "re_ev2", "im_ev2",
                  "stall_exists", "stall_amp", "surge_exists", "period")


def fmt(x) -> str:
    """Canonical float text: 17 significant digits, ``nan``/``inf`` spelled out."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.17g}"


def _write_rows(path, header, rows):
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([cell if isinstance(cell, str) else fmt(cell) for cell in row])
    return path


def write_trajectory_csv(traj: Trajectory, path, full_profile: bool = False) -> Path:
    """Write ``t,Phi,Psi,gamma,phi_min,phi_max`` (plus ``phi_0..`` if asked)."""
    n = traj.phi.shape[1] if traj.phi.ndim == 2 else 0
    header = list(TRAJECTORY_COLUMNS)
    if full_profile:
        header += [f"phi_{j}" for j in range(n)]

    def rows():
        for i in range(len(traj)):
            phi = traj.phi[i]
            row = [traj.times[i], traj.avg_flow[i], traj.pressure_rise[i], traj.gamma[i],
                   phi.min(), phi.max()]
            if full_profile:
                row.extend(phi.tolist())
            yield row

    return _write_rows(path, header, rows())


@dataclass
class TrajectoryTable:
    """Columns read back from a trajectory CSV."""

    times: np.ndarray
    avg_flow: np.ndarray
    pressure_rise: np.ndarray
    gamma: np.ndarray
    phi_min: np.ndarray
    phi_max: np.ndarray
    phi: Optional[np.ndarray] = None

    def to_trajectory(self, params: Optional[CompressorParams] = None) -> Trajectory:
        if self.phi is None:
            raise ValueError("file has no profile columns (written without --full-profile)")
        return Trajectory(self.times, self.phi, self.avg_flow, self.pressure_rise, self.gamma,
                          params)


def read_trajectory_csv(path) -> TrajectoryTable:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header[:6]) != TRAJECTORY_COLUMNS:
            raise ValueError(f"unexpected trajectory header {header[:6]}")
        data = np.array([[float(x) for x in row] for row in reader], dtype=float)
    data = data.reshape(-1, len(header))
    phi = data[:, 6:] if len(header) > 6 else None
    return TrajectoryTable(data[:, 0], data[:, 1], data[:, 2], data[:, 3], data[:, 4],
                           data[:, 5], phi)


def write_log_csv(rows: Sequence, path) -> Path:
    return _write_rows(path, LOG_COLUMNS, rows)


def read_log_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != LOG_COLUMNS:
            raise ValueError(f"unexpected log header {header}")
        return [(float(r[0]), r[1], float(r[2]), float(r[3]), float(r[4]), float(r[5]))
                for r in reader]


def write_branch_csv(table, path) -> Path:
    return _write_rows(path, BRANCH_COLUMNS, table.csv_rows())


def write_riccati_csv(ricc, path) -> Path:
    rows = ((t, q[0, 0], q[0, 1], q[1, 1]) for t, q in zip(ricc.times, ricc.q))
    return _write_rows(path, ("t", "q11", "q12", "q22"), rows)


def write_state_csv(state: AnnulusState, path) -> Path:
    """Single-state dump in the full-profile trajectory layout."""
    phi = state.phi
    header = list(TRAJECTORY_COLUMNS) + [f"phi_{j}" for j in range(phi.size)]
    row = [state.time, state.avg_flow, state.pressure_rise, math.nan, phi.min(), phi.max()]
    return _write_rows(path, header, [row + phi.tolist()])


def read_profile(path) -> np.ndarray:
    """Read a disturbance profile.

    Accepts either a one-column file of values (optional ``phi`` header) or a
    full-profile trajectory CSV, in which case the last row is used.
    """
    with Path(path).open(newline="") as fh:
        rows = [row for row in csv.reader(fh) if row]
    if not rows:
        raise ValueError(f"{path}: empty profile file")
    if rows[0][:1] == ["t"]:
        if len(rows[0]) <= 6 or len(rows) < 2:
            raise ValueError(f"{path}: trajectory file has no profile columns")
        return np.array([float(x) for x in rows[-1][6:]])
    if rows[0][0].strip().lower() == "phi":
        rows = rows[1:]
    return np.array([float(r[0]) for r in rows])


# -- SVG ---------------------------------------------------------------------------

_W, _H, _PAD = 640, 480, 56


def emit_phase_plot(traj: Trajectory, path, params: Optional[CompressorParams] = None,
                    title: str = "") -> Path:
    """Write the (Phi, Psi) orbit over the compressor and throttle curves.

    The throttle curve ``Phi = gamma * F_T^-1(Psi)`` is drawn for the last
    applied throttle setting.  Output depends only on the inputs.
    """
    if len(traj) == 0:
        raise ValueError("cannot plot an empty trajectory")
    params = params or traj.params or CompressorParams()
    cubic = params.cubic
    flow, press = traj.avg_flow, traj.pressure_rise
    gamma = float(traj.gamma[-1])
    peak_flow, peak_press = cubic.peak

    x_lo = min(float(flow.min()), -0.5 * cubic.w) - 0.05
    x_hi = max(float(flow.max()), peak_flow + cubic.w) + 0.05
    y_lo = min(float(press.min()), 0.0) - 0.05
    y_hi = max(float(press.max()), peak_press) + 0.1

    def sx(x):
        return _PAD + (x - x_lo) / (x_hi - x_lo) * (_W - 2 * _PAD)

    def sy(y):
        return _H - _PAD - (y - y_lo) / (y_hi - y_lo) * (_H - 2 * _PAD)

    def points(xs, ys):
        return " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))

    xs = np.linspace(x_lo, x_hi, 241)
    throttle_x = np.linspace(x_lo, x_hi, 241)
    throttle_y = np.sign(throttle_x) * (throttle_x / gamma) ** 2

    stride = max(1, len(traj) // 4000)
    ox, oy = flow[::stride], press[::stride]
    if (len(traj) - 1) % stride:
        ox, oy = np.append(ox, flow[-1]), np.append(oy, press[-1])

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        '<defs><clipPath id="plot"><rect x="{0}" y="{0}" width="{1}" height="{2}"/>'
        '</clipPath></defs>'.format(_PAD, _W - 2 * _PAD, _H - 2 * _PAD),
        '<rect width="100%" height="100%" fill="white"/>',
        f'<rect x="{_PAD}" y="{_PAD}" width="{_W - 2 * _PAD}" height="{_H - 2 * _PAD}" '
        'fill="none" stroke="black"/>',
    ]
    if x_lo < 0 < x_hi:
        out.append(f'<line x1="{sx(0):.2f}" y1="{_PAD}" x2="{sx(0):.2f}" y2="{_H - _PAD}" '
                   'stroke="#bbbbbb" stroke-dasharray="4 4"/>')
    if y_lo < 0 < y_hi:
        out.append(f'<line x1="{_PAD}" y1="{sy(0):.2f}" x2="{_W - _PAD}" y2="{sy(0):.2f}" '
                   'stroke="#bbbbbb" stroke-dasharray="4 4"/>')
    out += [
        '<g clip-path="url(#plot)" fill="none">',
        f'<polyline points="{points(xs, cubic(xs))}" stroke="#1f4e9e" stroke-width="2"/>',
        f'<polyline points="{points(throttle_x, throttle_y)}" stroke="#9e1f1f" '
        'stroke-width="1.5" stroke-dasharray="6 3"/>',
    ]
    if len(ox) > 1:
        out.append(f'<polyline points="{points(ox, oy)}" stroke="#222222" stroke-width="1"/>')
    out.append('</g>')
    out.append(f'<circle cx="{sx(flow[0]):.2f}" cy="{sy(press[0]):.2f}" r="4" fill="#2a8f2a"/>')
    out.append(f'<circle cx="{sx(flow[-1]):.2f}" cy="{sy(press[-1]):.2f}" r="4" fill="#d07000"/>')
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        xv = x_lo + frac * (x_hi - x_lo)
        yv = y_lo + frac * (y_hi - y_lo)
        out.append(f'<text x="{sx(xv):.2f}" y="{_H - _PAD + 16}" font-size="11" '
                   f'text-anchor="middle">{xv:.2f}</text>')
        out.append(f'<text x="{_PAD - 6}" y="{sy(yv) + 4:.2f}" font-size="11" '
                   f'text-anchor="end">{yv:.2f}</text>')
    out.append(f'<text x="{_W / 2:.0f}" y="{_H - 12}" font-size="13" '
               'text-anchor="middle">Phi (mass flow)</text>')
    out.append(f'<text x="16" y="{_H / 2:.0f}" font-size="13" text-anchor="middle" '
               f'transform="rotate(-90 16 {_H / 2:.0f})">Psi (pressure rise)</text>')
    label = title or f"gamma = {gamma:.4f}"
    out.append(f'<text x="{_W / 2:.0f}" y="{_PAD - 16}" font-size="14" '
               f'text-anchor="middle">{_escape(label)}</text>')
    out.append('</svg>')
    path = Path(path)
    path.write_text("\n".join(out) + "\n")
    return path


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
