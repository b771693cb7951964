"""Result persistence: trajectory CSVs and run-record JSON.

Trajectory CSV: header t,x0,...,x{n-1}[,T,S,P], one row per sample,
exogenous constants repeated on every row so files are self-contained.
Run records serialize with sorted keys so identical configurations
produce byte-identical JSON apart from the timestamp block.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .problem import Trajectory

__all__ = [
    "ResultRecord",
    "config_hash",
    "write_trajectory_csv",
    "read_trajectory_csv",
]

_EXO_COLUMNS = ("T", "S", "P")


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ResultRecord:
    """Everything one run produced, JSON-serializable."""

    command: str
    problem: str
    config: dict
    status: str = "ok"
    seed: int | None = None
    p: list | None = None
    p_names: list | None = None
    phi: list | None = None
    phi_names: list | None = None
    loss: float | None = None
    loss_trace: list | None = None
    iterations: int | None = None
    convergence_flag: str | None = None
    validation: dict | None = None
    discovery_rounds: list | None = None
    discovery_status: str | None = None
    error: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self, include_timestamps: bool = True) -> dict:
        out = {
            "command": self.command,
            "problem": self.problem,
            "config": self.config,
            "config_hash": config_hash(self.config),
            "status": self.status,
            "seed": self.seed,
            "p": self.p,
            "p_names": self.p_names,
            "phi": self.phi,
            "phi_names": self.phi_names,
            "loss": self.loss,
            "loss_trace": self.loss_trace,
            "iterations": self.iterations,
            "convergence_flag": self.convergence_flag,
            "validation": self.validation,
            "discovery_rounds": self.discovery_rounds,
            "discovery_status": self.discovery_status,
            "error": self.error,
        }
        out.update(self.extra)
        if include_timestamps:
            out["timestamps"] = {"created": datetime.now(timezone.utc).isoformat()}
        return out

    def to_json(self, include_timestamps: bool = True) -> str:
        return json.dumps(self.to_dict(include_timestamps), sort_keys=True, indent=2)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path


def _fmt(v: float) -> str:
    return f"{float(v):.17g}"


def write_trajectory_csv(path: str | Path, traj: Trajectory) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    exo_keys = [k for k in _EXO_COLUMNS if k in traj.exogenous]
    header = ["t"] + [f"x{s}" for s in range(traj.n_states)] + exo_keys
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(traj.n_times):
            row = [_fmt(traj.times[k])]
            row += [_fmt(traj.states[s, k]) for s in range(traj.n_states)]
            row += [_fmt(traj.exogenous[key]) for key in exo_keys]
            writer.writerow(row)
    return path


def read_trajectory_csv(path: str | Path, history: np.ndarray | None = None) -> Trajectory:
    """Load a trajectory written by write_trajectory_csv (or compatible)."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    if not header or header[0] != "t":
        raise ValueError(f"{path}: first column must be t")
    state_cols = [i for i, name in enumerate(header) if name.startswith("x") and name[1:].isdigit()]
    exo_cols = {name: i for i, name in enumerate(header) if name in _EXO_COLUMNS}
    if not state_cols:
        raise ValueError(f"{path}: no state columns x0..x{{n-1}} found")
    data = np.array([[float(v) for v in row] for row in rows])
    times = data[:, 0]
    states = data[:, state_cols].T
    exogenous = {name: float(data[0, i]) for name, i in exo_cols.items()}
    return Trajectory(times=times, states=states, history=history, exogenous=exogenous)
