"""Sampled trajectories and their CSV/JSON file format."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class TrajectoryError(ValueError):
    pass


@dataclass
class Trajectory:
    """Ordered (time, state) samples.

    ``gaps`` holds the recorded step to the next sample. It is kept separately
    from ``np.diff(times)`` because jittered data record their gaps exactly,
    while cumulative sums of those gaps pick up rounding.
    """

    times: np.ndarray
    states: np.ndarray
    gaps: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        states = np.asarray(self.states, dtype=np.float64)
        if states.ndim == 1:
            states = states[:, None]
        self.states = states
        if self.times.ndim != 1 or len(self.times) < 1:
            raise TrajectoryError("times must be a non-empty 1-D array")
        if len(self.times) != len(self.states):
            raise TrajectoryError(
                f"{len(self.times)} times but {len(self.states)} states"
            )
        if np.any(np.diff(self.times) <= 0):
            raise TrajectoryError("times must be strictly increasing")
        if not np.all(np.isfinite(self.states)):
            raise TrajectoryError("states must be finite")
        if self.gaps is None:
            self.gaps = np.diff(self.times)
        else:
            self.gaps = np.asarray(self.gaps, dtype=np.float64)
            if len(self.gaps) != len(self.times) - 1:
                raise TrajectoryError("need one gap per adjacent sample pair")

    def __len__(self):
        return len(self.times)

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    def regular_spacing(self, rtol: float = 1e-9) -> float:
        """Common spacing of the samples; raises if the spacing is irregular."""
        if len(self) < 2:
            raise TrajectoryError("a single sample has no spacing")
        dt = float(np.mean(self.gaps))
        if not np.allclose(self.gaps, dt, rtol=rtol, atol=0.0):
            raise TrajectoryError("trajectory is irregularly spaced")
        return dt

    def subset(self, indices) -> "Trajectory":
        idx = np.asarray(indices)
        return Trajectory(self.times[idx], self.states[idx], meta=dict(self.meta))


def write_csv(traj: Trajectory, path) -> None:
    """Write ``t,x0,x1,...,dt_next``; ``dt_next`` is empty on the last row."""
    path = Path(path)
    header = ["t"] + [f"x{i}" for i in range(traj.dim)] + ["dt_next"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(len(traj)):
            gap = repr(float(traj.gaps[k])) if k < len(traj) - 1 else ""
            w.writerow(
                [repr(float(traj.times[k]))]
                + [repr(float(v)) for v in traj.states[k]]
                + [gap]
            )


def read_csv(path) -> Trajectory:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise TrajectoryError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header[0] != "t" or header[-1] != "dt_next":
        raise TrajectoryError(f"{path}: expected header t,x0,...,dt_next")
    body = [r for r in rows[1:] if r]
    if not body:
        raise TrajectoryError(f"{path}: no samples")
    times = np.array([float(r[0]) for r in body])
    states = np.array([[float(v) for v in r[1:-1]] for r in body])
    gaps = np.array([float(r[-1]) for r in body[:-1]])
    meta = {}
    sidecar = metadata_path(path)
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
    return Trajectory(times, states, gaps=gaps, meta=meta)


def metadata_path(csv_path) -> Path:
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.stem + ".meta.json")


def write_metadata(traj: Trajectory, csv_path) -> Path:
    out = metadata_path(csv_path)
    out.write_text(json.dumps(traj.meta, indent=2, sort_keys=True) + "\n")
    return out
