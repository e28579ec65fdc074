"""Convergence test for learned vector fields and the order-escalating loop.

A model trained at data spacing ``dt`` is rolled out over validation
trajectories at a log-spaced range of inference steps ``h``. A continuous
model keeps its error at or below ``(1 + epsilon) * Error(dt)`` for every
``h < dt``; a model that only fits the training spacing shows a sharp dip
at ``h = dt`` instead.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .integrators import AlignmentError, DivergenceError, SchemeKind, advance
from .trajectory import Trajectory

log = logging.getLogger(__name__)

GRID_RATIO = 1.1
METRICS = ("endpoint", "max", "mean")
_METRIC_ALIASES = {
    "endpoint": "endpoint",
    "end": "endpoint",
    "maxoverpoints": "max",
    "max": "max",
    "meanoversubset": "mean",
    "mean": "mean",
}
# h > dt is only kept when some divisor of stride*dt lies this close to it
SNAP_TOLERANCE = 0.10


def parse_metric(name: str) -> str:
    key = str(name).replace("_", "").replace("-", "").lower()
    if key not in _METRIC_ALIASES:
        raise ValueError(f"unknown metric {name!r}; choose from {METRICS}")
    return _METRIC_ALIASES[key]


@dataclass
class TestConfig:
    m: int = 24
    epsilon: float = 0.5
    metric: str = "mean"
    stride: int = 5
    dt: float | None = None  # None: taken from the validation spacing

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        self.metric = parse_metric(self.metric)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid_ratio"] = GRID_RATIO
        return d


@dataclass
class CurvePoint:
    h: float
    error: float
    targets: list[float]
    per_traj: list[float] = field(default_factory=list)


@dataclass
class TrajectoryReport:
    points: list[tuple[float, float]]
    error_at_dt: float
    plateau_b: float
    verdict: bool


@dataclass
class ConvergenceReport:
    config: dict
    scheme: str
    dt: float
    h_dt: float
    points: list[CurvePoint]
    error_at_dt: float
    plateau_b: float
    verdict: bool
    per_trajectory: list[TrajectoryReport]
    dropped: list[float] = field(default_factory=list)
    clamped: list[float] = field(default_factory=list)
    slope: float | None = None

    @property
    def passed(self) -> bool:
        return self.verdict

    @property
    def hs(self) -> np.ndarray:
        return np.array([p.h for p in self.points])

    @property
    def errors(self) -> np.ndarray:
        return np.array([p.error for p in self.points])

    def error_at(self, h: float, rtol: float = 1e-9) -> float:
        for p in self.points:
            if abs(p.h - h) <= rtol * h:
                return p.error
            if any(abs(t - h) <= rtol * h for t in p.targets):
                return p.error
        raise KeyError(f"no point at h={h}")

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "scheme": self.scheme,
            "dt": self.dt,
            "h_dt": self.h_dt,
            "points": [
                {"h": p.h, "error": _num(p.error), "targets": p.targets,
                 "per_traj": [_num(e) for e in p.per_traj]}
                for p in self.points
            ],
            "error_at_dt": _num(self.error_at_dt),
            "plateau_b": _num(self.plateau_b),
            "verdict": "Pass" if self.verdict else "Fail",
            "per_trajectory": [
                {"error_at_dt": _num(t.error_at_dt), "plateau_b": _num(t.plateau_b),
                 "verdict": "Pass" if t.verdict else "Fail"}
                for t in self.per_trajectory
            ],
            "dropped_h": self.dropped,
            "clamped_h": self.clamped,
            "slope": self.slope,
        }


def _num(x):
    # JSON has no infinity
    return x if math.isfinite(x) else "inf"


def h_grid(dt: float, m: int) -> list[float]:
    if m < 1:
        raise ValueError("m must be >= 1")
    return [dt * GRID_RATIO**i for i in range(-m, m + 1)]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def nudge(h: float, span: float) -> float:
    """Closest step that divides ``span`` evenly: span / round(span / h).

    A step longer than the span is clamped to the span.
    """
    if not h > 0 or not span > 0:
        raise ValueError("h and span must be positive")
    return span / max(1, _round_half_up(span / h))


def select_step(h_target: float, dt: float, stride: int):
    """Snap a grid value to an admissible step, or None if it cannot be kept.

    For ``h <= dt`` this is :func:`nudge` on the span ``stride * dt``. Larger
    steps must still divide the span, so they come from ``span / j`` with
    ``j < stride``; values with no such divisor within 10% are dropped.
    """
    span = stride * dt
    if h_target <= dt * (1 + 1e-12):
        return nudge(h_target, span)
    cands = [span / j for j in range(1, stride)]
    if not cands:
        return None
    best = min(cands, key=lambda c: abs(c - h_target))
    if abs(best - h_target) > SNAP_TOLERANCE * h_target:
        return None
    return best


def subset_indices(n_points: int, stride: int) -> np.ndarray:
    return np.arange(0, n_points, stride)


def _errors_at(field, scheme, h, states, dt, metric, stride):
    """Per-trajectory errors for validation states of shape (n_points, B, d)."""
    idx = subset_indices(states.shape[0], stride)
    span = stride * dt
    n_per = _round_half_up(span / h)
    if n_per < 1 or abs(n_per * h - span) > 1e-9 * span:
        raise AlignmentError(f"h={h!r} does not divide the snapping span {span!r}")
    x = states[0]
    devs = [np.zeros(states.shape[1])]
    try:
        with np.errstate(over="ignore"):
            for k in idx[1:]:
                x = advance(scheme, field, x, h, n_per)
                devs.append(np.linalg.norm(states[k] - x, axis=-1))
    except DivergenceError:
        return np.full(states.shape[1], np.inf)
    devs = np.array(devs)  # (|S|, B)
    if metric == "endpoint":
        return devs[-1]
    if metric == "max":
        return devs.max(axis=0)
    return devs.mean(axis=0)


def trajectory_error(field, scheme, h, val: Trajectory, metric="mean", stride=5) -> float:
    """Error of a rollout at step ``h`` against a regular validation trajectory."""
    metric = parse_metric(metric)
    scheme = SchemeKind.parse(scheme)
    dt = val.regular_spacing()
    states = val.states[:, None, :]
    return float(_errors_at(field, scheme, h, states, dt, metric, stride)[0])


def _group_by_shape(vals):
    groups: dict[int, list[int]] = {}
    for i, v in enumerate(vals):
        groups.setdefault(len(v), []).append(i)
    return groups


def _sweep_one(args):
    field, scheme, h, blocks, dt, metric, stride, n_traj = args
    out = np.empty(n_traj)
    for idxs, states in blocks:
        out[idxs] = _errors_at(field, scheme, h, states, dt, metric, stride)
    return out


def _tail_mean(values, n=3):
    vals = np.asarray(values[:n], dtype=float)
    return float(np.mean(vals)) if len(vals) else math.nan


def _verdict(hs, errs, h_dt, err_dt, epsilon):
    if not math.isfinite(err_dt):
        return False
    limit = (1.0 + epsilon) * err_dt
    for h, e in zip(hs, errs):
        if h < h_dt * (1 - 1e-9) and not e <= limit:
            return False
    return True


def loglog_slope(hs, errs, floor=1e-11):
    hs, errs = np.asarray(hs, dtype=float), np.asarray(errs, dtype=float)
    ok = np.isfinite(errs) & (errs > floor)
    if ok.sum() < 2:
        return None
    return float(np.polyfit(np.log(hs[ok]), np.log(errs[ok]), 1)[0])


def run_convergence_test(field, scheme, vals, config: TestConfig | None = None,
                         jobs: int = 1) -> ConvergenceReport:
    config = config or TestConfig()
    scheme = SchemeKind.parse(scheme)
    if isinstance(vals, Trajectory):
        vals = [vals]
    if not vals:
        raise ValueError("need at least one validation trajectory")
    spacings = [v.regular_spacing() for v in vals]
    dt = config.dt if config.dt is not None else spacings[0]
    if not np.allclose(spacings, dt, rtol=1e-9, atol=0):
        raise ValueError("validation spacing differs from the test dt")
    stride = config.stride

    grid = h_grid(dt, config.m)
    span = stride * dt
    snapped: dict[float, list[float]] = {}
    dropped, clamped = [], []
    for h_target in grid:
        if h_target > span:
            clamped.append(h_target)
        h = select_step(h_target, dt, stride)
        if h is None:
            dropped.append(h_target)
            continue
        key = next((k for k in snapped if abs(k - h) <= 1e-12 * h), h)
        snapped.setdefault(key, []).append(h_target)
    h_dt = select_step(dt, dt, stride)
    hs = sorted(snapped)

    blocks = [
        (np.array(idxs), np.stack([vals[i].states for i in idxs], axis=1))
        for idxs in _group_by_shape(vals).values()
    ]
    tasks = [(field, scheme, h, blocks, dt, config.metric, stride, len(vals)) for h in hs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_h = list(pool.map(_sweep_one, tasks))
    else:
        per_h = [_sweep_one(t) for t in tasks]
    table = np.array(per_h)  # (n_h, n_traj)

    i_dt = next(i for i, h in enumerate(hs) if abs(h - h_dt) <= 1e-12 * h_dt)
    per_traj = []
    for j in range(len(vals)):
        col = table[:, j]
        per_traj.append(TrajectoryReport(
            points=list(zip(hs, col.tolist())),
            error_at_dt=float(col[i_dt]),
            plateau_b=_tail_mean(col),
            verdict=_verdict(hs, col, h_dt, float(col[i_dt]), config.epsilon),
        ))
    agg = table.mean(axis=1)
    points = [
        CurvePoint(h, float(agg[i]), snapped[h], table[i].tolist())
        for i, h in enumerate(hs)
    ]
    fine = [i for i, h in enumerate(hs) if h <= h_dt * (1 + 1e-9)]
    return ConvergenceReport(
        config=config.to_dict() | {"dt": dt},
        scheme=scheme.tag,
        dt=dt,
        h_dt=h_dt,
        points=points,
        error_at_dt=float(agg[i_dt]),
        plateau_b=_tail_mean(agg),
        verdict=all(t.verdict for t in per_traj),
        per_trajectory=per_traj,
        dropped=dropped,
        clamped=clamped,
        slope=loglog_slope([hs[i] for i in fine], [agg[i] for i in fine]),
    )


def write_report(report: ConvergenceReport, json_path, csv_dir=None) -> list[Path]:
    """Write the JSON report and ``h,error`` CSVs (aggregate + one per trajectory)."""
    json_path = Path(json_path)
    json_path.write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    written = [json_path]
    csv_dir = Path(csv_dir) if csv_dir else json_path.parent
    stem = json_path.stem
    written.append(write_curve_csv(report.hs, report.errors, csv_dir / f"{stem}.csv"))
    for j, tr in enumerate(report.per_trajectory):
        hs, errs = zip(*tr.points)
        written.append(write_curve_csv(hs, errs, csv_dir / f"{stem}.traj{j}.csv"))
    return written


def write_curve_csv(hs, errors, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["h", "error"])
        for h, e in zip(hs, errors):
            w.writerow([repr(float(h)), repr(float(e))])
    return path


def read_curve_csv(path):
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if [c.strip() for c in rows[0]] != ["h", "error"]:
        raise ValueError(f"{path}: expected header h,error")
    data = np.array([[float(a), float(b)] for a, b in rows[1:] if a])
    return data[:, 0], data[:, 1]


@dataclass
class DiscoveryResult:
    model: object
    report: ConvergenceReport | None
    order_used: int | None
    converged: bool
    notes: list[str] = field(default_factory=list)
    history: list[tuple[int, bool]] = field(default_factory=list)


DISCOVERY_ORDERS = (1, 2, 4)


def discover(train_data, vals, train_config, test_config: TestConfig | None = None,
             quit_order: int = 4, train_fn=None, jobs: int = 1) -> DiscoveryResult:
    """Train at increasing temporal order until the model passes the test.

    ``train_fn(train_data, scheme, train_config)`` returns a model exposing a
    vector field through ``as_field``; it defaults to ODE-Net training on
    ``make_pairs(train_data)``. The inference scheme matches the training one.
    """
    from . import odenet

    if quit_order > 4 or quit_order < 1:
        raise ValueError("quit_order must lie in 1..4")
    if train_fn is None:
        def train_fn(data, scheme, cfg):
            cfg = odenet.TrainConfig(**(cfg.to_dict() | {"scheme": scheme.tag}))
            model = odenet.train(odenet.make_pairs(data), cfg)
            if model.diverged:
                raise DivergenceError("training diverged")
            return model, odenet.as_field(model)

    result = DiscoveryResult(None, None, None, False)
    for order in DISCOVERY_ORDERS:
        if order > quit_order:
            break
        scheme = SchemeKind.from_order(order)
        try:
            model, fld = train_fn(train_data, scheme, train_config)
        except DivergenceError:
            result.notes.append(f"training diverged at order {order}; skipped")
            log.warning("training diverged at order %d", order)
            continue
        report = run_convergence_test(fld, scheme, vals, test_config, jobs=jobs)
        result.model, result.report, result.order_used = model, report, order
        result.history.append((order, report.verdict))
        if report.verdict:
            result.converged = True
            return result
    result.notes.append(f"Failed to converge before temporal accuracy order {quit_order}")
    return result
