"""Benchmark dynamical systems and reference-data generation.

Reference data come from the closed-form solution for the harmonic oscillator
and from over-refined RK4 (``dt / 1000`` internal steps) for everything else.
The Cartesian pendulum is integrated in angle space and mapped to (x, y).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .integrators import DivergenceError
from .trajectory import Trajectory, TrajectoryError

OVERREFINE = 1000
RNG_NAME = "numpy.random.Philox"


class SystemKind(enum.Enum):
    HARMONIC_OSCILLATOR = "HarmonicOscillator"
    NONLINEAR_PENDULUM = "NonlinearPendulum"
    LOTKA_VOLTERRA = "LotkaVolterra"
    CARTESIAN_PENDULUM = "CartesianPendulum"

    @classmethod
    def parse(cls, value) -> "SystemKind":
        if isinstance(value, SystemKind):
            return value
        key = str(value).replace("_", "").replace("-", "").lower()
        for kind in cls:
            if key in (kind.value.lower(), kind.name.replace("_", "").lower()):
                return kind
        aliases = {
            "harmonic": cls.HARMONIC_OSCILLATOR,
            "ho": cls.HARMONIC_OSCILLATOR,
            "pendulum": cls.NONLINEAR_PENDULUM,
            "lv": cls.LOTKA_VOLTERRA,
            "cartesian": cls.CARTESIAN_PENDULUM,
        }
        if key in aliases:
            return aliases[key]
        raise ValueError(f"unknown system {value!r}")


DEFAULT_PARAMS = {
    SystemKind.HARMONIC_OSCILLATOR: {},
    SystemKind.NONLINEAR_PENDULUM: {"omega0": 1.0},
    SystemKind.LOTKA_VOLTERRA: {"a": 1.5, "b": 1.0, "c": 1.0, "d": 3.0},
    SystemKind.CARTESIAN_PENDULUM: {"L": 1.0, "g": 1.0},
}
STATE_DIM = {
    SystemKind.HARMONIC_OSCILLATOR: 2,
    SystemKind.NONLINEAR_PENDULUM: 2,
    SystemKind.LOTKA_VOLTERRA: 2,
    SystemKind.CARTESIAN_PENDULUM: 4,
}


@dataclass
class SystemSpec:
    kind: SystemKind = SystemKind.HARMONIC_OSCILLATOR
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = SystemKind.parse(self.kind)
        merged = dict(DEFAULT_PARAMS[self.kind])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise ValueError(f"unknown parameters for {self.kind.value}: {sorted(unknown)}")
        merged.update({k: float(v) for k, v in self.params.items()})
        if any(not v > 0 for v in merged.values()):
            raise ValueError("system parameters must be strictly positive")
        self.params = merged

    @property
    def state_dim(self) -> int:
        return STATE_DIM[self.kind]

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "params": dict(self.params)}


@dataclass
class SamplingSpec:
    dt: float
    n_points: int
    jitter_frac: float = 0.2
    skip_prob: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_points < 1:
            raise ValueError("n_points must be at least 1")
        if not 0 <= self.jitter_frac < 0.5:
            raise ValueError("jitter_frac must lie in [0, 0.5)")
        if not 0 <= self.skip_prob <= 1:
            raise ValueError("skip_prob must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "dt": self.dt,
            "n_points": self.n_points,
            "jitter_frac": self.jitter_frac,
            "skip_prob": self.skip_prob,
            "seed": self.seed,
        }


class SystemField:
    """Right-hand side of a benchmark system; picklable for worker pools."""

    def __init__(self, spec: SystemSpec):
        self.spec = spec
        self.kind = spec.kind
        self.p = spec.params

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        out = np.empty_like(x)
        k = self.kind
        if k is SystemKind.HARMONIC_OSCILLATOR:
            out[..., 0] = x[..., 1]
            out[..., 1] = -x[..., 0]
        elif k is SystemKind.NONLINEAR_PENDULUM:
            out[..., 0] = x[..., 1]
            out[..., 1] = -self.p["omega0"] ** 2 * np.sin(x[..., 0])
        elif k is SystemKind.LOTKA_VOLTERRA:
            a, b, c, d = (self.p[n] for n in "abcd")
            u, v = x[..., 0], x[..., 1]
            out[..., 0] = a * u - b * u * v
            out[..., 1] = c * u * v - d * v
        else:
            L, g = self.p["L"], self.p["g"]
            px, py, vx, vy = (x[..., i] for i in range(4))
            # gravity along +y; tension keeps the bob on the circle of radius L
            f = -((vx * vx + vy * vy) / L + g * py / L)
            out[..., 0] = vx
            out[..., 1] = vy
            out[..., 2] = f * px / L
            out[..., 3] = f * py / L + g
        return out

    def __repr__(self):
        return f"SystemField({self.kind.value}, {self.p})"


def field(spec: SystemSpec) -> SystemField:
    return SystemField(spec)


def _angle_spec(spec: SystemSpec) -> SystemSpec:
    L, g = spec.params["L"], spec.params["g"]
    return SystemSpec(SystemKind.NONLINEAR_PENDULUM, {"omega0": math.sqrt(g / L)})


def cartesian_from_angle(theta, omega, L=1.0) -> np.ndarray:
    """Map pendulum angle/rate to (x, y, vx, vy) with the rest position at y=+L."""
    theta = np.asarray(theta, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    s, c = np.sin(theta), np.cos(theta)
    return np.stack([L * s, L * c, L * c * omega, -L * s * omega], axis=-1)


def angle_from_cartesian(state, L=1.0) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    px, py, vx, vy = (state[..., i] for i in range(4))
    theta = np.arctan2(px, py)
    omega = (py * vx - px * vy) / (L * L)
    return np.stack([theta, omega], axis=-1)


def _rk4_refined(f, x, gap, substeps):
    h = gap / substeps
    h2, h6 = 0.5 * h, h / 6.0
    for _ in range(substeps):
        k1 = f(x)
        k2 = f(x + h2 * k1)
        k3 = f(x + h2 * k2)
        k4 = f(x + h * k3)
        x = x + h6 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def _oracle_states(spec, x0, gaps, substeps=OVERREFINE):
    """States at cumulative ``gaps`` from ``x0``; ``x0`` may carry batch axes."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape[-1] != spec.state_dim:
        raise ValueError(f"{spec.kind.value} has state dimension {spec.state_dim}")
    if spec.kind is SystemKind.HARMONIC_OSCILLATOR:
        t = np.concatenate([[0.0], np.cumsum(gaps)])
        return _harmonic_closed_form(x0, t)
    if spec.kind is SystemKind.CARTESIAN_PENDULUM:
        L = spec.params["L"]
        ang = angle_from_cartesian(x0, L)
        traj = _oracle_states(_angle_spec(spec), ang, gaps, substeps)
        return cartesian_from_angle(traj[..., 0], traj[..., 1], L)
    f = SystemField(spec)
    x = x0
    out = [x]
    with np.errstate(over="ignore", invalid="ignore"):
        for k, gap in enumerate(gaps):
            x = _rk4_refined(f, x, float(gap), substeps)
            if not np.all(np.isfinite(x)):
                raise DivergenceError("reference integration diverged", step_index=k)
            out.append(x)
    return np.array(out)


def _harmonic_closed_form(x0, t):
    t = np.asarray(t, dtype=np.float64)
    c, s = np.cos(t), np.sin(t)
    # leading axis: time; trailing: batch..., state
    c = c.reshape((-1,) + (1,) * (x0.ndim - 1))
    s = s.reshape((-1,) + (1,) * (x0.ndim - 1))
    x = x0[..., 0] * c + x0[..., 1] * s
    y = -x0[..., 0] * s + x0[..., 1] * c
    return np.stack([x, y], axis=-1)


def _metadata(spec, x0, sampling, substeps):
    return {
        "system": spec.kind.value,
        "params": dict(spec.params),
        "x0": [float(v) for v in np.ravel(x0)],
        "sampling": sampling,
        "seed": sampling.get("seed"),
        "rng": RNG_NAME,
        "oracle": "closed-form"
        if spec.kind is SystemKind.HARMONIC_OSCILLATOR
        else f"rk4/{substeps}",
    }


def reference_trajectory(spec: SystemSpec, x0, dt: float, n_points: int,
                         substeps: int = OVERREFINE) -> Trajectory:
    if not dt > 0 or n_points < 1:
        raise ValueError("need dt > 0 and n_points >= 1")
    times = dt * np.arange(n_points)
    gaps = np.full(n_points - 1, float(dt))
    states = _oracle_states(spec, x0, gaps, substeps)
    sampling = SamplingSpec(dt, n_points, 0.0, 0.0, None).to_dict()
    return Trajectory(times, states, gaps=gaps,
                      meta=_metadata(spec, x0, sampling, substeps))


def sample_times(sampling: SamplingSpec):
    """Jittered, frame-skipped sample times and their recorded gaps."""
    n = sampling.n_points
    rng = np.random.Generator(np.random.Philox(sampling.seed))
    jitter = rng.uniform(-sampling.jitter_frac, sampling.jitter_frac, size=max(n - 1, 0))
    nominal = sampling.dt * (1.0 + jitter)
    keep = np.ones(n, dtype=bool)
    if n > 2:
        keep[1:-1] = rng.random(n - 2) >= sampling.skip_prob
        if not keep[1:-1].any():
            raise TrajectoryError("every interior sample was dropped")
    edges = np.concatenate([[0.0], np.cumsum(nominal)])
    kept = np.flatnonzero(keep)
    # merged gaps are sums of the nominal gaps they span
    gaps = np.array([edges[j] - edges[i] for i, j in zip(kept[:-1], kept[1:])])
    times = np.concatenate([[0.0], np.cumsum(gaps)])
    return times, gaps


def irregular_trajectory(spec: SystemSpec, x0, sampling: SamplingSpec,
                         substeps: int = OVERREFINE) -> Trajectory:
    if sampling.jitter_frac == 0 and sampling.skip_prob == 0:
        traj = reference_trajectory(spec, x0, sampling.dt, sampling.n_points, substeps)
        traj.meta.update(_metadata(spec, x0, sampling.to_dict(), substeps))
        return traj
    times, gaps = sample_times(sampling)
    states = _oracle_states(spec, x0, gaps, substeps)
    meta = _metadata(spec, x0, sampling.to_dict(), substeps)
    return Trajectory(times, states, gaps=gaps, meta=meta)


def multi_ic_dataset(spec: SystemSpec, ic_list, dt: float, n_points: int,
                     substeps: int = OVERREFINE) -> list[Trajectory]:
    ics = np.asarray(ic_list, dtype=np.float64)
    if ics.ndim != 2 or len(ics) == 0:
        raise ValueError("ic_list must be a non-empty list of states")
    gaps = np.full(n_points - 1, float(dt))
    batch = _oracle_states(spec, ics, gaps, substeps)  # (time, ic, state)
    times = dt * np.arange(n_points)
    sampling = SamplingSpec(dt, n_points, 0.0, 0.0, None).to_dict()
    return [
        Trajectory(times, batch[:, i], gaps=gaps,
                   meta=_metadata(spec, ics[i], sampling, substeps))
        for i in range(len(ics))
    ]


def pendulum_energy(state, omega0=1.0):
    state = np.asarray(state)
    return 0.5 * state[..., 1] ** 2 - omega0**2 * np.cos(state[..., 0])


def lotka_volterra_invariant(state, params):
    u, v = state[..., 0], state[..., 1]
    a, b, c, d = (params[n] for n in "abcd")
    return c * u + b * v - d * np.log(u) - a * np.log(v)
