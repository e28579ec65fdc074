"""Explicit one-step Runge-Kutta schemes over autonomous vector fields.

A vector field is any callable mapping a state array of shape ``(..., d)`` to
its time derivative of the same shape. Leading axes are batch axes, so one
rollout can advance several initial conditions at once.
"""

from __future__ import annotations

import enum
from typing import Callable, Sequence

import numpy as np

from .trajectory import Trajectory

VectorField = Callable[[np.ndarray], np.ndarray]


class DivergenceError(ArithmeticError):
    """A stage or state became non-finite."""

    def __init__(self, message, stage=None, step_index=None):
        super().__init__(message)
        self.stage = stage
        self.step_index = step_index


class AlignmentError(ValueError):
    pass


class IndeterminateOrderError(ValueError):
    pass


class SchemeKind(enum.Enum):
    EULER = ("Euler", 1)
    MIDPOINT = ("Midpoint", 2)
    RK4 = ("RK4", 4)

    def __init__(self, tag, order):
        self.tag = tag
        self.order = order

    @classmethod
    def parse(cls, value) -> "SchemeKind":
        if isinstance(value, SchemeKind):
            return value
        key = str(value).strip().lower()
        for kind in cls:
            if key in (kind.tag.lower(), kind.name.lower(), str(kind.order)):
                return kind
        raise ValueError(f"unknown scheme {value!r}")

    @classmethod
    def from_order(cls, order: int) -> "SchemeKind":
        for kind in cls:
            if kind.order == order:
                return kind
        raise ValueError(f"no scheme of order {order}")

    @property
    def tableau(self):
        return _TABLEAUS[self]

    def __str__(self):
        return self.tag


# (stage coupling rows a[i][:i], output weights b)
_TABLEAUS = {
    SchemeKind.EULER: ((), (1.0,)),
    SchemeKind.MIDPOINT: (((0.5,),), (0.0, 1.0)),
    SchemeKind.RK4: (
        ((0.5,), (0.0, 0.5), (0.0, 0.0, 1.0)),
        (1.0 / 6.0, 2.0 / 6.0, 2.0 / 6.0, 1.0 / 6.0),
    ),
}


def stage_inputs(scheme: SchemeKind):
    """Coupling rows: stage i is evaluated at x + h * sum_j a[i][j] * k_j."""
    a, _ = _TABLEAUS[scheme]
    return ((),) + tuple(a)


def step(scheme: SchemeKind, field: VectorField, x, h: float) -> np.ndarray:
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    rows = stage_inputs(scheme)
    _, b = _TABLEAUS[scheme]
    ks = []
    for i, row in enumerate(rows):
        z = x
        for aij, kj in zip(row, ks):
            if aij:
                z = z + (h * aij) * kj
        k = field(z)
        if not np.all(np.isfinite(k)):
            raise DivergenceError(f"non-finite value in stage {i + 1}", stage=i + 1)
        ks.append(k)
    out = x
    for bi, ki in zip(b, ks):
        if bi:
            out = out + (h * bi) * ki
    if not np.all(np.isfinite(out)):
        raise DivergenceError("non-finite state after step", stage=len(ks))
    return out


def advance(scheme: SchemeKind, field: VectorField, x, h: float, n: int) -> np.ndarray:
    """Take ``n`` steps, checking for divergence only at the end.

    Non-finite values propagate through the arithmetic, so a single check
    after the loop is enough and keeps long sweeps cheap.
    """
    rows = stage_inputs(scheme)
    _, b = _TABLEAUS[scheme]
    coupling = [[(j, h * aij) for j, aij in enumerate(row) if aij] for row in rows]
    weights = [(i, h * bi) for i, bi in enumerate(b) if bi]
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(n):
            ks = []
            for row in coupling:
                z = x
                for j, c in row:
                    z = z + c * ks[j]
                ks.append(field(z))
            for i, c in weights:
                x = x + c * ks[i]
    if not np.all(np.isfinite(x)):
        raise DivergenceError("non-finite state during rollout")
    return x


def rollout(scheme, field, x0, h, n_steps: int, t0: float = 0.0) -> Trajectory:
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    x = np.asarray(x0, dtype=np.float64)
    states = [x]
    for n in range(n_steps):
        try:
            x = step(scheme, field, x, h)
        except DivergenceError as exc:
            exc.step_index = n
            raise
        states.append(x)
    times = t0 + h * np.arange(n_steps + 1)
    return Trajectory(times, np.array(states), meta={"scheme": scheme.tag, "h": h})


def steps_between(targets, h: float, rtol: float = 1e-9) -> np.ndarray:
    """Integer step counts covering each gap of ``targets`` with step ``h``."""
    targets = np.asarray(targets, dtype=np.float64)
    gaps = np.diff(targets)
    if np.any(gaps <= 0):
        raise AlignmentError("targets must be strictly increasing")
    counts = np.rint(gaps / h)
    bad = np.abs(counts * h - gaps) > rtol * np.maximum(gaps, h)
    if np.any(bad) or np.any(counts < 1):
        i = int(np.argmax(bad | (counts < 1)))
        raise AlignmentError(
            f"gap {gaps[i]!r} is not an integer multiple of h={h!r}"
        )
    return counts.astype(int)


def rollout_to_times(scheme, field, x0, h, targets) -> np.ndarray:
    """States at ``targets`` (first target is the start time of ``x0``).

    Returns an array of shape ``(len(targets),) + x0.shape``.
    """
    counts = steps_between(targets, h)
    x = np.asarray(x0, dtype=np.float64)
    out = [x]
    n = 0
    for c in counts:
        try:
            x = advance(scheme, field, x, h, int(c))
        except DivergenceError as exc:
            exc.step_index = n
            raise
        n += int(c)
        out.append(x)
    return np.array(out)


def observed_order(
    scheme: SchemeKind,
    field: VectorField,
    exact: Callable[[float], np.ndarray],
    h_list: Sequence[float],
    t_final: float = 1.0,
) -> float:
    """Slope of log(endpoint error) against log(h).

    Each h is snapped to ``t_final / n``. Points whose error sits within a
    thousand times the accumulated round-off of the rollout are treated as
    plateau and left out of the fit.
    """
    hs = np.asarray(sorted(h_list), dtype=np.float64)
    if len(hs) < 3 or hs[-1] / hs[0] < 10.0 * (1 - 1e-12):
        raise ValueError("need at least 3 step sizes spanning a decade")
    x0 = np.asarray(exact(0.0), dtype=np.float64)
    xT = np.asarray(exact(t_final), dtype=np.float64)
    scale = max(1.0, float(np.max(np.abs(x0))), float(np.max(np.abs(xT))))
    used_h, errs = [], []
    for h in hs:
        n = max(1, int(round(t_final / h)))
        hn = t_final / n
        x = x0
        for _ in range(n):
            x = step(scheme, field, x, hn)
        err = float(np.linalg.norm(x - xT))
        floor = 1e3 * n * np.finfo(float).eps * scale
        if err > floor:
            used_h.append(hn)
            errs.append(err)
    if len(used_h) < 2:
        raise IndeterminateOrderError("errors are at the round-off floor for all h")
    slope, _ = np.polyfit(np.log(used_h), np.log(errs), 1)
    return float(slope)
