"""Analytic model of learning dx/dt = lambda*x with a scalar linear ODE-Net.

A one-step scheme of order p applied to ``w*x`` multiplies the state by the
truncated exponential ``T_p(w*dt)``, so the best a noise-free fit can do is a
root of ``T_p(w*dt) = exp(lambda*dt)``. Everything else here follows from that
root: the inference error curve, its h -> 0 plateau and the leading-order
distance between the learned and true rates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_ROOT_TOL = 1e-13


class NoRootError(ValueError):
    pass


@dataclass(frozen=True)
class LinearSetting:
    lam: float
    dt: float
    p: int = 1
    q: int | None = None
    epsilon: float = 0.0
    k: float = 1.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.p < 1 or (self.q is not None and self.q < 1):
            raise ValueError("orders must be positive")

    @property
    def q_eff(self) -> int:
        return self.p if self.q is None else self.q


@dataclass(frozen=True)
class RootResult:
    w: float | None
    residual: float

    @property
    def exists(self) -> bool:
        return self.w is not None


def taylor_poly(z, p: int):
    """Sum_{i=0..p} z^i / i!."""
    if p < 1:
        raise ValueError("p must be >= 1")
    return 1.0 + taylor_tail(z, p)


def taylor_tail(z, p: int):
    """T_p(z) - 1, evaluated without cancellation for small z."""
    z = np.asarray(z, dtype=np.float64)
    term = np.ones_like(z)
    acc = np.zeros_like(z)
    for i in range(1, p + 1):
        term = term * z / i
        acc = acc + term
    return acc if acc.ndim else float(acc)


def _residual(z, p, target_m1):
    return taylor_tail(z, p) - target_m1


def _bisect(f, lo, hi, iters=200):
    flo = f(lo)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        fm = f(mid)
        if fm == 0:
            return mid
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _even_order_minimiser(p):
    """Location z* < 0 of the minimum of T_p for even p (root of T_{p-1})."""
    lo = -1.0
    while taylor_poly(lo, p - 1) > 0:
        lo *= 2.0
    return _bisect(lambda z: taylor_poly(z, p - 1), lo, 0.0)


def existence_threshold(p: int) -> float:
    """Largest |lambda|*dt (lambda < 0) for which an even-order root exists."""
    if p % 2:
        return math.inf
    zs = _even_order_minimiser(p)
    return -math.log(zs**p / math.factorial(p))


def existence_condition(lam: float, dt: float, p: int) -> bool:
    if lam >= 0 or p % 2:
        return True
    return abs(lam) * dt <= existence_threshold(p)


def solve_w(lam: float, dt: float, p: int) -> RootResult:
    """Root of T_p(w*dt) = exp(lam*dt) with the same sign as lam.

    For even p and lam < 0 there are two roots; the one on the branch that
    tends to lam as dt -> 0 (between the minimiser of T_p and zero) is taken.
    Returns a RootResult with ``w=None`` when no real root exists.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if lam == 0:
        return RootResult(0.0, 0.0)
    target_m1 = math.expm1(lam * dt)
    f = lambda z: _residual(z, p, target_m1)
    if lam > 0:
        lo, hi = 0.0, target_m1  # T_p(z) >= 1 + z bounds the root above
    elif p % 2:
        lo, hi = lam * dt, 0.0
    else:
        zs = _even_order_minimiser(p)
        if f(zs) > 0:
            return RootResult(None, float(f(zs)))
        lo, hi = zs, 0.0
    z = _bisect(f, lo, hi)
    # Newton polish; derivative of T_p is T_{p-1}
    for _ in range(5):
        d = taylor_poly(z, p - 1) if p > 1 else 1.0
        if d == 0:
            break
        z_new = z - f(z) / d
        if not lo <= z_new <= hi or abs(f(z_new)) > abs(f(z)):
            break
        z = z_new
    res = abs(f(z))
    # an absolute 1e-13 is below one ulp once exp(lam*dt) grows past a few units
    if res > _ROOT_TOL * max(1.0, target_m1 + 1.0):
        raise ArithmeticError(f"root residual {res:.3g} above tolerance")
    return RootResult(z / dt, res)


def w_euler_closed_form(lam: float, dt: float) -> float:
    return math.expm1(lam * dt) / dt


def w_rk2_closed_form(lam: float, dt: float) -> float | None:
    disc = 2.0 * math.exp(lam * dt) - 1.0
    if disc < 0:
        return None
    return (math.sqrt(disc) - 1.0) / dt


def learned_rate(setting: LinearSetting) -> float:
    root = solve_w(setting.lam, setting.dt, setting.p)
    if not root.exists:
        raise NoRootError(
            f"no real root for p={setting.p}, lambda={setting.lam}, dt={setting.dt}"
        )
    return root.w + setting.epsilon


def error_curve(setting: LinearSetting, h):
    """(k/h) * |exp(lam*h) - T_q(h*w_tilde)| for scalar or array h."""
    h = np.asarray(h, dtype=np.float64)
    if np.any(h <= 0):
        raise ValueError("h must be positive")
    wt = learned_rate(setting)
    diff = np.expm1(setting.lam * h) - taylor_tail(h * wt, setting.q_eff)
    out = setting.k * np.abs(diff) / h
    return out if out.ndim else float(out)


def plateau_b(setting: LinearSetting) -> float:
    """h -> 0 limit of the error curve: k * |w_tilde - lambda|."""
    return setting.k * abs(learned_rate(setting) - setting.lam)


def bound_w_minus_lambda(setting: LinearSetting) -> float:
    """Leading-order bound k * (|lam|^(p+1) dt^p / (p+1)! + |eps|)."""
    p = setting.p
    lead = abs(setting.lam) ** (p + 1) * setting.dt**p / math.factorial(p + 1)
    return setting.k * (lead + abs(setting.epsilon))


def fit_k(setting: LinearSetting, hs, errors, tail: int = 3) -> float:
    """Scale k matching the analytic curve to empirical errors.

    Least squares on log-error over the ``tail`` smallest step sizes.
    """
    hs = np.asarray(hs, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    order = np.argsort(hs)[:tail]
    unit = LinearSetting(setting.lam, setting.dt, setting.p, setting.q,
                         setting.epsilon, 1.0)
    model = np.asarray(error_curve(unit, hs[order]))
    ok = (errors[order] > 0) & (model > 0) & np.isfinite(errors[order])
    if not ok.any():
        raise ValueError("no usable points to fit k")
    return float(np.exp(np.mean(np.log(errors[order][ok]) - np.log(model[ok]))))


def h_range(h_min: float, h_max: float, n: int) -> np.ndarray:
    return np.geomspace(h_min, h_max, n)
