"""Sparse regression of dx/dt onto a polynomial library.

Derivatives come from central finite differences of the samples, so the
stencil order plays the role the integrator order plays for ODE-Nets.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from itertools import combinations_with_replacement
from pathlib import Path

import numpy as np

from .integrators import SchemeKind
from .trajectory import Trajectory, TrajectoryError

log = logging.getLogger(__name__)

FD_ORDERS = (1, 2, 4)
_MIN_POINTS = {1: 2, 2: 3, 4: 5}


@dataclass(frozen=True)
class PolyBasis:
    state_dim: int
    degree: int
    terms: tuple

    @classmethod
    def build(cls, state_dim: int, degree: int = 3) -> "PolyBasis":
        if state_dim < 1 or degree < 0:
            raise ValueError("need state_dim >= 1 and degree >= 0")
        terms = []
        for deg in range(degree + 1):
            for combo in combinations_with_replacement(range(state_dim), deg):
                exps = [0] * state_dim
                for i in combo:
                    exps[i] += 1
                terms.append(tuple(exps))
        return cls(state_dim, degree, tuple(terms))

    def __len__(self):
        return len(self.terms)

    def names(self, symbols=None) -> list[str]:
        symbols = symbols or [f"x{i}" for i in range(self.state_dim)]
        out = []
        for exps in self.terms:
            parts = []
            for s, e in zip(symbols, exps):
                if e == 1:
                    parts.append(s)
                elif e > 1:
                    parts.append(f"{s}^{e}")
            out.append("*".join(parts) or "1")
        return out


def features(basis: PolyBasis, x) -> np.ndarray:
    """Monomials of ``x`` in basis order; ``x`` may carry leading batch axes."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != basis.state_dim:
        raise ValueError(f"expected state dimension {basis.state_dim}, got {x.shape[-1]}")
    exps = np.asarray(basis.terms, dtype=np.int64)  # (terms, d)
    return np.prod(x[..., None, :] ** exps, axis=-1)


def fd_derivatives(traj: Trajectory, order: int):
    """Finite-difference estimates of dx/dt at the samples with a full stencil.

    Returns ``(indices, derivatives)``.
    """
    if order not in FD_ORDERS:
        raise ValueError(f"finite-difference order must be one of {FD_ORDERS}")
    n = len(traj)
    if n < _MIN_POINTS[order]:
        raise TrajectoryError(
            f"FD-{order} needs at least {_MIN_POINTS[order]} points, got {n}"
        )
    dt = traj.regular_spacing()
    x = traj.states
    if order == 1:
        idx = np.arange(0, n - 1)
        d = (x[1:] - x[:-1]) / dt
    elif order == 2:
        idx = np.arange(1, n - 1)
        d = (x[2:] - x[:-2]) / (2.0 * dt)
    else:
        idx = np.arange(2, n - 2)
        d = (
            -x[4:] / 12.0 + 2.0 * x[3:-1] / 3.0 - 2.0 * x[1:-3] / 3.0 + x[:-4] / 12.0
        ) / dt
    return idx, d


def _solve(theta, y, ridge):
    if ridge == 0:
        if np.linalg.matrix_rank(theta) < theta.shape[1]:
            raise np.linalg.LinAlgError("rank-deficient active set with ridge=0")
        return np.linalg.lstsq(theta, y, rcond=None)[0]
    g = theta.T @ theta + ridge * np.eye(theta.shape[1])
    return np.linalg.solve(g, theta.T @ y)


def stlsq(theta, dx, threshold: float = 0.05, ridge: float = 1e-10):
    """Sequential threshold least squares, one output column at a time.

    Returns ``(xi, empty_rows)`` with ``xi`` shaped (outputs, terms).
    """
    theta = np.asarray(theta, dtype=np.float64)
    dx = np.asarray(dx, dtype=np.float64)
    if dx.ndim == 1:
        dx = dx[:, None]
    if theta.shape[0] != dx.shape[0]:
        raise ValueError("feature and target row counts differ")
    if threshold < 0 or ridge < 0:
        raise ValueError("threshold and ridge must be non-negative")
    n_terms = theta.shape[1]
    xi = np.zeros((dx.shape[1], n_terms))
    empty = []
    for r in range(dx.shape[1]):
        active = np.ones(n_terms, dtype=bool)
        coef = np.zeros(n_terms)
        for _ in range(n_terms + 1):
            coef = np.zeros(n_terms)
            if active.any():
                coef[active] = _solve(theta[:, active], dx[:, r], ridge)
            keep = active & (np.abs(coef) >= threshold)
            if np.array_equal(keep, active):
                break
            active = keep
        coef[~active] = 0.0
        if not active.any():
            empty.append(r)
            log.warning("threshold %g removed every term of output %d", threshold, r)
        xi[r] = coef
    return xi, empty


@dataclass
class SindyModel:
    basis: PolyBasis
    xi: np.ndarray
    threshold_used: float
    fd_order: int = 4
    empty_rows: tuple = ()

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=np.float64)
        if self.xi.shape != (self.basis.state_dim, len(self.basis)):
            raise ValueError(f"xi has shape {self.xi.shape}")
        if not np.all(np.isfinite(self.xi)):
            raise ValueError("coefficients must be finite")

    @property
    def scheme(self) -> SchemeKind:
        """Integrator of matching order for inference."""
        return SchemeKind.from_order(self.fd_order)

    def describe(self, symbols=None) -> list[str]:
        names = self.basis.names(symbols)
        lines = []
        for r, row in enumerate(self.xi):
            terms = [f"{c:+.6g} {n}" for c, n in zip(row, names) if c != 0]
            lines.append(f"d{r}/dt = " + (" ".join(terms) or "0"))
        return lines


class SindyField:
    def __init__(self, model: SindyModel):
        self.basis = model.basis
        self.xi = model.xi

    def __call__(self, x):
        return features(self.basis, x) @ self.xi.T


def model_field(model: SindyModel) -> SindyField:
    return SindyField(model)


def fit(trajs, basis: PolyBasis | None = None, fd_order: int = 4,
        threshold: float = 0.05, ridge: float = 1e-10, degree: int = 3) -> SindyModel:
    if isinstance(trajs, Trajectory):
        trajs = [trajs]
    if not trajs:
        raise ValueError("no trajectories")
    if basis is None:
        basis = PolyBasis.build(trajs[0].dim, degree)
    rows, targets = [], []
    for tr in trajs:
        if tr.dim != basis.state_dim:
            raise ValueError("trajectory dimension does not match the basis")
        idx, d = fd_derivatives(tr, fd_order)
        rows.append(features(basis, tr.states[idx]))
        targets.append(d)
    xi, empty = stlsq(np.concatenate(rows), np.concatenate(targets), threshold, ridge)
    return SindyModel(basis, xi, threshold, fd_order, tuple(empty))


def save_model(model: SindyModel, path) -> None:
    payload = {
        "state_dim": model.basis.state_dim,
        "degree": model.basis.degree,
        "terms": [list(t) for t in model.basis.terms],
        "xi": model.xi.ravel().tolist(),
        "threshold": model.threshold_used,
        "fd_order": model.fd_order,
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def load_model(path) -> SindyModel:
    d = json.loads(Path(path).read_text())
    basis = PolyBasis(d["state_dim"], d["degree"], tuple(tuple(t) for t in d["terms"]))
    if len(basis) != math.comb(basis.state_dim + basis.degree, basis.degree):
        raise ValueError("term list does not match state_dim and degree")
    xi = np.asarray(d["xi"], dtype=np.float64).reshape(basis.state_dim, len(basis))
    return SindyModel(basis, xi, d["threshold"], d.get("fd_order", 4))
