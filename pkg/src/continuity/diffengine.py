"""Reverse-mode gradients of one-step integrator losses for small tanh MLPs.

The network is ``N(x) = W_L(... tanh(W_1 x + b_1) ...) + b_L``. Losses are
differentiated by unrolling the stages of an explicit Runge-Kutta step and
running ordinary backpropagation through the resulting graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .integrators import DivergenceError, SchemeKind, stage_inputs


@dataclass
class MlpParams:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if len(self.layer_dims) < 2 or any(d < 1 for d in self.layer_dims):
            raise ValueError(f"bad layer dims {self.layer_dims}")
        n = len(self.layer_dims) - 1
        if len(self.weights) != n or len(self.biases) != n:
            raise ValueError(f"expected {n} weight matrices and bias vectors")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[i + 1], self.layer_dims[i])
            if w.shape != shape:
                raise ValueError(f"weights[{i}] has shape {w.shape}, expected {shape}")
            if b.shape != (shape[0],):
                raise ValueError(f"biases[{i}] has shape {b.shape}, expected {shape[:1]}")
        if not all(np.all(np.isfinite(a)) for a in self.weights + self.biases):
            raise ValueError("parameters must be finite")

    @classmethod
    def zeros(cls, layer_dims) -> "MlpParams":
        dims = list(layer_dims)
        return cls(
            dims,
            [np.zeros((dims[i + 1], dims[i])) for i in range(len(dims) - 1)],
            [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)],
        )

    @classmethod
    def init(cls, layer_dims, rng: np.random.Generator) -> "MlpParams":
        """Uniform scaled init in +-sqrt(6 / (fan_in + fan_out)), zero biases."""
        dims = list(layer_dims)
        weights = []
        for i in range(len(dims) - 1):
            limit = np.sqrt(6.0 / (dims[i] + dims[i + 1]))
            weights.append(rng.uniform(-limit, limit, size=(dims[i + 1], dims[i])))
        return cls(dims, weights, [np.zeros(d) for d in dims[1:]])

    @property
    def arrays(self) -> list[np.ndarray]:
        return self.weights + self.biases

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays])

    def with_flat(self, vec) -> "MlpParams":
        vec = np.asarray(vec, dtype=np.float64)
        out, pos = [], 0
        for a in self.arrays:
            out.append(vec[pos : pos + a.size].reshape(a.shape))
            pos += a.size
        n = len(self.weights)
        return MlpParams(self.layer_dims, out[:n], out[n:])

    def copy(self) -> "MlpParams":
        return MlpParams(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )


@dataclass
class GradientRecord:
    loss: float
    grad_weights: list[np.ndarray]
    grad_biases: list[np.ndarray]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.grad_weights + self.grad_biases])


def mlp_eval(params: MlpParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.layer_dims[0]:
        raise ValueError(
            f"input has dimension {x.shape[-1]}, network expects {params.layer_dims[0]}"
        )
    a = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = a @ w.T + b
        if i < last:
            a = np.tanh(a)
    return a


def _forward(params, z):
    """Forward pass keeping the hidden activations for the backward pass."""
    acts = [z]
    a = z
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = a @ w.T + b
        if i < last:
            a = np.tanh(a)
        acts.append(a)
    return acts


def _backward(params, acts, gout, gws, gbs):
    """Accumulate parameter grads into gws/gbs; return the grad w.r.t. input."""
    g = gout
    for i in range(len(params.weights) - 1, -1, -1):
        if i < len(params.weights) - 1:
            g = g * (1.0 - acts[i + 1] ** 2)
        gws[i] += g.T @ acts[i]
        gbs[i] += g.sum(axis=0)
        g = g @ params.weights[i]
    return g


def batch_loss_grad(params, scheme, h, x_n, x_target, reduction="mean"):
    """Loss and gradient for a batch of one-step pairs.

    ``x_n`` and ``x_target`` have shape ``(B, d)``; ``h`` is a scalar or one
    step size per row. The per-pair loss is the squared Euclidean norm of the
    step residual; ``reduction`` is "mean" or "sum" over pairs.
    """
    x = np.atleast_2d(np.asarray(x_n, dtype=np.float64))
    y = np.atleast_2d(np.asarray(x_target, dtype=np.float64))
    hcol = np.broadcast_to(np.asarray(h, dtype=np.float64).reshape(-1, 1), (len(x), 1))
    if np.any(hcol <= 0):
        raise ValueError("step sizes must be positive")
    rows = stage_inputs(scheme)
    _, b = scheme.tableau

    with np.errstate(over="ignore", invalid="ignore"):
        caches, ks = [], []
        for row in rows:
            z = x
            for aij, kj in zip(row, ks):
                if aij:
                    z = z + (hcol * aij) * kj
            acts = _forward(params, z)
            caches.append(acts)
            ks.append(acts[-1])
        out = x
        for bi, ki in zip(b, ks):
            if bi:
                out = out + (hcol * bi) * ki
        r = out - y
        per_pair = np.sum(r * r, axis=1)
    if not np.all(np.isfinite(per_pair)):
        raise DivergenceError("non-finite loss")

    scale = 1.0 / len(x) if reduction == "mean" else 1.0
    loss = float(per_pair.sum() * scale)
    gout = 2.0 * scale * r

    gws = [np.zeros_like(w) for w in params.weights]
    gbs = [np.zeros_like(bb) for bb in params.biases]
    kbar = [(hcol * bi) * gout for bi in b]
    for i in range(len(rows) - 1, -1, -1):
        zbar = _backward(params, caches[i], kbar[i], gws, gbs)
        for j, aij in enumerate(rows[i]):
            if aij:
                kbar[j] = kbar[j] + (hcol * aij) * zbar
    return GradientRecord(loss, gws, gbs)


def one_step_loss_grad(params, scheme, h, x_n, x_target) -> GradientRecord:
    """Gradient of ||step(scheme, N, x_n, h) - x_target||^2 for a single pair."""
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.asarray(x_n, dtype=np.float64).reshape(1, -1)
    y = np.asarray(x_target, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != params.layer_dims[0] or y.shape[1] != params.layer_dims[-1]:
        raise ValueError("state dimension does not match the network")
    return batch_loss_grad(params, scheme, h, x, y, reduction="sum")


def one_step_loss(params, scheme, h, x_n, x_target) -> float:
    return one_step_loss_grad(params, scheme, h, x_n, x_target).loss


def finite_diff_grad(params, scheme, h, x_n, x_target, probe=1e-6) -> GradientRecord:
    """Central-difference gradient, one coordinate at a time (test oracle)."""
    if not probe > 0:
        raise ValueError("probe must be positive")
    from .integrators import step

    def loss_at(p):
        field = lambda z: mlp_eval(p, z)
        r = step(scheme, field, np.asarray(x_n, dtype=np.float64), h) - x_target
        return float(np.sum(r * r))

    theta = params.flat()
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        up[i] += probe
        dn = theta.copy()
        dn[i] -= probe
        grad[i] = (loss_at(params.with_flat(up)) - loss_at(params.with_flat(dn))) / (
            2 * probe
        )
    g = params.with_flat(grad)
    return GradientRecord(loss_at(params), g.weights, g.biases)
