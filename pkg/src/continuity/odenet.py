"""ODE-Net training: fit N(x; theta) so one integrator step maps x_n to x_{n+1}."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffengine import GradientRecord, MlpParams, batch_loss_grad, mlp_eval
from .integrators import DivergenceError, SchemeKind
from .trajectory import Trajectory

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    scheme: SchemeKind = SchemeKind.RK4
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 5000
    batch_size: int | None = None  # None: full batch
    seed: int = 0
    model_kind: str = "shallow"  # "linear" or "shallow"
    hidden_dim: int = 50
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        self.scheme = SchemeKind.parse(self.scheme)
        self.model_kind = self.model_kind.lower()
        if self.model_kind not in ("linear", "shallow"):
            raise ValueError(f"unknown model kind {self.model_kind!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        if not self.learning_rate > 0 or self.weight_decay < 0:
            raise ValueError("need learning_rate > 0 and weight_decay >= 0")
        self.betas = tuple(self.betas)

    def layer_dims(self, dim: int) -> list[int]:
        if self.model_kind == "linear":
            return [dim, dim]
        return [dim, self.hidden_dim, dim]

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme.tag,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "model_kind": self.model_kind,
            "hidden_dim": self.hidden_dim,
            "betas": list(self.betas),
            "eps": self.eps,
        }


@dataclass
class Pairs:
    x: np.ndarray
    y: np.ndarray
    dt: np.ndarray

    def __len__(self):
        return len(self.dt)

    def __iter__(self):
        return iter(zip(self.x, self.y, self.dt))


@dataclass
class TrainedModel:
    params: MlpParams
    scheme_used: SchemeKind
    train_dt_stats: tuple[float, float, float]
    final_loss: float
    loss_history: list[float]
    model_kind: str = "shallow"
    seed: int = 0
    diverged: bool = False
    config: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.params.layer_dims[0]


def make_pairs(trajs) -> Pairs:
    if isinstance(trajs, Trajectory):
        trajs = [trajs]
    xs, ys, dts = [], [], []
    for tr in trajs:
        if len(tr) < 2:
            raise ValueError("each trajectory needs at least 2 samples")
        xs.append(tr.states[:-1])
        ys.append(tr.states[1:])
        dts.append(tr.gaps)
    return Pairs(np.concatenate(xs), np.concatenate(ys), np.concatenate(dts))


class AdamW:
    """Adam with decoupled weight decay over a list of arrays, updated in place."""

    def __init__(self, arrays, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0,
                 masks=None):
        self.arrays = arrays
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.masks = masks or [None] * len(arrays)
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for a, g, m, v, mask in zip(self.arrays, grads, self.m, self.v, self.masks):
            if mask is not None and not mask:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            a -= self.lr * ((m / c1) / (np.sqrt(v / c2) + self.eps) + self.wd * a)


def dataset_loss(params, scheme, pairs: Pairs) -> float:
    return batch_loss_grad(params, scheme, pairs.dt, pairs.x, pairs.y).loss


def train(pairs: Pairs, config: TrainConfig, init: MlpParams | None = None) -> TrainedModel:
    """Minimise the mean one-step squared error with AdamW.

    Returns the parameters with the lowest recorded loss. A non-finite loss
    stops training and returns the best finite snapshot flagged as diverged.
    """
    if len(pairs) == 0:
        raise ValueError("no training pairs")
    if not (np.all(np.isfinite(pairs.x)) and np.all(np.isfinite(pairs.y))):
        raise ValueError("training data must be finite")
    dim = pairs.x.shape[1]
    rng = np.random.Generator(np.random.Philox(config.seed))
    if init is None:
        params = MlpParams.init(config.layer_dims(dim), rng)
    else:
        params = init.copy()
    # the linear model is N(x) = W x: its bias stays at zero
    n_w = len(params.weights)
    masks = [True] * n_w + [config.model_kind != "linear"] * n_w
    opt = AdamW(params.arrays, config.learning_rate, config.betas, config.eps,
                config.weight_decay, masks)

    n = len(pairs)
    bs = n if config.batch_size is None else min(config.batch_size, n)
    history: list[float] = []
    best_loss, best = np.inf, params.copy()
    diverged = False

    def update_best(loss, snapshot):
        nonlocal best_loss, best
        if loss < best_loss:
            best_loss, best = loss, snapshot.copy()

    for epoch in range(config.epochs):
        order = np.arange(n) if bs == n else rng.permutation(n)
        total = 0.0
        try:
            for start in range(0, n, bs):
                idx = order[start : start + bs]
                rec: GradientRecord = batch_loss_grad(
                    params, config.scheme, pairs.dt[idx], pairs.x[idx], pairs.y[idx]
                )
                if bs == n:
                    update_best(rec.loss, params)
                total += rec.loss * len(idx)
                opt.step(rec.grad_weights + rec.grad_biases)
        except DivergenceError:
            log.warning("training diverged at epoch %d", epoch)
            diverged = True
            break
        epoch_loss = total / n
        if not np.isfinite(epoch_loss):
            diverged = True
            break
        history.append(float(epoch_loss))
        if bs != n:
            update_best(dataset_loss(params, config.scheme, pairs), params)

    if not diverged:
        try:
            update_best(dataset_loss(params, config.scheme, pairs), params)
        except DivergenceError:
            diverged = True
    if not history:
        history.append(float(best_loss))

    return TrainedModel(
        params=best,
        scheme_used=config.scheme,
        train_dt_stats=(float(pairs.dt.mean()), float(pairs.dt.min()), float(pairs.dt.max())),
        final_loss=float(best_loss),
        loss_history=history,
        model_kind=config.model_kind,
        seed=config.seed,
        diverged=diverged,
        config=config.to_dict(),
    )


class MlpField:
    """The network as a vector field; picklable for worker pools."""

    def __init__(self, params: MlpParams):
        self.params = params

    def __call__(self, x):
        return mlp_eval(self.params, x)


def as_field(model: TrainedModel) -> MlpField:
    return MlpField(model.params)


def save_checkpoint(model: TrainedModel, path) -> None:
    payload = {
        "model_kind": model.model_kind,
        "layer_dims": model.params.layer_dims,
        "weights": [w.ravel().tolist() for w in model.params.weights],
        "biases": [b.tolist() for b in model.params.biases],
        "scheme": model.scheme_used.tag,
        "train_dt_stats": list(model.train_dt_stats),
        "seed": model.seed,
        "final_loss": model.final_loss,
        "loss_history": model.loss_history,
        "diverged": model.diverged,
        "config": model.config,
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def load_checkpoint(path) -> TrainedModel:
    d = json.loads(Path(path).read_text())
    dims = d["layer_dims"]
    weights = [
        np.asarray(w, dtype=np.float64).reshape(dims[i + 1], dims[i])
        for i, w in enumerate(d["weights"])
    ]
    params = MlpParams(dims, weights, d["biases"])
    return TrainedModel(
        params=params,
        scheme_used=SchemeKind.parse(d["scheme"]),
        train_dt_stats=tuple(d["train_dt_stats"]),
        final_loss=d["final_loss"],
        loss_history=d.get("loss_history", []),
        model_kind=d["model_kind"],
        seed=d.get("seed", 0),
        diverged=d.get("diverged", False),
        config=d.get("config", {}),
    )
