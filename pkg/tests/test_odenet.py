import math

import numpy as np
import pytest

from continuity.diffengine import MlpParams, batch_loss_grad, mlp_eval
from continuity.integrators import SchemeKind, step
from continuity.odenet import (
    Pairs,
    TrainConfig,
    as_field,
    dataset_loss,
    load_checkpoint,
    make_pairs,
    save_checkpoint,
    train,
)
from continuity.systems import SamplingSpec, SystemSpec, irregular_trajectory, reference_trajectory
from continuity.trajectory import Trajectory


def scalar_pairs(lam, dt, n=40):
    x = np.exp(lam * dt * np.arange(n + 1))[:, None]
    return make_pairs(Trajectory(dt * np.arange(n + 1), x))


@pytest.fixture(scope="module")
def euler_harmonic():
    tr = reference_trajectory(SystemSpec("HarmonicOscillator"), [1.0, 0.0], 0.1, 200)
    cfg = TrainConfig(scheme="Euler", model_kind="linear")
    return train(make_pairs(tr), cfg)


def test_make_pairs_counts():
    assert len(make_pairs(Trajectory([0.0, 0.1], [[1.0], [2.0]]))) == 1
    p = make_pairs(Trajectory(0.1 * np.arange(11), np.zeros((11, 2))))
    assert len(p) == 10
    np.testing.assert_allclose(p.dt, 0.1, rtol=1e-12)
    with pytest.raises(ValueError):
        make_pairs(Trajectory([0.0], [[1.0]]))


def test_pairs_use_recorded_gaps():
    tr = irregular_trajectory(SystemSpec("NonlinearPendulum"), [1.0, 0.0],
                              SamplingSpec(0.05, 30, 0.2, 0.1, seed=2))
    p = make_pairs(tr)
    np.testing.assert_array_equal(p.dt, tr.gaps)
    np.testing.assert_array_equal(p.x, tr.states[:-1])


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(model_kind="deep")
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    assert TrainConfig(model_kind="linear").layer_dims(2) == [2, 2]
    assert TrainConfig(hidden_dim=7).layer_dims(4) == [4, 7, 4]


def test_euler_harmonic_optimum(euler_harmonic):
    # (expm(0.1 A) - I) / 0.1 from scipy.linalg.expm
    expected = np.array([[-0.04995835, 0.99833417], [-0.99833417, -0.04995835]])
    np.testing.assert_allclose(euler_harmonic.params.weights[0], expected, atol=1e-3)
    assert np.all(euler_harmonic.params.biases[0] == 0)
    assert euler_harmonic.scheme_used is SchemeKind.EULER
    assert euler_harmonic.train_dt_stats == pytest.approx((0.1, 0.1, 0.1))


def test_scalar_euler_rate():
    m = train(scalar_pairs(-1.0, 0.1), TrainConfig(scheme="Euler", model_kind="linear"))
    assert m.params.weights[0][0, 0] == pytest.approx(-0.951626, abs=1e-3)


@pytest.mark.parametrize("scheme", list(SchemeKind))
def test_scalar_residual_floor(scheme):
    lam, dt = -1.0, 0.1
    m = train(scalar_pairs(lam, dt), TrainConfig(scheme=scheme, model_kind="linear"))
    z = m.params.weights[0][0, 0] * dt
    tp = sum(z**i / math.factorial(i) for i in range(scheme.order + 1))
    assert abs(math.exp(lam * dt) - tp) < 1e-4


def test_already_optimal_pairs_are_left_alone(rng):
    init = MlpParams.init([2, 5, 2], rng)
    x = rng.normal(size=(20, 2))
    y = step(SchemeKind.RK4, lambda z: mlp_eval(init, z), x, 0.1)
    pairs = Pairs(x, y, np.full(20, 0.1))
    m = train(pairs, TrainConfig(epochs=50), init=init)
    assert m.final_loss == 0.0
    for a, b in zip(m.params.arrays, init.arrays):
        np.testing.assert_array_equal(a, b)


def test_determinism_and_no_worse_than_init():
    tr = reference_trajectory(SystemSpec("NonlinearPendulum"), [1.0, 0.0], 0.1, 30)
    cfg = TrainConfig(scheme="Midpoint", epochs=200, hidden_dim=8, seed=5, batch_size=7)
    a = train(make_pairs(tr), cfg)
    b = train(make_pairs(tr), cfg)
    for x, y in zip(a.params.arrays, b.params.arrays):
        assert np.array_equal(x, y)
    assert a.loss_history == b.loss_history
    init = MlpParams.init(cfg.layer_dims(2), np.random.Generator(np.random.Philox(5)))
    assert a.final_loss <= dataset_loss(init, SchemeKind.MIDPOINT, make_pairs(tr))
    assert a.final_loss == pytest.approx(dataset_loss(a.params, SchemeKind.MIDPOINT,
                                                      make_pairs(tr)), rel=1e-12)


def test_plain_adam_regression(rng):
    # weight_decay=0 with full batch must follow textbook Adam exactly
    tr = reference_trajectory(SystemSpec("NonlinearPendulum"), [0.8, 0.1], 0.1, 25)
    pairs = make_pairs(tr)
    cfg = TrainConfig(scheme="RK4", epochs=30, hidden_dim=6, weight_decay=0.0,
                      learning_rate=1e-2, seed=9)
    m = train(pairs, cfg)

    p = MlpParams.init([2, 6, 2], np.random.Generator(np.random.Philox(9)))
    theta = p.flat()
    mom, vel = np.zeros_like(theta), np.zeros_like(theta)
    losses = []
    for t in range(1, 31):
        rec = batch_loss_grad(p.with_flat(theta), SchemeKind.RK4, pairs.dt, pairs.x, pairs.y)
        losses.append(rec.loss)
        g = rec.flat()
        mom = 0.9 * mom + 0.1 * g
        vel = 0.999 * vel + 0.001 * g * g
        theta = theta - 1e-2 * (mom / (1 - 0.9**t)) / (np.sqrt(vel / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(m.loss_history, losses, rtol=1e-10)


def test_divergence_returns_finite_snapshot():
    # Adam moves each weight by about lr per step; (W h)^4 then overflows in RK4
    tr = reference_trajectory(SystemSpec("HarmonicOscillator"), [1.0, 0.0], 0.5, 20)
    cfg = TrainConfig(scheme="RK4", learning_rate=1e100, epochs=10, model_kind="linear")
    m = train(make_pairs(tr), cfg)
    assert m.diverged
    assert all(np.all(np.isfinite(a)) for a in m.params.arrays)
    assert math.isfinite(m.final_loss)


def test_training_rejects_bad_data():
    with pytest.raises(ValueError):
        train(Pairs(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0)), TrainConfig())
    with pytest.raises(ValueError):
        train(Pairs(np.full((1, 2), np.nan), np.zeros((1, 2)), np.ones(1)), TrainConfig())


def test_epochs_one_history_length():
    m = train(scalar_pairs(-1.0, 0.1, 5), TrainConfig(epochs=1, model_kind="linear"))
    assert len(m.loss_history) == 1


def test_as_field(euler_harmonic, rng):
    f = as_field(euler_harmonic)
    x = rng.normal(size=(3, 2))
    np.testing.assert_array_equal(f(x), mlp_eval(euler_harmonic.params, x))
    np.testing.assert_allclose(f(x), x @ euler_harmonic.params.weights[0].T, rtol=1e-15)
    np.testing.assert_array_equal(f(np.zeros(2)), [0.0, 0.0])


def test_checkpoint_round_trip(euler_harmonic, tmp_path):
    save_checkpoint(euler_harmonic, tmp_path / "c.json")
    back = load_checkpoint(tmp_path / "c.json")
    for a, b in zip(back.params.arrays, euler_harmonic.params.arrays):
        np.testing.assert_array_equal(a, b)
    assert back.scheme_used is SchemeKind.EULER
    assert back.model_kind == "linear"
    assert back.final_loss == euler_harmonic.final_loss
    assert back.loss_history == euler_harmonic.loss_history
