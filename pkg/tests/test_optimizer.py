import csv
import math

import numpy as np
import pytest

from implicit_cp.cp_model import CPFactorization, InitSpec, initialize
from implicit_cp.losses import ObservationSet, objective_gradient, squared
from implicit_cp.optimizer import (
    Adam,
    AdamConfig,
    AdaptiveLR,
    DivergenceError,
    GradientDescent,
    TrainConfig,
    adam_train,
    adaptive_lr_step_size,
    train,
    write_trajectory_csv,
)
from implicit_cp.problems import GroundTruthSpec, generate_ground_truth, sample_observations


def test_adaptive_lr_first_step():
    # gamma_1 = 0.01 * 4 and bias correction divides by 0.01, so sqrt(4) = 2
    step, ema = adaptive_lr_step_size(0.0, 4.0, 1)
    assert ema == pytest.approx(0.04)
    assert step == pytest.approx(1e-2 / (2.0 + 1e-6), rel=1e-12)


def test_adaptive_lr_constant_gradient_is_stationary():
    sched = AdaptiveLR()
    steps = [sched.step_size(9.0, t) for t in range(1, 50)]
    np.testing.assert_allclose(steps, 1e-2 / (3.0 + 1e-6), rtol=1e-12)


def test_adaptive_lr_zero_gradient_caps_at_eps():
    assert AdaptiveLR().step_size(0.0, 1) == pytest.approx(1e-2 / 1e-6)


def test_adaptive_lr_ema_recursion():
    sched = AdaptiveLR()
    g = [1.0, 4.0, 0.25]
    ema = 0.0
    for t, x in enumerate(g, start=1):
        ema = 0.99 * ema + 0.01 * x
        expected = 1e-2 / (math.sqrt(ema / (1 - 0.99 ** t)) + 1e-6)
        assert sched.step_size(x, t) == pytest.approx(expected, rel=1e-13)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_scheme="cosine")
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(beta=1.0)


@pytest.fixture
def small_problem():
    W = generate_ground_truth(GroundTruthSpec((4, 4, 4), 2, seed=0))
    obs = sample_observations(W, 40, seed=0)
    f = initialize(InitSpec("gaussian", std=0.3, seed=0), (4, 4, 4), 5)
    return W, obs, f


def test_one_fixed_step_by_hand(small_problem):
    _, obs, f = small_problem
    gd = GradientDescent(f, obs, squared(), TrainConfig("fixed", lr=0.05))
    grads = objective_gradient(f, obs, squared())
    gd.advance()
    for u, v, g in zip(gd.f.factors, f.factors, grads):
        np.testing.assert_allclose(u, v - 0.05 * g, rtol=1e-14, atol=1e-16)
    assert gd.time == 0.05 and gd.iter == 1


def test_descent_with_small_step(small_problem):
    W, obs, f = small_problem
    _, records = train(f, obs, squared(), TrainConfig("fixed", lr=0.05, max_iters=200, record_every=1))
    losses = [r.loss for r in records]
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_train_is_deterministic_and_records(small_problem, tmp_path):
    W, obs, f = small_problem
    cfg = TrainConfig("adaptive", max_iters=250, record_every=100, record_gammas=True)
    f1, r1 = train(f, obs, squared(), cfg, ground_truth=W)
    f2, r2 = train(f, obs, squared(), cfg, ground_truth=W)
    for a, b in zip(f1.factors, f2.factors):
        np.testing.assert_array_equal(a, b)
    assert [r.iter for r in r1] == [0, 100, 200, 250]
    times = [r.time for r in r1]
    assert times[0] == 0.0 and all(b > a for a, b in zip(times, times[1:]))
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_trajectory_csv(r1, p1, top_k=3)
    write_trajectory_csv(r2, p2, top_k=3)
    assert p1.read_bytes() == p2.read_bytes()
    header = next(csv.reader(p1.open()))
    assert header[:7] == ["iter", "time", "lr", "loss", "unbalancedness", "recon_error",
                          "companion_distance"]
    assert header[7:] == ["norm_1", "norm_2", "norm_3", "gamma_1", "gamma_2", "gamma_3"]
    fresh = initialize(InitSpec("gaussian", std=0.3, seed=0), (4, 4, 4), 5)
    assert all(np.array_equal(x, y) for x, y in zip(f.factors, fresh.factors))


def test_stop_loss_stops_immediately():
    f = CPFactorization.from_weights([[[1.0], [2.0], [3.0]]])
    obs = ObservationSet((1, 1, 1), [[0, 0, 0]], [6.0])
    _, records = train(f, obs, squared(), TrainConfig(max_iters=10))
    assert len(records) == 1 and records[0].loss == 0.0


def test_divergence_raises(small_problem):
    _, obs, f = small_problem
    big = CPFactorization([10.0 * u for u in f.factors])
    with pytest.raises(DivergenceError) as exc, np.errstate(over="ignore", invalid="ignore"):
        train(big, obs, squared(), TrainConfig("fixed", lr=1e3, max_iters=200, record_every=1))
    assert exc.value.records


def test_adam_first_step_moves_by_lr():
    p = [np.array([1.0, -2.0, 3.0])]
    Adam(lr=5e-4).step(p, [np.array([0.3, -7.0, 1e-3])])
    np.testing.assert_allclose(p[0], [1.0 - 5e-4, -2.0 + 5e-4, 3.0 - 5e-4], rtol=1e-6)


def test_adam_converges_on_least_squares():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((200, 5))
    x_true = rng.standard_normal(5)
    b = A @ x_true

    def objective_fn(ps, batch):
        r = A[batch] @ ps[0] - b[batch]
        return float(np.mean(r ** 2)), [2 * A[batch].T @ r / len(batch)]

    params = [np.zeros(5)]
    cfg = AdamConfig(lr=1e-2, batch_size=50, max_iters=5000, stop_loss=1e-12)
    adam_train(params, objective_fn, 200, cfg, np.random.default_rng(1))
    np.testing.assert_allclose(params[0], x_true, atol=1e-4)


def test_adam_train_deterministic():
    def obj(ps, batch):
        return float(np.sum(ps[0] ** 2)) + len(batch) * 0.0, [2 * ps[0] + 1e-3 * batch.mean()]

    runs = []
    for _ in range(2):
        p = [np.ones(3)]
        adam_train(p, obj, 17, AdamConfig(batch_size=5, max_iters=30), np.random.default_rng(4))
        runs.append(p[0])
    np.testing.assert_array_equal(*runs)
