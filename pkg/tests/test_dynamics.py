import numpy as np
import pytest

from implicit_cp.cp_model import (
    CPFactorization,
    InitSpec,
    end_tensor,
    initialize,
    unbalancedness_magnitude,
)
from implicit_cp.dynamics import (
    check_balancedness_conservation,
    check_norm_bounds,
    check_norm_ode,
    gammas,
    growth_windows,
    incremental_order_holds,
    norm_rate_balanced,
    theorem_bounds,
    with_unbalancedness,
)
from implicit_cp.losses import densify, huber, loss_gradient_tensor, squared
from implicit_cp.optimizer import TrainConfig, TrajectoryRecord, train
from implicit_cp.problems import (
    GroundTruthSpec,
    generate_ground_truth,
    sample_measurements,
    sample_observations,
)
from implicit_cp.tensor_core import inner, outer_product


def dense_gammas(f, problem, loss):
    G = densify(loss_gradient_tensor(f, problem, loss), f.shape)
    out = []
    for r in range(f.rank):
        vecs = f.weights(r)
        if any(not v.any() for v in vecs):
            out.append(0.0)
            continue
        out.append(-inner(G, outer_product([v / np.linalg.norm(v) for v in vecs])))
    return np.array(out)


@pytest.mark.parametrize("kind", ["completion", "sensing"])
def test_gammas_match_dense_oracle(rng, kind):
    W = rng.standard_normal((3, 4, 3))
    problem = (sample_observations(W, 20, seed=0) if kind == "completion"
               else sample_measurements(W.shape, 10, seed=0, W=W))
    f = CPFactorization([rng.standard_normal((d, 4)) for d in W.shape])
    for u in f.factors:
        u[:, 2] = 0.0
    for loss in (squared(), huber(0.3)):
        got = gammas(f, problem, loss)
        np.testing.assert_allclose(got, dense_gammas(f, problem, loss), rtol=1e-11, atol=1e-15)
        assert got[2] == 0.0


def test_theorem_bounds_collapse_at_zero_eps(rng):
    sigma = rng.uniform(0.01, 2.0, 10)
    gamma = rng.standard_normal(10)
    for order in (3, 4):
        lo, hi = theorem_bounds(sigma, gamma, order, 0.0)
        rhs = norm_rate_balanced(sigma, gamma, order)
        np.testing.assert_allclose(lo, rhs, rtol=1e-12)
        np.testing.assert_allclose(hi, rhs, rtol=1e-12)


def test_theorem_bounds_ordered(rng):
    sigma = rng.uniform(0.0, 2.0, 50)
    gamma = rng.standard_normal(50)
    lo, hi = theorem_bounds(sigma, gamma, 3, 0.5)
    assert np.all(lo <= hi)


def _desk_run(lr, steps, eps=None, std=0.01, record_every=1, gammas_on=True, seed=0):
    shape = (8, 8, 8)
    W = generate_ground_truth(GroundTruthSpec(shape, 2, seed=seed))
    obs = sample_observations(W, 150, seed=seed)
    f = initialize(InitSpec("balanced_gaussian", std=std, seed=seed), shape, 10)
    if eps is not None:
        f = with_unbalancedness(f, eps)
    cfg = TrainConfig("fixed", lr=lr, max_iters=steps, record_every=record_every, stop_loss=0.0,
                      record_gammas=gammas_on, record_mode_norms=True)
    return train(f, obs, squared(), cfg)


def test_conservation_small_run():
    _, recs = _desk_run(1e-2, 300, record_every=50, gammas_on=False)
    rep = check_balancedness_conservation(recs, tolerance=1e-6)
    assert rep.passed and rep.steps_checked == len(recs)


def test_conservation_requires_mode_norms():
    rec = TrajectoryRecord(0, 0.0, 0.0, 0.0, 0.0, np.zeros(2))
    with pytest.raises(ValueError):
        check_balancedness_conservation([rec])


def test_norm_ode_on_balanced_run():
    _, recs = _desk_run(1e-4, 30)
    rep = check_norm_ode(recs, order=3)
    assert rep.passed, rep.max_violation
    assert rep.steps_checked == 30


def test_norm_ode_flags_bad_data():
    _, recs = _desk_run(1e-4, 5)
    for r in recs[1:]:
        r.norms = r.norms * 1.01
    assert not check_norm_ode(recs, order=3).passed


def test_norm_ode_needs_adjacent_records():
    _, recs = _desk_run(1e-4, 10, record_every=5)
    with pytest.raises(ValueError):
        check_norm_ode(recs, order=3)


def test_unbalanced_run_respects_bounds():
    f, recs = _desk_run(1e-4, 30, eps=0.5)
    rep = check_norm_bounds(recs, order=3, eps=0.5)
    assert rep.passed, rep.max_violation
    assert rep.details["negative_gamma_samples"] + rep.details["positive_gamma_samples"] > 0


def test_frozen_run_passes():
    # exact fit: zero gradient, nothing moves
    f = CPFactorization.from_weights([[[1.0, 2.0], [0.5, 1.0], [1.0, -1.0]]])
    obs = sample_observations(end_tensor(f), 8, seed=0)
    cfg = TrainConfig("fixed", lr=1e-3, max_iters=5, record_every=1, stop_loss=0.0,
                      record_gammas=True, record_mode_norms=True)
    _, recs = train(f, obs, squared(), cfg)
    assert check_norm_ode(recs, 3).passed
    assert check_norm_bounds(recs, 3, 0.0).passed
    assert check_balancedness_conservation(recs).passed


def test_zero_component_stays_zero():
    f = initialize(InitSpec("balanced_gaussian", std=0.3, seed=1), (4, 4, 4), 3)
    for u in f.factors:
        u[:, 1] = 0.0
    W = generate_ground_truth(GroundTruthSpec((4, 4, 4), 1, seed=0))
    obs = sample_observations(W, 30, seed=0)
    cfg = TrainConfig("fixed", lr=1e-3, max_iters=10, record_every=1, stop_loss=0.0,
                      record_gammas=True)
    _, recs = train(f, obs, squared(), cfg)
    assert all(r.norms[1] == 0.0 for r in recs)
    rep = check_norm_ode(recs, 3)
    assert rep.details["zero_component_rate"] == 0.0


def _records_from_norms(times, norms):
    return [TrajectoryRecord(i, t, 0.0, 0.0, 0.0, np.asarray(n, float))
            for i, (t, n) in enumerate(zip(times, norms))]


def test_growth_windows_and_order():
    times = np.arange(6.0)
    norms = [[0, 0], [0.5, 0], [1, 0], [1, 0.05], [1, 0.95], [1, 1]]
    windows = growth_windows(_records_from_norms(times, norms), 2)
    assert windows == [(1.0, 2.0), (4.0, 4.0)]
    assert incremental_order_holds(windows)
    assert not incremental_order_holds([(0.0, 5.0), (1.0, 2.0)])


def test_with_unbalancedness_exact():
    f = initialize(InitSpec("balanced_gaussian", std=0.2, seed=0), (3, 4, 5), 4)
    assert unbalancedness_magnitude(with_unbalancedness(f, 0.5)) == pytest.approx(0.5, rel=1e-12)
