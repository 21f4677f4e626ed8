import numpy as np
import pytest

from implicit_cp.losses import MeasurementSet
from implicit_cp.problems import (
    GroundTruthSpec,
    complete_basis,
    estimate_rip_delta,
    generate_ground_truth,
    measurement_std,
    sample_measurements,
    sample_observations,
)
from implicit_cp.seeding import rng
from implicit_cp.tensor_core import matricize


def test_ground_truth_unit_norm_and_seed():
    spec = GroundTruthSpec((4, 5, 3), 3, seed=7)
    W = generate_ground_truth(spec)
    assert np.linalg.norm(W) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_array_equal(W, generate_ground_truth(spec))
    assert not np.array_equal(W, generate_ground_truth(GroundTruthSpec((4, 5, 3), 3, seed=8)))


def test_rank_one_ground_truth_matricizations():
    W = generate_ground_truth(GroundTruthSpec((4, 5, 3, 2), 1, seed=0))
    for n in range(4):
        s = np.linalg.svd(matricize(W, n), compute_uv=False)
        assert s[1] <= 1e-12 * s[0]


def test_ground_truth_rank_bound():
    W = generate_ground_truth(GroundTruthSpec((6, 6, 6), 2, seed=0, normalize=False))
    s = np.linalg.svd(matricize(W, 0), compute_uv=False)
    assert s[2] <= 1e-10 * s[0]
    with pytest.raises(ValueError):
        GroundTruthSpec((2, 2), 0)


def test_sample_observations_distinct_and_valued():
    W = np.arange(1000.0).reshape(10, 10, 10)
    obs = sample_observations(W, 300, seed=3)
    flat = np.ravel_multi_index(obs.indices.T, W.shape)
    assert len(np.unique(flat)) == 300
    np.testing.assert_array_equal(obs.values, W.ravel()[flat])
    again = sample_observations(W, 300, seed=3)
    np.testing.assert_array_equal(again.indices, obs.indices)
    with pytest.raises(ValueError):
        sample_observations(W, 1001, seed=0)


def test_sample_observations_uniform():
    W = np.zeros((5, 4))
    counts = np.zeros(20)
    for s in range(400):
        obs = sample_observations(W, 5, seed=s)
        counts[np.ravel_multi_index(obs.indices.T, W.shape)] += 1
    # each entry is chosen with probability 1/4; 400 draws give sd ~8.7
    assert np.all(np.abs(counts - 100) < 5 * 8.7)


def test_measurement_scale():
    shape = (10, 10, 10)
    assert measurement_std(shape) == pytest.approx(10 ** -1.5)
    meas = sample_measurements(shape, 500, seed=0)
    sq = np.sum(meas.tensors ** 2, axis=(1, 2, 3))
    assert sq.mean() == pytest.approx(1.0, rel=0.01)


def test_measurement_values_are_inner_products(rng):
    W = rng.standard_normal((3, 4, 2))
    meas = sample_measurements(W.shape, 9, seed=1, W=W)
    for A, y in zip(meas.tensors, meas.values):
        assert y == pytest.approx(np.sum(A * W), rel=1e-12)


def test_complete_basis_rip_is_exact():
    est = estimate_rip_delta(complete_basis((3, 3, 2)), trials=50, seed=0)
    assert est.delta_lower == pytest.approx(0.0, abs=1e-12)
    assert est.kind == "sampled lower bound"


def test_rip_estimate_well_below_one():
    meas = sample_measurements((10, 10, 10, 10), 2000, seed=0)
    est = estimate_rip_delta(meas, trials=200, seed=0)
    # energy concentrates at m / prod(shape) = 0.2, so the raw constant is ~0.8
    assert est.delta_lower == pytest.approx(1.0 - est.energy_min)
    assert 0.15 < est.energy_min <= est.energy_max < 0.25
    assert 0.0 < est.delta_rescaled < 0.5
    with pytest.raises(ValueError):
        estimate_rip_delta(meas, rank=2)


def test_measurement_set_validation():
    with pytest.raises(ValueError):
        MeasurementSet(np.zeros((2, 3, 3)), [1.0])


def test_seeded_streams_independent():
    a = rng(5, "init").standard_normal(4)
    b = rng(5, "observations").standard_normal(4)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, rng(5, "init").standard_normal(4))
    with pytest.raises(ValueError):
        rng(None, "init")
