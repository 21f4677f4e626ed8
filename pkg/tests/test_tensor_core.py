import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implicit_cp.tensor_core import (
    flat_index,
    fold,
    frobenius_norm,
    inner,
    kron_except,
    matricize,
    outer_product,
)


def brute_outer(vectors):
    shape = tuple(len(v) for v in vectors)
    out = np.zeros(shape)
    for idx in itertools.product(*[range(d) for d in shape]):
        out[idx] = np.prod([v[i] for v, i in zip(vectors, idx)])
    return out


def brute_matricize(t, mode):
    """Column index enumerates the remaining modes row-major."""
    shape = t.shape
    rest = [d for k, d in enumerate(shape) if k != mode]
    out = np.zeros((shape[mode], int(np.prod(rest))))
    for idx in itertools.product(*[range(d) for d in shape]):
        col = 0
        for k, i in enumerate(idx):
            if k == mode:
                continue
            stride = int(np.prod([shape[m] for m in range(k + 1, len(shape)) if m != mode]))
            col += i * stride
        out[idx[mode], col] = t[idx]
    return out


def test_outer_basis_vectors():
    t = outer_product([[1, 0], [1, 0], [1, 0]])
    expected = np.zeros((2, 2, 2))
    expected[0, 0, 0] = 1
    np.testing.assert_array_equal(t, expected)


def test_outer_small():
    np.testing.assert_array_equal(outer_product([[1, 2], [3, 4]]), [[3, 4], [6, 8]])


def test_outer_matches_brute_force_and_norm(rng):
    vecs = [rng.standard_normal(d) for d in (3, 4, 2)]
    t = outer_product(vecs)
    np.testing.assert_allclose(t, brute_outer(vecs), rtol=1e-14)
    expected = np.prod([np.linalg.norm(v) for v in vecs])
    assert frobenius_norm(t) == pytest.approx(expected, rel=1e-12)


def test_outer_rejects_empty():
    with pytest.raises(ValueError):
        outer_product([])
    with pytest.raises(ValueError):
        outer_product([[1.0], []])


def test_matricize_order2():
    m = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(matricize(m, 0), m)
    np.testing.assert_array_equal(matricize(m, 1), m.T)


def test_matricize_2x2x2_against_index_map():
    t = np.arange(8.0).reshape(2, 2, 2)
    # enumerated by hand from the convention: columns (i1, i2) row-major
    np.testing.assert_array_equal(matricize(t, 0), [[0, 1, 2, 3], [4, 5, 6, 7]])
    for mode in range(3):
        np.testing.assert_array_equal(matricize(t, mode), brute_matricize(t, mode))


@pytest.mark.parametrize("shape", [(2, 3, 4), (3, 1, 2, 2), (5,)])
def test_matricize_round_trip(rng, shape):
    t = rng.standard_normal(shape)
    for mode in range(len(shape)):
        np.testing.assert_array_equal(fold(matricize(t, mode), mode, shape), t)
        np.testing.assert_array_equal(matricize(t, mode), brute_matricize(t, mode))


def test_matricize_mode_out_of_range():
    with pytest.raises(ValueError):
        matricize(np.zeros((2, 2)), 2)
    with pytest.raises(ValueError):
        matricize(np.zeros((2, 2)), -1)


def test_kron_except_trivial():
    np.testing.assert_array_equal(kron_except([[7.0], [2.0, 3.0]], 0), [2.0, 3.0])
    np.testing.assert_array_equal(kron_except([np.ones(2), np.ones(3)], 1), [1.0, 1.0])


def test_kron_except_skip_out_of_range():
    with pytest.raises(ValueError):
        kron_except([[1.0], [2.0]], 2)


@pytest.mark.parametrize("shape", [(3, 4, 2), (2, 3, 2, 3)])
def test_matricize_kron_consistency(rng, shape):
    vecs = [rng.standard_normal(d) for d in shape]
    t = brute_outer(vecs)
    for n in range(len(shape)):
        lhs = matricize(t, n) @ kron_except(vecs, n)
        scale = np.prod([v @ v for m, v in enumerate(vecs) if m != n])
        np.testing.assert_allclose(lhs, scale * vecs[n], rtol=1e-10)


@pytest.mark.parametrize("shape", [(3, 4, 2), (2, 3, 2, 3)])
def test_matricized_inner_product_identity(rng, shape):
    W = rng.standard_normal(shape)
    vecs = [rng.standard_normal(d) for d in shape]
    ref = inner(W, brute_outer(vecs))
    for n in range(len(shape)):
        got = (matricize(W, n) @ kron_except(vecs, n)) @ vecs[n]
        assert got == pytest.approx(ref, rel=1e-10)


def test_inner_and_norm():
    ones = np.ones((2, 2, 2))
    assert frobenius_norm(ones) == pytest.approx(np.sqrt(8))
    W = np.arange(6.0).reshape(2, 3)
    assert inner(W, W) == pytest.approx(frobenius_norm(W) ** 2)
    with pytest.raises(ValueError):
        inner(np.zeros(2), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=8, max_size=8),
       st.lists(st.floats(-10, 10), min_size=8, max_size=8))
def test_cauchy_schwarz(a, b):
    a = np.reshape(a, (2, 2, 2))
    b = np.reshape(b, (2, 2, 2))
    assert abs(inner(a, b)) <= frobenius_norm(a) * frobenius_norm(b) * (1 + 1e-12) + 1e-300


def test_flat_index_agrees_with_layout():
    shape = (2, 3, 4)
    t = np.arange(24.0).reshape(shape)
    for idx in itertools.product(*[range(d) for d in shape]):
        assert t.ravel()[flat_index(idx, shape)] == t[idx]
