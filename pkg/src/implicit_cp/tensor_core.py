"""Dense tensor primitives.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C order, so
the flat layout is row-major with the last index varying fastest. Modes are
0-indexed throughout the package.
"""
from functools import reduce

import numpy as np


def _as_vectors(vectors):
    vectors = [np.asarray(v, dtype=np.float64).ravel() for v in vectors]
    if not vectors:
        raise ValueError("need at least one vector")
    if any(v.size == 0 for v in vectors):
        raise ValueError("vectors must be nonempty")
    return vectors


def outer_product(vectors):
    """Outer product ``v_0 ⊗ v_1 ⊗ ... ⊗ v_{N-1}`` as an order-N array.

    Entry ``(i_0, ..., i_{N-1})`` equals ``prod_n vectors[n][i_n]``.
    """
    vectors = _as_vectors(vectors)
    out = vectors[0]
    for v in vectors[1:]:
        out = np.multiply.outer(out, v)
    return out


def matricize(tensor, mode):
    """Mode-`mode` unfolding of `tensor`.

    Rows index `mode`; columns enumerate the remaining modes in row-major
    order (last remaining index fastest). This ordering is the one under
    which :func:`kron_except` is the matching column vector.

    Returns
    -------
    ndarray of shape ``(tensor.shape[mode], prod of other dims)``
    """
    tensor = np.asarray(tensor)
    if not 0 <= mode < tensor.ndim:
        raise ValueError(f"mode {mode} out of range for order-{tensor.ndim} tensor")
    return np.moveaxis(tensor, mode, 0).reshape(tensor.shape[mode], -1)


def fold(matrix, mode, shape):
    """Inverse of :func:`matricize`."""
    shape = tuple(shape)
    if not 0 <= mode < len(shape):
        raise ValueError(f"mode {mode} out of range for order-{len(shape)} tensor")
    rest = shape[:mode] + shape[mode + 1:]
    moved = np.asarray(matrix).reshape((shape[mode],) + rest)
    return np.moveaxis(moved, 0, mode)


def kron_except(vectors, skip):
    """Kronecker product of all `vectors` except ``vectors[skip]``.

    Ordered so that ``matricize(outer_product(v), n) @ kron_except(v, n)``
    equals ``prod_{m != n} ||v_m||^2 * v_n``.
    """
    vectors = _as_vectors(vectors)
    if len(vectors) < 2:
        raise ValueError("kron_except needs at least two vectors")
    if not 0 <= skip < len(vectors):
        raise ValueError(f"skip index {skip} out of range")
    rest = vectors[:skip] + vectors[skip + 1:]
    return reduce(np.kron, rest)


def inner(a, b):
    """Frobenius inner product of two equally shaped tensors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a.ravel(), b.ravel()))


def frobenius_norm(a):
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.dot(a.ravel(), a.ravel())))


def flat_index(index, shape):
    """Row-major flat position of a multi-index (thin wrapper for clarity)."""
    return int(np.ravel_multi_index(tuple(index), tuple(shape)))
