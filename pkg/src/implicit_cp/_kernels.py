"""Fused loops for the sparse completion objective.

Factors are stacked into one ``(sum_n d_n, R)`` array; an observation is a
row of absolute row indices (``offset_n + i_n``). Reductions run sequentially
in observation order, so results are bitwise reproducible.
"""
import numpy as np
from numba import njit

SQUARED = 0
HUBER = 1


@njit(cache=True)
def _loss_and_slope(z, kind, coeff, delta):
    if kind == SQUARED:
        return coeff * z * z, 2.0 * coeff * z
    a = abs(z)
    if a < delta:
        return 0.5 * z * z, z
    if z > 0:
        return delta * (a - 0.5 * delta), delta
    return delta * (a - 0.5 * delta), -delta


@njit(cache=True)
def completion_value_grad(stacked, rows, values, kind, coeff, delta, grad, pred_out):
    """Mean loss over observations; accumulates the weight gradient into `grad`.

    `grad` must be zeroed by the caller. Per-observation predictions are
    written to `pred_out`. Leave-one-out products use prefix/suffix sweeps,
    so zero weights are handled without division.
    """
    n_obs, n_modes = rows.shape
    rank = stacked.shape[1]
    prefix = np.empty((n_modes + 1, rank))
    suffix = np.empty(rank)
    total = 0.0
    inv = 1.0 / n_obs
    for m in range(n_obs):
        for r in range(rank):
            prefix[0, r] = 1.0
        for n in range(n_modes):
            row = rows[m, n]
            for r in range(rank):
                prefix[n + 1, r] = prefix[n, r] * stacked[row, r]
        pred = 0.0
        for r in range(rank):
            pred += prefix[n_modes, r]
        pred_out[m] = pred
        val, slope = _loss_and_slope(pred - values[m], kind, coeff, delta)
        total += val
        c = slope * inv
        if c == 0.0:
            continue
        for r in range(rank):
            suffix[r] = c
        for n in range(n_modes - 1, -1, -1):
            row = rows[m, n]
            for r in range(rank):
                grad[row, r] += prefix[n, r] * suffix[r]
                suffix[r] *= stacked[row, r]
    return total * inv


@njit(cache=True)
def completion_predict(stacked, rows, out):
    n_obs, n_modes = rows.shape
    rank = stacked.shape[1]
    for m in range(n_obs):
        pred = 0.0
        for r in range(rank):
            p = 1.0
            for n in range(n_modes):
                p *= stacked[rows[m, n], r]
            pred += p
        out[m] = pred
    return out


def stack(factors):
    return np.ascontiguousarray(np.concatenate(factors, axis=0))


def offsets(shape):
    return np.concatenate([[0], np.cumsum(shape)[:-1]]).astype(np.int64)


def unstack(stacked, shape):
    out = []
    start = 0
    for d in shape:
        out.append(stacked[start:start + d].copy())
        start += d
    return out


def loss_code(loss):
    return (SQUARED if loss.kind == "squared" else HUBER), float(loss.coeff), float(loss.delta)


BLOCK = 16


@njit(cache=True)
def binary_cp_value_grad(params, X, batch, targets, grad):
    """Mean squared error of a CP predictor on binary inputs, with gradient.

    ``params`` has shape ``(N, 2, R)``: mode ``n`` picks row ``X[i, n]``.
    The gradient of the mean of ``(pred - target)**2`` is accumulated into
    `grad`, which must be zeroed by the caller. Samples are processed in
    blocks so the product chains of different samples interleave, and
    gradient contributions are summed in registers before touching `grad`.
    """
    n_modes, _, rank = params.shape
    prefix = np.empty((rank, n_modes + 1, BLOCK))
    suffix = np.empty((rank, BLOCK))
    xb = np.zeros((n_modes, BLOCK), np.uint8)
    total = 0.0
    n_batch = batch.shape[0]
    inv = 1.0 / n_batch
    for start in range(0, n_batch, BLOCK):
        m = min(BLOCK, n_batch - start)
        for j in range(m):
            row = batch[start + j]
            for n in range(n_modes):
                xb[n, j] = X[row, n]
        for r in range(rank):
            for j in range(BLOCK):
                prefix[r, 0, j] = 1.0
        for r in range(rank):
            for n in range(n_modes):
                p0 = params[n, 0, r]
                p1 = params[n, 1, r]
                for j in range(BLOCK):
                    f = p1 if xb[n, j] else p0
                    prefix[r, n + 1, j] = prefix[r, n, j] * f
        for j in range(BLOCK):
            if j < m:
                pred = 0.0
                for r in range(rank):
                    pred += prefix[r, n_modes, j]
                z = pred - targets[batch[start + j]]
                total += z * z
                c = 2.0 * z * inv
            else:
                c = 0.0
            for r in range(rank):
                suffix[r, j] = c
        for r in range(rank):
            for n in range(n_modes - 1, -1, -1):
                p0 = params[n, 0, r]
                p1 = params[n, 1, r]
                a0 = 0.0
                a1 = 0.0
                for j in range(BLOCK):
                    v = prefix[r, n, j] * suffix[r, j]
                    if xb[n, j]:
                        a1 += v
                        suffix[r, j] *= p1
                    else:
                        a0 += v
                        suffix[r, j] *= p0
                grad[n, 0, r] += a0
                grad[n, 1, r] += a1
    return total * inv


@njit(cache=True)
def binary_cp_predict(params, X, out):
    n_modes, _, rank = params.shape
    for i in range(X.shape[0]):
        pred = 0.0
        for r in range(rank):
            p = 1.0
            for n in range(n_modes):
                p *= params[n, X[i, n], r]
            pred += p
        out[i] = pred
    return out
