"""Completion and sensing objectives and their gradients.

The completion path is sparse end to end: predictions are evaluated only at
observed indices and gradients are scattered back through one-hot maps. The
dense matricized formulas are kept as reference implementations for tests.
"""
import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from . import _kernels
from .cp_model import end_tensor, predict_many
from .tensor_core import kron_except, matricize


@dataclass(frozen=True)
class Loss:
    """Scalar loss applied to residuals.

    ``squared``: ``coeff * z**2``. ``huber``: quadratic below ``delta``,
    linear beyond it.
    """

    kind: str = "squared"
    coeff: float = 0.5
    delta: float = 1.0

    def __post_init__(self):
        if self.kind == "squared":
            if self.coeff not in (0.5, 1.0):
                raise ValueError("squared loss coefficient must be 0.5 or 1.0")
        elif self.kind == "huber":
            if not self.delta > 0:
                raise ValueError("huber transition point must be positive")
        else:
            raise ValueError(f"unknown loss kind {self.kind!r}")

    def value(self, z):
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "squared":
            return self.coeff * z * z
        a = np.abs(z)
        return np.where(a < self.delta, 0.5 * z * z, self.delta * (a - 0.5 * self.delta))

    def derivative(self, z):
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "squared":
            return 2.0 * self.coeff * z
        return np.clip(z, -self.delta, self.delta)

    def to_dict(self):
        if self.kind == "squared":
            return {"kind": "squared", "coeff": self.coeff}
        return {"kind": "huber", "delta": self.delta}


def squared(coeff=0.5):
    return Loss("squared", coeff=coeff)


def huber(delta):
    return Loss("huber", delta=delta)


def scalar_loss(loss, z):
    return float(loss.value(z))


def scalar_loss_derivative(loss, z):
    return float(loss.derivative(z))


class ObservationSet:
    """Observed entries of a tensor: ``(M, N)`` indices and ``M`` values."""

    def __init__(self, shape, indices, values):
        self.shape = tuple(int(d) for d in shape)
        self.indices = np.asarray(indices, dtype=np.int64).reshape(-1, len(self.shape))
        self.values = np.asarray(values, dtype=np.float64).ravel()
        if self.indices.shape[0] == 0:
            raise ValueError("observation set is empty")
        if self.indices.shape[0] != self.values.size:
            raise ValueError("indices and values differ in length")
        if np.any(self.indices < 0) or np.any(self.indices >= np.array(self.shape)):
            raise ValueError("observation index out of range")
        flat = np.ravel_multi_index(tuple(self.indices.T), self.shape)
        if np.unique(flat).size != flat.size:
            raise ValueError("observation indices must be unique")

    def __len__(self):
        return self.values.size

    @cached_property
    def rows(self):
        """Indices shifted into the stacked-factor row space used by the kernels."""
        return np.ascontiguousarray(self.indices + _kernels.offsets(self.shape))

    def to_dict(self):
        return {"shape": list(self.shape), "indices": self.indices.tolist(),
                "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["shape"], d["indices"], d["values"])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class MeasurementSet:
    """Linear measurements ``y_i = <A_i, W*>`` with tensors stacked as ``(m, *shape)``."""

    def __init__(self, tensors, values):
        self.tensors = np.asarray(tensors, dtype=np.float64)
        self.values = np.asarray(values, dtype=np.float64).ravel()
        if self.tensors.ndim < 2 or self.tensors.shape[0] == 0:
            raise ValueError("measurement set is empty")
        if self.tensors.shape[0] != self.values.size:
            raise ValueError("tensors and values differ in length")
        self.shape = self.tensors.shape[1:]
        self.flat = self.tensors.reshape(self.tensors.shape[0], -1)

    def __len__(self):
        return self.values.size

    def to_dict(self):
        return {"shape": list(self.shape), "tensors": self.tensors.tolist(),
                "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d):
        tensors = np.asarray(d["tensors"], dtype=np.float64).reshape([-1] + list(d["shape"]))
        return cls(tensors, d["values"])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _check_shape(f, problem):
    if tuple(f.shape) != tuple(problem.shape):
        raise ValueError(f"factorization shape {f.shape} does not match problem shape {problem.shape}")


def residuals(f, problem):
    """Prediction minus target for every observation / measurement."""
    _check_shape(f, problem)
    if isinstance(problem, ObservationSet):
        return predict_many(f, problem.indices) - problem.values
    return problem.flat @ end_tensor(f).ravel() - problem.values


def completion_loss(f, obs, loss):
    _check_shape(f, obs)
    return float(loss.value(predict_many(f, obs.indices) - obs.values).mean())


def sensing_loss(f, meas, loss):
    _check_shape(f, meas)
    return float(loss.value(meas.flat @ end_tensor(f).ravel() - meas.values).mean())


def objective(f, problem, loss):
    return float(loss.value(residuals(f, problem)).mean())


def tensor_loss(W, problem, loss):
    """The loss evaluated at an arbitrary dense tensor `W`."""
    W = np.asarray(W, dtype=np.float64)
    if isinstance(problem, ObservationSet):
        z = W[tuple(problem.indices.T)] - problem.values
    else:
        z = problem.flat @ W.ravel() - problem.values
    return float(loss.value(z).mean())


def tensor_loss_gradient(W, problem, loss):
    """Dense gradient of the loss at an arbitrary tensor `W`."""
    W = np.asarray(W, dtype=np.float64)
    if isinstance(problem, ObservationSet):
        idx = tuple(problem.indices.T)
        grad = np.zeros(problem.shape)
        grad[idx] = loss.derivative(W[idx] - problem.values) / len(problem)
        return grad
    c = loss.derivative(problem.flat @ W.ravel() - problem.values) / len(problem)
    return (problem.flat.T @ c).reshape(problem.shape)


def loss_gradient_tensor(f, problem, loss):
    """Gradient of the loss at the end tensor of `f`.

    Completion problems return a sparse pair ``(indices, values)`` holding the
    gradient at observed entries (zero elsewhere); sensing problems return a
    dense array.
    """
    z = residuals(f, problem)
    c = loss.derivative(z) / len(problem)
    if isinstance(problem, ObservationSet):
        return problem.indices, c
    return (problem.flat.T @ c).reshape(problem.shape)


def densify(grad, shape):
    """Dense array from the sparse completion gradient pair."""
    if isinstance(grad, tuple):
        indices, values = grad
        out = np.zeros(shape)
        out[tuple(indices.T)] = values
        return out
    return np.asarray(grad)


def _dense_mode_gradients(G, f):
    """``[[G]]_n`` times the Khatri-Rao product of the other factors, per mode."""
    n_modes = f.order
    axes = list(range(n_modes))
    out = []
    for n in range(n_modes):
        operands = [G, axes]
        for m in range(n_modes):
            if m != n:
                operands += [f.factors[m], [m, n_modes]]
        out.append(np.einsum(*operands, [n, n_modes], optimize=True))
    return out


def loss_and_gradient(f, problem, loss):
    """Objective value and its gradient with respect to every weight.

    Returns
    -------
    value : float
    grads : list of ndarray
        ``grads[n]`` has the shape of ``f.factors[n]``; column ``r`` is the
        partial derivative with respect to ``w_r^n``.
    """
    _check_shape(f, problem)
    if isinstance(problem, ObservationSet):
        stacked = _kernels.stack(f.factors)
        grad = np.zeros_like(stacked)
        pred = np.empty(len(problem))
        value = _kernels.completion_value_grad(stacked, problem.rows, problem.values,
                                               *_kernels.loss_code(loss), grad, pred)
        return value, _kernels.unstack(grad, f.shape)
    W = end_tensor(f)
    z = problem.flat @ W.ravel() - problem.values
    c = loss.derivative(z) / len(problem)
    G = (problem.flat.T @ c).reshape(problem.shape)
    return float(loss.value(z).mean()), _dense_mode_gradients(G, f)


def objective_gradient(f, problem, loss):
    return loss_and_gradient(f, problem, loss)[1]


def objective_gradient_dense(f, problem, loss):
    """Reference gradient: ``[[∇L(W_e)]]_n · kron_except(w_r, n)`` per (r, n)."""
    G = densify(loss_gradient_tensor(f, problem, loss), f.shape)
    grads = [np.zeros_like(u) for u in f.factors]
    for r in range(f.rank):
        w = f.weights(r)
        for n in range(f.order):
            grads[n][:, r] = matricize(G, n) @ kron_except(w, n)
    return grads


def flatten_grads(grads):
    return np.concatenate([g.ravel() for g in grads])
