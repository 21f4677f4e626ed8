"""Synthetic ground truths, observation sets, Gaussian measurements, RIP probe."""
from dataclasses import dataclass
from functools import reduce

import numpy as np

from .losses import MeasurementSet, ObservationSet
from .seeding import rng as _rng
from .tensor_core import frobenius_norm, outer_product


@dataclass
class GroundTruthSpec:
    shape: tuple
    rank: int
    seed: int = 0
    normalize: bool = True

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        if self.rank < 1:
            raise ValueError("ground truth rank must be at least 1")


def generate_ground_truth(spec):
    """Sum of `spec.rank` outer products of standard normal vectors.

    Scaled to unit Frobenius norm when ``spec.normalize``.
    """
    gen = _rng(spec.seed, "ground_truth")
    while True:
        W = np.zeros(spec.shape)
        for _ in range(spec.rank):
            W += outer_product([gen.standard_normal(d) for d in spec.shape])
        nrm = frobenius_norm(W)
        if nrm > 0:
            break
    return W / nrm if spec.normalize else W


def sample_observations(W, count, seed):
    """`count` distinct entries of `W`, chosen uniformly without repetition."""
    W = np.asarray(W, dtype=np.float64)
    total = W.size
    if count > total:
        raise ValueError(f"cannot sample {count} distinct entries from {total}")
    if count < 1:
        raise ValueError("count must be positive")
    gen = _rng(seed, "observations")
    flat = gen.choice(total, size=count, replace=False)
    indices = np.stack(np.unravel_index(flat, W.shape), axis=1)
    return ObservationSet(W.shape, indices, W.ravel()[flat])


def measurement_std(shape):
    """Entry std giving measurement tensors unit expected squared norm."""
    return float(np.prod(shape)) ** -0.5


def sample_measurements(shape, m, seed, W=None):
    """`m` Gaussian measurement tensors; values are ``<A_i, W>`` (zeros if no `W`)."""
    shape = tuple(int(d) for d in shape)
    gen = _rng(seed, "measurements")
    A = gen.standard_normal((m,) + shape) * measurement_std(shape)
    values = np.zeros(m) if W is None else A.reshape(m, -1) @ np.asarray(W, float).ravel()
    return MeasurementSet(A, values)


def complete_basis(shape):
    """Measurement set of all entry indicators (tensor completion with every entry)."""
    shape = tuple(shape)
    total = int(np.prod(shape))
    return MeasurementSet(np.eye(total).reshape((total,) + shape), np.zeros(total))


@dataclass
class RipEstimate:
    """Sampled lower bound on the 1-RIP constant.

    ``delta_lower`` is a maximum over sampled rank-one unit tensors, so it can
    only under-estimate the true constant.

    With entries of variance ``1/prod(shape)`` the energy concentrates near
    ``m/prod(shape)`` rather than 1, so ``delta_rescaled`` also reports the
    constant of the best scalar multiple of the map, ``(hi-lo)/(hi+lo)``.
    """

    delta_lower: float
    energy_min: float
    energy_max: float
    trials: int
    kind: str = "sampled lower bound"

    @property
    def delta_rescaled(self):
        return (self.energy_max - self.energy_min) / (self.energy_max + self.energy_min)


def estimate_rip_delta(meas, rank=1, trials=1000, seed=0):
    if rank != 1:
        raise ValueError("only rank-one probing is supported")
    gen = _rng(seed, "rip")
    lo, hi = np.inf, -np.inf
    for _ in range(trials):
        vecs = [gen.standard_normal(d) for d in meas.shape]
        vecs = [v / np.linalg.norm(v) for v in vecs]
        energy = float(np.sum((meas.flat @ reduce(np.kron, vecs)) ** 2))
        lo, hi = min(lo, energy), max(hi, energy)
    return RipEstimate(max(1.0 - lo, hi - 1.0), lo, hi, trials)
