"""CP factorization: parameters, end tensor, component statistics, init."""
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .seeding import rng as _rng


@dataclass
class CPFactorization:
    """R-component CP factorization of an order-N tensor.

    ``factors[n]`` has shape ``(d_n, R)``; column ``r`` of ``factors[n]`` is
    the weight vector of component ``r`` in mode ``n``.
    """

    factors: list

    def __post_init__(self):
        self.factors = [np.array(u, dtype=np.float64, copy=True) for u in self.factors]
        if not self.factors:
            raise ValueError("factorization needs at least one mode")
        ranks = {u.shape[1] for u in self.factors if u.ndim == 2}
        if len(ranks) != 1 or any(u.ndim != 2 for u in self.factors):
            raise ValueError("all factors must be 2-d with a common number of columns")

    @property
    def shape(self):
        return tuple(u.shape[0] for u in self.factors)

    @property
    def order(self):
        return len(self.factors)

    @property
    def rank(self):
        return self.factors[0].shape[1]

    def copy(self):
        return CPFactorization([u.copy() for u in self.factors])

    def weights(self, r):
        """The N weight vectors of component `r`."""
        return [u[:, r].copy() for u in self.factors]

    @classmethod
    def from_weights(cls, weights):
        """Build from a nested list ``weights[r][n]`` (component-major)."""
        n_modes = len(weights[0])
        return cls([np.stack([np.asarray(w[n], float) for w in weights], axis=1)
                    for n in range(n_modes)])

    @classmethod
    def zeros(cls, shape, rank):
        return cls([np.zeros((d, rank)) for d in shape])


def end_tensor(f):
    """Materialize ``sum_r w_r^1 ⊗ ... ⊗ w_r^N``."""
    out = f.factors[0]
    for u in f.factors[1:]:
        # out: (..., R) -> (..., d_n, R)
        out = out[..., None, :] * u
    return out.sum(axis=-1)


def predict(f, index):
    """Entry ``index`` of the end tensor, without materializing it."""
    index = tuple(int(i) for i in index)
    if len(index) != f.order:
        raise ValueError(f"index of length {len(index)} for order-{f.order} factorization")
    for i, d in zip(index, f.shape):
        if not 0 <= i < d:
            raise IndexError(f"index {index} out of range for shape {f.shape}")
    prod = np.ones(f.rank)
    for u, i in zip(f.factors, index):
        prod = prod * u[i]
    return float(prod.sum())


def predict_many(f, indices):
    """Vectorized :func:`predict` for an ``(M, N)`` integer index array."""
    indices = np.asarray(indices)
    prod = np.ones((indices.shape[0], f.rank))
    for n, u in enumerate(f.factors):
        prod *= u[indices[:, n]]
    return prod.sum(axis=1)


def mode_sq_norms(f):
    """Squared weight-vector norms, shape ``(R, N)``."""
    return np.stack([(u * u).sum(axis=0) for u in f.factors], axis=1)


def component_norms(f):
    """``||⊗_n w_r^n|| = prod_n ||w_r^n||`` for every component."""
    return np.sqrt(mode_sq_norms(f)).prod(axis=1)


def component_norm(f, r):
    return float(component_norms(f)[r])


def component_directions(f, r):
    """Unit weight vectors of component `r`; zero vectors stay zero."""
    out = []
    for u in f.factors:
        w = u[:, r]
        nrm = np.linalg.norm(w)
        out.append(w / nrm if nrm > 0 else np.zeros_like(w))
    return out


def unbalancedness_magnitude(f):
    """Max over components and mode pairs of ``| ||w_r^n||^2 - ||w_r^m||^2 |``."""
    sq = mode_sq_norms(f)
    return float((sq.max(axis=1) - sq.min(axis=1)).max())


@dataclass
class InitSpec:
    """Initialization recipe.

    kind is one of ``"gaussian"``, ``"balanced_gaussian"`` or ``"scaled"``.
    ``scaled`` multiplies every weight of `base` by `alpha`.
    """

    kind: str = "gaussian"
    std: float = 1e-2
    seed: Optional[int] = 0
    alpha: float = 1.0
    base: Optional[CPFactorization] = field(default=None, repr=False)
    mean: float = 0.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "balanced_gaussian", "scaled"):
            raise ValueError(f"unknown init kind {self.kind!r}")
        if self.kind == "scaled":
            if self.base is None:
                raise ValueError("scaled init needs a base factorization")
            if not self.alpha > 0:
                raise ValueError("alpha must be positive")
        elif not self.std > 0:
            raise ValueError("std must be positive")


def balance(f):
    """Rescale each component's vectors to the geometric mean of their norms.

    Directions and every component tensor are preserved; the result has
    unbalancedness magnitude zero.
    """
    out = f.copy()
    norms = np.sqrt(mode_sq_norms(f))  # (R, N)
    n_modes = f.order
    for r in range(f.rank):
        if np.any(norms[r] == 0):
            for u in out.factors:
                u[:, r] = 0.0
            continue
        target = np.exp(np.log(norms[r]).sum() / n_modes)
        for n, u in enumerate(out.factors):
            u[:, r] *= target / norms[r, n]
    return out


def gaussian_factorization(shape, rank, std, rng, mean=0.0):
    return CPFactorization([mean + std * rng.standard_normal((d, rank)) for d in shape])


def initialize(spec, shape=None, rank=None):
    """Create a factorization from an :class:`InitSpec`."""
    if spec.kind == "scaled":
        return CPFactorization([spec.alpha * u for u in spec.base.factors])
    gen = _rng(spec.seed, "init")
    f = gaussian_factorization(shape, rank, spec.std, gen, mean=spec.mean)
    if spec.kind == "balanced_gaussian":
        f = balance(f)
    return f


def sufficient_R(shape):
    """Number of components that suffices to express any tensor of `shape`."""
    shape = [int(d) for d in shape]
    if not shape:
        raise ValueError("shape must have at least one mode")
    return int(np.prod(shape)) // max(shape)


def save_factorization(f, path):
    payload = {
        "shape": list(f.shape),
        "R": f.rank,
        "weights": [[u[:, r].tolist() for u in f.factors] for r in range(f.rank)],
    }
    with open(path, "w") as fh:
        # json writes floats with repr(), which round-trips doubles exactly
        json.dump(payload, fh)


def load_factorization(path):
    with open(path) as fh:
        payload = json.load(fh)
    f = CPFactorization.from_weights(payload["weights"])
    if list(f.shape) != list(payload["shape"]) or f.rank != payload["R"]:
        raise ValueError(f"checkpoint {path} is inconsistent with its header")
    return f
