"""Gradient descent over CP factorizations, adaptive step size, Adam.

Plain gradient descent is the explicit-Euler discretization of gradient flow;
``time`` in every record is the cumulative sum of step sizes so adaptive runs
stay comparable to continuous-time statements.
"""
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .cp_model import component_norms, end_tensor, mode_sq_norms, unbalancedness_magnitude
from .losses import loss_and_gradient

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Raised when the loss or gradient stops being finite."""

    def __init__(self, message, record=None, records=None):
        super().__init__(message)
        self.record = record
        self.records = records or []


@dataclass
class TrainConfig:
    lr_scheme: str = "adaptive"
    lr: float = 1e-2
    beta: float = 0.99
    eps: float = 1e-6
    stop_loss: float = 1e-8
    max_iters: int = 1_000_000
    record_every: int = 100
    record_gammas: bool = False
    record_mode_norms: bool = False
    seed: Optional[int] = 0

    def __post_init__(self):
        if self.lr_scheme not in ("fixed", "adaptive"):
            raise ValueError(f"unknown lr scheme {self.lr_scheme!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.record_every < 1:
            raise ValueError("record_every must be at least 1")


@dataclass
class AdaptiveLR:
    """Base rate divided by the root of a bias-corrected EMA of squared gradient norms."""

    lr: float = 1e-2
    beta: float = 0.99
    eps: float = 1e-6
    ema: float = 0.0

    def step_size(self, grad_sq_norm, t):
        self.ema = self.beta * self.ema + (1.0 - self.beta) * grad_sq_norm
        corrected = self.ema / (1.0 - self.beta ** t)
        return self.lr / (math.sqrt(corrected) + self.eps)


def adaptive_lr_step_size(ema, grad_sq_norm, t, lr=1e-2, beta=0.99, eps=1e-6):
    """Functional form of :class:`AdaptiveLR`: returns ``(step, new_ema)``."""
    sched = AdaptiveLR(lr, beta, eps, ema)
    step = sched.step_size(grad_sq_norm, t)
    return step, sched.ema


@dataclass
class TrajectoryRecord:
    iter: int
    time: float
    loss: float
    lr: float
    unbalancedness: float
    norms: np.ndarray = field(repr=False)
    gammas: Optional[np.ndarray] = field(default=None, repr=False)
    mode_sq_norms: Optional[np.ndarray] = field(default=None, repr=False)
    recon_error: Optional[float] = None
    companion_distance: Optional[float] = None


class GradientDescent:
    """Stateful gradient descent on one factorization.

    ``state()`` evaluates the current iterate; ``advance()`` applies one step
    using the gradient of the last evaluation.
    """

    def __init__(self, f, problem, loss, config, ground_truth=None):
        self.f = f.copy()
        self.problem = problem
        self.loss = loss
        self.config = config
        self.ground_truth = ground_truth
        self.iter = 0
        self.time = 0.0
        self.last_lr = 0.0
        self._sched = AdaptiveLR(config.lr, config.beta, config.eps)
        self._cache = None

    def evaluate(self):
        if self._cache is None or self._cache[0] != self.iter:
            value, grads = loss_and_gradient(self.f, self.problem, self.loss)
            self._cache = (self.iter, value, grads)
        return self._cache[1], self._cache[2]

    def next_step_size(self, grads):
        if self.config.lr_scheme == "fixed":
            return self.config.lr
        g2 = float(sum(np.vdot(g, g) for g in grads))
        return self._sched.step_size(g2, self.iter + 1)

    def advance(self, scale=1.0):
        """Take one step; `scale` shrinks it (used to land exactly on a sphere)."""
        value, grads = self.evaluate()
        if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
            raise DivergenceError(f"non-finite loss or gradient at iteration {self.iter}",
                                  record=self.record())
        lr = self.next_step_size(grads) * scale
        for u, g in zip(self.f.factors, grads):
            u -= lr * g
        self.iter += 1
        self.time += lr
        self.last_lr = lr
        return lr

    def trial_step(self, lr):
        """Factorization after a step of size `lr`, without committing it."""
        _, grads = self.evaluate()
        out = self.f.copy()
        for u, g in zip(out.factors, grads):
            u -= lr * g
        return out

    def record(self, companion_distance=None):
        value, _ = self.evaluate()
        rec = TrajectoryRecord(
            iter=self.iter,
            time=self.time,
            loss=value,
            lr=self.last_lr,
            unbalancedness=unbalancedness_magnitude(self.f),
            norms=component_norms(self.f),
            companion_distance=companion_distance,
        )
        if self.config.record_gammas:
            from .dynamics import gammas
            rec.gammas = gammas(self.f, self.problem, self.loss)
        if self.config.record_mode_norms:
            rec.mode_sq_norms = mode_sq_norms(self.f)
        if self.ground_truth is not None:
            rec.recon_error = float(np.linalg.norm(end_tensor(self.f) - self.ground_truth))
        return rec


def train(f, problem, loss, config, ground_truth=None, callback=None):
    """Run gradient descent until the loss drops below ``stop_loss`` or ``max_iters``.

    Records are taken every ``record_every`` iterations, plus the first and
    the last iterate.

    Returns
    -------
    f : CPFactorization
        Final weights (a copy; the input is not modified).
    records : list of TrajectoryRecord
    """
    gd = GradientDescent(f, problem, loss, config, ground_truth)
    records = []
    while True:
        value, _ = gd.evaluate()
        done = value < config.stop_loss or gd.iter >= config.max_iters
        if gd.iter % config.record_every == 0 or done:
            records.append(gd.record())
            if callback is not None:
                callback(records[-1])
        if done:
            break
        try:
            gd.advance()
        except DivergenceError as exc:
            exc.records = records
            raise
    logger.info("stopped at iteration %d with loss %.3e", gd.iter, value)
    return gd.f, records


TRAJECTORY_COLUMNS = ["iter", "time", "lr", "loss", "unbalancedness", "recon_error",
                      "companion_distance"]


def _fmt(x):
    if x is None:
        return ""
    return repr(float(x))


def write_trajectory_csv(records, path, top_k=10):
    """One row per record; ``norm_j`` is the j'th largest component norm."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        k = min(top_k, len(records[0].norms)) if records else top_k
        header = TRAJECTORY_COLUMNS + [f"norm_{j + 1}" for j in range(k)]
        with_gamma = bool(records) and records[0].gammas is not None
        if with_gamma:
            header += [f"gamma_{j + 1}" for j in range(k)]
        w.writerow(header)
        for rec in records:
            order = np.argsort(-rec.norms, kind="stable")[:k]
            row = [rec.iter] + [_fmt(getattr(rec, c)) for c in TRAJECTORY_COLUMNS[1:]]
            row += [_fmt(v) for v in rec.norms[order]]
            if with_gamma:
                row += [_fmt(v) for v in rec.gammas[order]]
            w.writerow(row)


@dataclass
class AdamConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 5000
    stop_loss: float = 1e-8
    max_iters: int = 10_000
    record_every: int = 100
    seed: Optional[int] = 0

    def to_dict(self):
        return asdict(self)


class Adam:
    """Adam with bias-corrected moment estimates; updates parameters in place."""

    def __init__(self, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class AdamRecord:
    iter: int
    epoch: int
    loss: float


def adam_train(params, objective, n_samples, config, rng):
    """Mini-batch Adam over `params` (list of arrays, updated in place).

    ``objective(params, batch_indices)`` returns ``(loss, grads)``. Each epoch
    draws a fresh permutation from `rng`; the final partial batch is kept.
    Stops once a batch loss falls below ``stop_loss`` or after ``max_iters``.
    """
    opt = Adam(config.lr, config.beta1, config.beta2, config.eps)
    bs = min(config.batch_size, n_samples)
    records = []
    it = epoch = 0
    while it < config.max_iters:
        perm = rng.permutation(n_samples)
        for start in range(0, n_samples, bs):
            batch = perm[start:start + bs]
            value, grads = objective(params, batch)
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
                raise DivergenceError(f"non-finite Adam objective at iteration {it}",
                                      record=AdamRecord(it, epoch, value), records=records)
            if it % config.record_every == 0:
                records.append(AdamRecord(it, epoch, value))
            if value < config.stop_loss:
                records.append(AdamRecord(it, epoch, value))
                return params, records
            opt.step(params, grads)
            it += 1
            if it >= config.max_iters:
                break
        epoch += 1
    records.append(AdamRecord(it, epoch, value))
    return params, records
