"""Rank-one approximation of trajectories started near the origin.

A factorization initialized at ``alpha * base`` is run until its end tensor
reaches a sphere of radius ``rho``. From that moment a single-component
(rank-one) companion, started at the leading component rescaled onto the
sphere, is run in lockstep and the distance between the two end tensors is
tracked.
"""
import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .cp_model import (
    CPFactorization,
    component_norms,
    end_tensor,
    unbalancedness_magnitude,
)
from .losses import ObservationSet, densify, loss_gradient_tensor
from .optimizer import GradientDescent, TrainConfig
from .seeding import rng as _rng
from .tensor_core import frobenius_norm, outer_product

BALANCE_TOL = 1e-12


def rho_upper_bound(obs, delta_h):
    """Supremum of admissible sphere radii: ``min |y| - delta_h``."""
    return float(np.min(np.abs(obs.values)) - delta_h)


def validate_rho(rho, obs, delta_h):
    upper = rho_upper_bound(obs, delta_h)
    if not (0.0 < rho < upper):
        raise ValueError(f"rho must lie in (0, {upper:.6g}); got {rho}")


@dataclass
class RankOneExperimentConfig:
    """Parameters of an initialization-scale sweep.

    Attributes
    ----------
    rho : float
        Radius of the reference sphere.
    alphas : list of float
        Initialization scales, positive and strictly decreasing.
    base_init : CPFactorization
        Unscaled initialization; every weight is multiplied by each alpha.
    horizon : float
        Tracking budget in gradient-flow time after the crossing.
    distance_cap : float
        Tracking also stops once the main end tensor norm reaches this value.
    delta_h : float
        Huber transition point.
    lr : float
        Fixed step size shared by the main and companion runs.
    max_steps : int
        Safety cap on the number of steps before a crossing.
    """

    rho: float
    alphas: list
    base_init: CPFactorization
    horizon: float
    distance_cap: float
    delta_h: float
    lr: float = 0.1
    max_steps: int = 2_000_000

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not self.alphas or any(a <= 0 for a in self.alphas):
            raise ValueError("alphas must be positive")
        if any(b >= a for a, b in zip(self.alphas, self.alphas[1:])):
            raise ValueError("alphas must be strictly decreasing")
        if not (self.horizon > 0 and self.distance_cap > self.rho and self.lr > 0):
            raise ValueError("need horizon > 0, lr > 0 and distance_cap > rho")
        if not self.delta_h > 0:
            raise ValueError("delta_h must be positive")


@dataclass
class AssumptionReport:
    """Outcome of checking a base initialization against the rank-one conditions.

    ``leading`` is the index of the component that satisfies the
    leading-component conditions, or None.
    """

    delta_below_observations: bool
    balanced: bool
    leading_component: bool
    leading: Optional[int]
    min_abs_y: float
    unbalancedness: float
    grad_norm_at_zero: float
    projections: list
    failures: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.failures

    def to_dict(self):
        d = asdict(self)
        d["passed"] = self.passed
        return d


def gradient_at_zero(obs, loss):
    """Dense loss gradient at the zero tensor."""
    f0 = CPFactorization([np.zeros((d, 1)) for d in obs.shape])
    return densify(loss_gradient_tensor(f0, obs, loss), obs.shape)


def validate_assumptions(base_init, obs, delta_h):
    """Check the Huber threshold, balancedness and leading-component conditions.

    A component ``rb`` leads when its unit tensor has positive projection
    ``p`` on ``-∇L(0)`` and, for every other component ``r`` and mode ``n``,
    ``||a_rb^n|| > ||a_r^n|| * (||∇L(0)|| / p) ** (1 / (N - 2))``.
    Candidates are tried in order of decreasing component norm.
    """
    from .losses import huber

    if base_init.order < 3:
        raise ValueError("the leading-component condition needs order >= 3")
    if not isinstance(obs, ObservationSet):
        raise ValueError("rank-one analysis is defined for completion problems")
    failures = []
    min_abs_y = float(np.min(np.abs(obs.values)))
    cond1 = delta_h < min_abs_y
    if not cond1:
        failures.append(f"delta_h={delta_h} is not below min |y|={min_abs_y}")
    unb = unbalancedness_magnitude(base_init)
    cond2 = unb <= BALANCE_TOL * max(1.0, float(np.max(component_norms(base_init))))
    if not cond2:
        failures.append(f"base init is unbalanced (magnitude {unb:.3e})")

    G0 = gradient_at_zero(obs, huber(delta_h))
    g_norm = frobenius_norm(G0)
    vec_norms = np.stack([np.linalg.norm(u, axis=0) for u in base_init.factors], axis=1)
    projections = []
    for r in range(base_init.rank):
        if np.any(vec_norms[r] == 0):
            projections.append(0.0)
            continue
        unit = outer_product([u[:, r] / vec_norms[r, n] for n, u in enumerate(base_init.factors)])
        projections.append(float(-np.vdot(G0, unit)))

    leading = None
    power = 1.0 / (base_init.order - 2)
    for rb in np.argsort(-component_norms(base_init), kind="stable"):
        p = projections[rb]
        if not p > 0:
            continue
        factor = (g_norm / p) ** power
        others = np.delete(vec_norms, rb, axis=0)
        if np.all(vec_norms[rb] > others * factor):
            leading = int(rb)
            break
    cond3 = leading is not None
    if not cond3:
        failures.append("no component satisfies the leading-component conditions")
    return AssumptionReport(cond1, bool(cond2), cond3, leading, min_abs_y, unb, g_norm,
                            projections, failures)


@dataclass
class Crossing:
    """First iterate whose end tensor reaches the sphere.

    ``crossed`` is False when the run ended first; ``iter`` and ``time`` are
    then 0 by convention.
    """

    iter: int
    time: float
    crossed: bool
    end_norm: float


def _end_norm(f):
    return frobenius_norm(end_tensor(f))


def detect_crossing(gd, rho, max_steps, land=True, bisection_steps=60):
    """Advance `gd` until ``||W_e|| >= rho``.

    With ``land=True`` the step that would overshoot is shortened by
    bisection so the crossing iterate sits on the sphere up to rounding.
    """
    if _end_norm(gd.f) >= rho:
        return Crossing(0, 0.0, True, _end_norm(gd.f))
    start = gd.iter
    while gd.iter - start < max_steps:
        lr = gd.next_step_size(gd.evaluate()[1]) if gd.config.lr_scheme == "fixed" else None
        if land and lr is not None and _end_norm(gd.trial_step(lr)) > rho:
            lo, hi = 0.0, 1.0
            for _ in range(bisection_steps):
                mid = 0.5 * (lo + hi)
                if _end_norm(gd.trial_step(mid * lr)) < rho:
                    lo = mid
                else:
                    hi = mid
            gd.advance(scale=hi)
        else:
            gd.advance()
        nrm = _end_norm(gd.f)
        if nrm >= rho:
            return Crossing(gd.iter, gd.time, True, nrm)
    return Crossing(0, 0.0, False, _end_norm(gd.f))


def leading_component(f):
    return int(np.argmax(component_norms(f)))


def companion_rank_one_init(f, rho, leading=None):
    """One-component factorization on the sphere along the leading component.

    Every vector of the component is rescaled to norm ``rho ** (1 / N)``, so
    the result is balanced and its end tensor has norm ``rho``.
    """
    r = leading_component(f) if leading is None else leading
    scale = rho ** (1.0 / f.order)
    vecs = []
    for u in f.factors:
        v = u[:, r]
        nrm = np.linalg.norm(v)
        if nrm == 0:
            raise ValueError(f"component {r} has a zero weight vector")
        vecs.append(scale * v / nrm)
    return CPFactorization.from_weights([vecs])


@dataclass
class RankOneTrace:
    """Lockstep record of a main run and its rank-one companion after the crossing."""

    alpha: Optional[float]
    crossing: Crossing
    leading: int
    companion_vectors: list
    nonleading_norm_sum: float
    steps: list = field(default_factory=list)
    times: list = field(default_factory=list)
    distances: list = field(default_factory=list)
    main_norms: list = field(default_factory=list)
    companion_norms: list = field(default_factory=list)
    stop_reason: str = ""

    @property
    def max_distance(self):
        return max(self.distances) if self.distances else math.nan

    def summary(self):
        return {
            "alpha": self.alpha,
            "t0_iter": self.crossing.iter,
            "t0_time": self.crossing.time,
            "crossed": self.crossing.crossed,
            "leading": self.leading,
            "nonleading_norm_sum": self.nonleading_norm_sum,
            "max_distance": self.max_distance,
            "final_distance": self.distances[-1] if self.distances else math.nan,
            "tracked_steps": len(self.steps) - 1,
            "stop_reason": self.stop_reason,
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "time", "distance", "main_norm", "companion_norm"])
            for row in zip(self.steps, self.times, self.distances, self.main_norms,
                           self.companion_norms):
                w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])


def track_companion_distance(main, companion, horizon, distance_cap, trace, record_every=1):
    """Step `main` and `companion` together, appending to `trace`.

    Both trainers must use the same fixed step size. Stops once the elapsed
    time since the crossing reaches `horizon` or ``||W_e||`` reaches
    `distance_cap`. The shifted time axis starts at 0.
    """
    if main.config.lr_scheme != "fixed" or companion.config.lr_scheme != "fixed":
        raise ValueError("lockstep tracking needs a fixed step size")
    t_start = main.time
    step = 0

    def log():
        Wm, Wc = end_tensor(main.f), end_tensor(companion.f)
        trace.steps.append(step)
        trace.times.append(main.time - t_start)
        trace.distances.append(frobenius_norm(Wm - Wc))
        trace.main_norms.append(frobenius_norm(Wm))
        trace.companion_norms.append(frobenius_norm(Wc))

    log()
    while True:
        if main.time - t_start >= horizon:
            trace.stop_reason = "horizon"
            break
        if trace.main_norms[-1] >= distance_cap:
            trace.stop_reason = "distance_cap"
            break
        main.advance()
        companion.advance()
        step += 1
        if step % record_every == 0:
            log()
    if trace.steps[-1] != step:
        log()
    return trace


def run_alpha(config, obs, alpha, land=True, record_every=1):
    """Crossing detection followed by lockstep tracking for one scale."""
    from .losses import huber

    validate_rho(config.rho, obs, config.delta_h)
    loss = huber(config.delta_h)
    tc = TrainConfig(lr_scheme="fixed", lr=config.lr, stop_loss=0.0)
    f0 = CPFactorization([alpha * u for u in config.base_init.factors])
    if _end_norm(f0) > config.rho:
        raise ValueError(f"alpha={alpha} starts outside the reference sphere")
    main = GradientDescent(f0, obs, loss, tc)
    crossing = detect_crossing(main, config.rho, config.max_steps, land=land)
    r = leading_component(main.f)
    norms = component_norms(main.f)
    trace = RankOneTrace(alpha, crossing, r, [], float(norms.sum() - norms[r]))
    if not crossing.crossed:
        trace.stop_reason = "no_crossing"
        return trace
    comp_f = companion_rank_one_init(main.f, config.rho, r)
    trace.companion_vectors = [u[:, 0].tolist() for u in comp_f.factors]
    companion = GradientDescent(comp_f, obs, loss, tc)
    return track_companion_distance(main, companion, config.horizon, config.distance_cap,
                                    trace, record_every)


def alpha_sweep(config, obs, land=True, record_every=1):
    return [run_alpha(config, obs, a, land, record_every) for a in config.alphas]


def sweep_properties(traces):
    """Orderings expected as alpha decreases along the sweep."""
    t0 = [t.crossing.time for t in traces]
    dist = [t.max_distance for t in traces]
    return {
        "all_crossed": all(t.crossing.crossed for t in traces),
        "t0_nondecreasing": all(b >= a for a, b in zip(t0, t0[1:])),
        "distance_strictly_decreasing": all(b < a for a, b in zip(dist, dist[1:])),
        "t0_times": t0,
        "max_distances": dist,
    }


def random_sphere_rank_one(shape, rho, gen):
    """Balanced single component with uniformly random directions and norm `rho`."""
    scale = rho ** (1.0 / len(shape))
    vecs = []
    for d in shape:
        v = gen.standard_normal(d)
        vecs.append(scale * v / np.linalg.norm(v))
    return CPFactorization.from_weights([vecs])


def _min_distance_run(f, obs, loss, target, lr, horizon, tol):
    tc = TrainConfig(lr_scheme="fixed", lr=lr, stop_loss=0.0)
    gd = GradientDescent(f, obs, loss, tc)
    best = frobenius_norm(end_tensor(gd.f) - target)
    while gd.time < horizon and best > tol:
        gd.advance()
        best = min(best, frobenius_norm(end_tensor(gd.f) - target))
    return best, frobenius_norm(end_tensor(gd.f) - target)


def corollary2_probe(obs, delta_h, target, rho, full_init=None, n_trajectories=5, seed=0,
                     lr=0.1, horizon=1e4, tol=1e-2):
    """Do rank-one runs from the sphere, and the full run, reach `target`?

    Parameters
    ----------
    full_init : CPFactorization, optional
        Small initialization for the full factorization run.

    Returns
    -------
    dict
        Minimum and final distances to `target` for every run, and whether
        all of them came within `tol`.
    """
    from .losses import huber

    validate_rho(rho, obs, delta_h)
    loss = huber(delta_h)
    gen = _rng(seed, "companion")
    rank_one = []
    for _ in range(n_trajectories):
        f = random_sphere_rank_one(obs.shape, rho, gen)
        best, final = _min_distance_run(f, obs, loss, target, lr, horizon, tol)
        rank_one.append({"min_distance": best, "final_distance": final})
    report = {"rank_one": rank_one, "tol": tol}
    ok = all(r["min_distance"] <= tol for r in rank_one)
    if full_init is not None:
        best, final = _min_distance_run(full_init, obs, loss, target, lr, horizon, tol)
        report["full"] = {"min_distance": best, "final_distance": final}
        ok = ok and best <= tol
    report["converged"] = ok
    return report


def rank_one_instance(shape, seed=0, low=0.5, high=1.5):
    """Rank-one tensor whose vector entries have magnitudes in ``[low, high]``.

    Entries of the result are bounded away from zero, so a Huber transition
    point below ``low ** N`` is admissible.
    """
    gen = _rng(seed, "ground_truth")
    vecs = [gen.uniform(low, high, d) * gen.choice([-1.0, 1.0], d) for d in shape]
    return outer_product(vecs)


def leading_base_init(obs, delta_h, rank, seed=0, noise=0.3, margin=2.0, other_std=1.0):
    """Balanced base initialization with a clear leading component.

    The leading component follows the sign pattern of ``-∇L(0)`` perturbed by
    noise; its vectors are then scaled to exceed the required separation from
    the remaining Gaussian components by `margin`.
    """
    from .cp_model import balance
    from .losses import huber

    gen = _rng(seed, "init")
    shape = obs.shape
    others = balance(CPFactorization([other_std * gen.standard_normal((d, rank - 1))
                                      for d in shape])) if rank > 1 else None
    G0 = gradient_at_zero(obs, huber(delta_h))
    lead = _sign_pattern_vectors(-G0)
    lead = [v / np.linalg.norm(v) + noise * gen.standard_normal(len(v)) / math.sqrt(len(v))
            for v in lead]
    lead = [v / np.linalg.norm(v) for v in lead]
    unit = outer_product(lead)
    p = float(-np.vdot(G0, unit))
    if not p > 0:
        lead[0] = -lead[0]
        p = -p
    factor = (frobenius_norm(G0) / p) ** (1.0 / (len(shape) - 2))
    other_max = 0.0 if others is None else float(np.max([np.linalg.norm(u, axis=0).max()
                                                         for u in others.factors]))
    scale = max(margin * factor * other_max, 1.0)
    lead_f = CPFactorization([scale * v[:, None] for v in lead])
    if others is None:
        return lead_f
    return CPFactorization([np.concatenate([a, b], axis=1)
                            for a, b in zip(lead_f.factors, others.factors)])


def _sign_pattern_vectors(T):
    """Rank-one vectors whose outer product best matches ``sign(T)`` by alternating fits."""
    S = np.sign(T)
    vecs = [np.ones(d) for d in S.shape]
    for _ in range(20):
        for n in range(S.ndim):
            operands = [S, list(range(S.ndim))]
            for m, v in enumerate(vecs):
                if m != n:
                    operands += [v, [m]]
            w = np.einsum(*operands, [n])
            nrm = np.linalg.norm(w)
            vecs[n] = w / nrm if nrm > 0 else np.ones_like(w) / math.sqrt(len(w))
    return vecs
