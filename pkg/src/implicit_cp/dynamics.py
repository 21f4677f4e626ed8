"""Checks of component-norm dynamics on recorded trajectories.

All time derivatives are forward differences between step-adjacent records,
so every tolerance is a budget for the O(lr) Euler discretization error.
"""
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .losses import ObservationSet, loss_gradient_tensor

NORM_FLOOR = 1e-6


def _unit_factors(f):
    out = []
    for u in f.factors:
        nrm = np.linalg.norm(u, axis=0)
        safe = np.where(nrm > 0, nrm, 1.0)
        out.append(np.where(nrm > 0, u / safe, 0.0))
    return out


def with_unbalancedness(f, eps):
    """Copy of `f` whose mode-0 vectors gain `eps` in squared norm.

    Starting from a balanced factorization this gives unbalancedness
    magnitude exactly `eps`.
    """
    out = f.copy()
    u = out.factors[0]
    sq = np.sum(u * u, axis=0)
    if np.any(sq == 0):
        raise ValueError("mode-0 vectors must be nonzero")
    u *= np.sqrt((sq + eps) / sq)
    return out


def gammas(f, problem, loss):
    """``<-∇L(W_e), ⊗_n ŵ_r^n>`` for every component (0 for zero components)."""
    units = _unit_factors(f)
    grad = loss_gradient_tensor(f, problem, loss)
    if isinstance(problem, ObservationSet):
        indices, c = grad
        prod = np.ones((indices.shape[0], f.rank))
        for n, u in enumerate(units):
            prod *= u[indices[:, n]]
        return -(c @ prod)
    n_modes = f.order
    operands = [grad, list(range(n_modes))]
    for n, u in enumerate(units):
        operands += [u, [n, n_modes]]
    return -np.einsum(*operands, [n_modes], optimize=True)


def gamma(f, problem, loss, r):
    return float(gammas(f, problem, loss)[r])


@dataclass
class DynamicsCheckReport:
    name: str
    max_violation: float
    tolerance: float
    passed: bool
    steps_checked: int = 0
    details: dict = field(default_factory=dict)
    residuals: Optional[list] = field(default=None, repr=False)

    def to_dict(self, with_residuals=False):
        d = asdict(self)
        if not with_residuals:
            d.pop("residuals")
        return d


def write_reports(reports, path):
    with open(path, "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2)


def check_balancedness_conservation(records, tolerance=1e-3):
    """Drift of pairwise squared-norm differences within each component.

    Needs records carrying ``mode_sq_norms``.
    """
    if not records or records[0].mode_sq_norms is None:
        raise ValueError("records must include per-mode squared norms")
    base = records[0].mode_sq_norms
    base_diff = base[:, :, None] - base[:, None, :]
    worst = 0.0
    series = []
    for rec in records:
        sq = rec.mode_sq_norms
        drift = np.abs((sq[:, :, None] - sq[:, None, :]) - base_diff).max()
        series.append(float(drift))
        worst = max(worst, float(drift))
    return DynamicsCheckReport("balancedness_conservation", worst, tolerance,
                               worst <= tolerance, len(records), residuals=series)


def _adjacent_pairs(records):
    pairs = []
    for a, b in zip(records[:-1], records[1:]):
        if b.iter != a.iter + 1:
            raise ValueError(f"records {a.iter} and {b.iter} are not step-adjacent")
        pairs.append((a, b))
    if not pairs:
        raise ValueError("need at least two step-adjacent records")
    if any(a.gammas is None for a, _ in pairs):
        raise ValueError("records must include gammas")
    return pairs


def norm_rate_balanced(sigma, gamma, order):
    """Right-hand side of the balanced component-norm ODE."""
    return order * gamma * sigma ** (2.0 - 2.0 / order)


def check_norm_ode(records, order, tolerance=1e-2, floor=NORM_FLOOR):
    """Relative residual of ``dσ/dt`` against ``N γ σ^(2 - 2/N)``.

    Components under `floor` are skipped in the relative measure; a component
    that is identically zero must stay zero (absolute residual reported).
    """
    worst = 0.0
    zero_drift = 0.0
    checked = 0
    series = []
    for a, b in _adjacent_pairs(records):
        dt = b.time - a.time
        rate = (b.norms - a.norms) / dt
        rhs = norm_rate_balanced(a.norms, a.gammas, order)
        big = a.norms >= floor
        rel = np.abs(rate[big] - rhs[big]) / np.maximum(np.abs(rhs[big]), 1e-300)
        step_worst = float(rel.max()) if rel.size else 0.0
        zeros = a.norms == 0
        if zeros.any():
            zero_drift = max(zero_drift, float(np.abs(rate[zeros]).max()))
        series.append(step_worst)
        worst = max(worst, step_worst)
        checked += 1
    passed = worst <= tolerance and zero_drift == 0.0
    return DynamicsCheckReport("norm_ode", worst, tolerance, passed, checked,
                               details={"zero_component_rate": zero_drift, "floor": floor},
                               residuals=series)


def theorem_bounds(sigma, gamma, order, eps):
    """Lower/upper bounds on ``dσ/dt`` for a component with unbalancedness `eps`."""
    sigma = np.asarray(sigma, float)
    gamma = np.asarray(gamma, float)
    s2n = sigma ** (2.0 / order)
    outer = order * gamma * (s2n + eps) ** (order - 1)
    inner_ = order * gamma * sigma ** 2 / (s2n + eps)
    lower = np.where(gamma >= 0, inner_, outer)
    upper = np.where(gamma >= 0, outer, inner_)
    return lower, upper


def check_norm_bounds(records, order, eps, slack=1e-2, floor=NORM_FLOOR):
    """Whether finite-difference ``dσ/dt`` respects the unbalanced two-sided bounds.

    The allowed slack for a component is ``slack * (1 + |γ|)``. The reported
    violation is the largest excursion outside the band, relative to that
    slack budget, so the check passes iff ``max_violation <= 1``.
    """
    worst = 0.0
    checked = 0
    neg_steps = pos_steps = 0
    for a, b in _adjacent_pairs(records):
        dt = b.time - a.time
        rate = (b.norms - a.norms) / dt
        lower, upper = theorem_bounds(a.norms, a.gammas, order, eps)
        live = a.norms > floor
        if not live.any():
            continue
        budget = slack * (1.0 + np.abs(a.gammas[live]))
        below = np.maximum(lower[live] - rate[live], 0.0)
        above = np.maximum(rate[live] - upper[live], 0.0)
        worst = max(worst, float(((below + above) / budget).max()))
        neg_steps += int((a.gammas[live] < 0).sum())
        pos_steps += int((a.gammas[live] >= 0).sum())
        checked += 1
    return DynamicsCheckReport("norm_bounds", worst, 1.0, worst <= 1.0, checked,
                               details={"eps": eps, "slack": slack,
                                        "negative_gamma_samples": neg_steps,
                                        "positive_gamma_samples": pos_steps})


def growth_windows(records, n_components, lo=0.1, hi=0.9):
    """For the `n_components` largest final components, the (start, end) times
    at which their norm first reaches `lo` and `hi` of its final value."""
    final = records[-1].norms
    top = np.argsort(-final, kind="stable")[:n_components]
    times = np.array([rec.time for rec in records])
    norms = np.stack([rec.norms for rec in records])
    windows = []
    for r in top:
        target = final[r]
        start = times[np.argmax(norms[:, r] >= lo * target)]
        end = times[np.argmax(norms[:, r] >= hi * target)]
        windows.append((float(start), float(end)))
    return windows


def incremental_order_holds(windows):
    """Components that start growing later also finish later.

    Windows are sorted by start time; their end times must be non-decreasing.
    """
    by_start = sorted(windows)
    return all(a[1] <= b[1] for a, b in zip(by_start[:-1], by_start[1:]))
