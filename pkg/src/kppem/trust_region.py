"""Second-order KPP with trust-region control of the relaxation parameter.

At ``theta_k`` the likelihood and the penalty are replaced by quadratic
models built from ``g = grad l``, ``H = hess l`` and ``I = hess I(theta_k, .)``
evaluated at ``theta_k``.  The trust-region step maximizes
``g^T d + d^T H d / 2`` over the ball ``sqrt(d^T I d) <= delta``; its
Lagrange multiplier ``beta`` makes the step identical to the approximate
KPP step ``(-H + beta I) d = g``.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.linalg
import scipy.optimize

from .model import ProblemModel
from .solver import IterateRecord, IterateTrace, SolverConfig

__all__ = [
    "QuadraticModel",
    "SubproblemError",
    "TrustRegionCollapsed",
    "TrustRegionState",
    "build_quadratic_model",
    "run_tr",
    "solve_tr_subproblem",
    "tr_accept",
    "tr_norm",
    "update_delta",
]

MAX_CONSECUTIVE_REJECTIONS = 60
# Predicted gains below this multiple of eps * (1 + |l|) cannot be resolved.
RESOLUTION_FACTOR = 16.0


class SubproblemError(RuntimeError):
    pass


class TrustRegionCollapsed(RuntimeError):
    pass


@dataclass
class QuadraticModel:
    theta: np.ndarray
    base: float
    g: np.ndarray
    H: np.ndarray
    I: np.ndarray

    def __post_init__(self):
        n = self.g.size
        if self.H.shape != (n, n) or self.I.shape != (n, n):
            raise ValueError("inconsistent quadratic model dimensions")

    def loglik(self, theta) -> float:
        """Quadratic model of the log-likelihood at ``theta``."""
        d = np.asarray(theta, dtype=float) - self.theta
        return float(self.base + self.g @ d + 0.5 * d @ self.H @ d)

    def penalty(self, theta) -> float:
        """Quadratic model of the proximal penalty at ``theta``."""
        d = np.asarray(theta, dtype=float) - self.theta
        return float(0.5 * d @ self.I @ d)

    def predicted_increase(self, d) -> float:
        return float(self.g @ d + 0.5 * d @ self.H @ d)


def build_quadratic_model(model: ProblemModel, theta_k) -> QuadraticModel:
    theta_k = model.validate(theta_k).copy()
    H = model.hess_log_likelihood(theta_k)
    I = model.hess_kl_penalty(theta_k, theta_k)
    return QuadraticModel(theta_k, model.log_likelihood(theta_k),
                          model.grad_log_likelihood(theta_k),
                          0.5 * (H + H.T), 0.5 * (I + I.T))


def tr_norm(d, I) -> float:
    """Seminorm ``sqrt(d^T I d)``; tiny negative round-off is clipped."""
    d = np.asarray(d, dtype=float)
    return float(np.sqrt(max(d @ np.asarray(I) @ d, 0.0)))


def solve_tr_subproblem(qm: QuadraticModel, delta: float) -> Tuple[np.ndarray, float]:
    """Maximize the quadratic model in the ``I``-ball of radius ``delta``.

    Returns
    -------
    d : ndarray
        The step.
    beta : float
        Lagrange multiplier; 0 when the Newton step is already interior,
        otherwise chosen so that ``||d||_I = delta``.
    """
    if not delta > 0:
        raise ValueError("trust-region radius must be positive")
    A = -qm.H
    try:
        factor = scipy.linalg.cho_factor(A)
    except np.linalg.LinAlgError as exc:
        raise SubproblemError("subproblem ill-posed: -H is not positive "
                              "definite") from exc
    d = scipy.linalg.cho_solve(factor, qm.g)
    if tr_norm(d, qm.I) <= delta:
        return d, 0.0

    def step(beta):
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(A + beta * qm.I),
                                      qm.g)

    # 1/delta - 1/||d(beta)||_I decreases from a positive value at beta = 0
    # and is nearly linear in beta.  A vanishing seminorm maps to a huge
    # negative value so the bracket stays finite.
    def secular(beta):
        n = max(tr_norm(step(beta), qm.I), 1e-300 * delta)
        return 1.0 / delta - 1.0 / n

    hi = 1.0
    while secular(hi) > 0:
        hi *= 10.0
        if hi > 1e300:
            raise SubproblemError(
                f"failed to bracket the multiplier (delta={delta:g}, "
                f"||g||={np.linalg.norm(qm.g):g})")
    beta = scipy.optimize.brentq(secular, 0.0, hi, xtol=1e-300, rtol=1e-15,
                                 maxiter=500)
    return step(beta), float(beta)


def tr_accept(actual: float, predicted: float, m: float) -> bool:
    """Sufficient-increase test ``actual >= m * predicted``."""
    if predicted < 0:
        raise ValueError("model decrease impossible")
    return bool(actual >= m * predicted)


@dataclass
class TrustRegionState:
    """Radius, multiplier and the constants of the radius update."""

    delta: float = 1.0
    beta: float = 1.0
    m: float = 0.01
    m_prime: float = 0.9
    gamma1: float = 0.5
    gamma2: float = 2.0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not self.beta >= 0:
            raise ValueError("beta must be non-negative")
        if not 0 < self.m < self.m_prime < 1:
            raise ValueError("need 0 < m < m' < 1")
        if not 0 < self.gamma1 < 1 < self.gamma2:
            raise ValueError("need 0 < gamma1 < 1 < gamma2")

    def copy(self) -> "TrustRegionState":
        return dataclasses.replace(self)


def update_delta(state: TrustRegionState, actual: float, predicted: float) -> float:
    """New radius from the gain ratio, taking the midpoint of each interval.

    ``rho <= m`` shrinks into ``(0, gamma1 delta)``, ``m < rho < m'`` into
    ``(gamma1 delta, delta)`` and ``rho >= m'`` grows into
    ``(delta, gamma2 delta)``.
    """
    if not predicted > 0:
        raise ValueError("predicted increase must be positive")
    rho = actual / predicted
    if rho <= state.m:
        return 0.5 * state.gamma1 * state.delta
    if rho < state.m_prime:
        return 0.5 * (state.gamma1 + 1.0) * state.delta
    return 0.5 * (1.0 + state.gamma2) * state.delta


def run_tr(model: ProblemModel, theta0, state0: TrustRegionState,
           cfg: SolverConfig, mode: str = "beta_driven",
           beta_up: float = 1.6, beta_down: float = 0.5,
           enforce_margin: bool = True) -> IterateTrace:
    """Trust-region KPP.

    ``delta_driven`` solves the constrained subproblem and adapts the radius
    with :func:`update_delta`.  ``beta_driven`` keeps the multiplier itself,
    multiplying it by ``beta_up`` after a null step and by ``beta_down``
    after an accepted one.  With ``enforce_margin`` a candidate must also
    satisfy ``l(new) - l(old) >= beta I(old, new)`` to be accepted.
    """
    if mode not in ("delta_driven", "beta_driven"):
        raise ValueError(f"unknown trust-region mode {mode!r}")
    theta = model.validate(theta0).copy()
    state = state0.copy()
    trace = IterateTrace(f"tr-{mode}", cfg.resolve_grad_tol(model, theta))
    qm = build_quadratic_model(model, theta)
    eps = np.finfo(float).eps
    t_start = time.perf_counter()
    rejections = 0
    k = 0
    while True:
        rec = IterateRecord(k, theta.copy(), qm.base,
                            float(np.max(np.abs(qm.g))),
                            wall_time=time.perf_counter() - t_start)
        trace.records.append(rec)
        if rec.grad_norm <= trace.grad_tol:
            trace.converged = True
            trace.stop_reason = "grad_tol"
            break
        if k >= cfg.max_outer_iters:
            trace.stop_reason = "max_outer_iters"
            break

        if mode == "delta_driven":
            d, beta = solve_tr_subproblem(qm, state.delta)
            delta = state.delta
        else:
            beta = state.beta
            A = -qm.H + beta * qm.I
            d = scipy.linalg.cho_solve(scipy.linalg.cho_factor(A), qm.g)
            delta = tr_norm(d, qm.I)
        predicted = qm.predicted_increase(d)
        if predicted <= RESOLUTION_FACTOR * eps * (1.0 + abs(qm.base)):
            trace.stop_reason = "resolution"
            break

        cand = theta + d
        kl = None
        if model.in_domain(cand):
            actual = model.log_likelihood(cand) - qm.base
            kl = model.kl_penalty(theta, cand)
            accepted = tr_accept(actual, predicted, state.m)
            if enforce_margin and actual < beta * kl:
                accepted = False
        else:
            actual = -np.inf
            accepted = False

        rec.beta = beta
        rec.delta = delta
        rec.step_norm = float(np.linalg.norm(d))
        rec.kl_step = kl
        rec.accepted = accepted

        if mode == "delta_driven":
            state.delta = update_delta(state, actual, predicted)
        else:
            state.beta = beta * (beta_down if accepted else beta_up)

        if accepted:
            theta = cand
            qm = build_quadratic_model(model, theta)
            rejections = 0
        else:
            rejections += 1
            if rejections >= MAX_CONSECUTIVE_REJECTIONS:
                raise TrustRegionCollapsed(
                    f"trust region collapsed after {rejections} consecutive "
                    f"rejections at k={k} (beta={beta:g}, delta={delta:g}, "
                    f"predicted={predicted:g}, actual={actual:g})")
        k += 1
    return trace
