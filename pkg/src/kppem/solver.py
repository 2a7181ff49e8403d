"""Exact Kullback proximal point iterations and the EM special case.

Each outer step maximizes ``F(theta) = l(theta) - beta_k I(theta_k, theta)``
with a damped Newton inner loop.  With ``beta_k = 1`` this is EM, and the
closed-form M-step is used when the model provides one.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.linalg

from .model import ProblemModel, RelaxationSchedule, beta_at

__all__ = [
    "IterateRecord",
    "IterateTrace",
    "MonotonicityError",
    "SolverConfig",
    "em_run",
    "kpp_step",
    "run",
]

MAX_HALVINGS = 40
# Objective changes below this multiple of eps * (1 + |F|) are round-off.
RESOLUTION_FACTOR = 16.0


class MonotonicityError(RuntimeError):
    """An inner solve ended below its starting objective value."""


@dataclass(frozen=True)
class SolverConfig:
    """Outer/inner iteration controls shared by every solver.

    ``grad_tol=None`` resolves to ``1e-8 * (1 + |l(theta0)|)`` at run time.
    """

    schedule: RelaxationSchedule = field(
        default_factory=RelaxationSchedule.constant)
    max_outer_iters: int = 500
    grad_tol: Optional[float] = None
    inner_max_iters: int = 100
    inner_tol: float = 1e-10
    use_closed_form_em_when_beta_is_one: bool = True

    def __post_init__(self):
        if self.max_outer_iters < 0:
            raise ValueError("max_outer_iters must be non-negative")
        if self.inner_max_iters < 1:
            raise ValueError("inner_max_iters must be positive")
        if self.grad_tol is not None and not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if not self.inner_tol > 0:
            raise ValueError("inner_tol must be positive")

    def resolve_grad_tol(self, model: ProblemModel, theta0) -> float:
        if self.grad_tol is not None:
            return self.grad_tol
        return 1e-8 * (1.0 + abs(model.log_likelihood(theta0)))

    def replace(self, **changes) -> "SolverConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class IterateRecord:
    """State at outer iteration ``k`` and the step taken from it.

    Step fields (``beta``, ``step_norm``, ``kl_step``...) stay None on the
    terminal record.  For trust-region runs ``accepted`` is False on null
    steps, in which case the step fields describe the rejected candidate.
    """

    k: int
    theta: np.ndarray
    loglik: float
    grad_norm: float
    wall_time: float = 0.0
    beta: Optional[float] = None
    delta: Optional[float] = None
    step_norm: Optional[float] = None
    kl_step: Optional[float] = None
    inner_iters: Optional[int] = None
    accepted: Optional[bool] = None
    inexact: bool = False


@dataclass
class IterateTrace:
    algorithm: str
    grad_tol: float
    records: List[IterateRecord] = field(default_factory=list)
    converged: bool = False
    stop_reason: str = ""

    def __len__(self):
        return len(self.records)

    @property
    def final(self) -> IterateRecord:
        return self.records[-1]

    @property
    def iterations(self) -> int:
        return self.records[-1].k

    @property
    def logliks(self) -> np.ndarray:
        return np.array([r.loglik for r in self.records])

    @property
    def thetas(self) -> np.ndarray:
        return np.array([r.theta for r in self.records])

    def iterates(self) -> np.ndarray:
        """Distinct iterates: record 0 plus every record reached by an accepted step."""
        keep = [self.records[0].theta]
        for prev, rec in zip(self.records, self.records[1:]):
            if prev.accepted:
                keep.append(rec.theta)
        return np.array(keep)

    def margin_violations(self, slack: float = 1e-9) -> List[int]:
        """Iterations whose accepted step breaks ``dl >= beta * I - slack``."""
        bad = []
        for rec, nxt in zip(self.records, self.records[1:]):
            if not rec.accepted:
                continue
            gain = nxt.loglik - rec.loglik
            if gain < rec.beta * rec.kl_step - slack:
                bad.append(rec.k)
        return bad


def _newton_direction(neg_hess: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Solve ``neg_hess d = grad``, shifting the diagonal until it factors."""
    shift = 0.0
    scale = max(np.max(np.abs(np.diag(neg_hess))), 1e-300)
    eye = np.eye(grad.size)
    for _ in range(30):
        try:
            factor = scipy.linalg.cho_factor(neg_hess + shift * eye)
        except np.linalg.LinAlgError:
            shift = 1e-10 * scale if shift == 0.0 else 10.0 * shift
            continue
        return scipy.linalg.cho_solve(factor, grad)
    raise np.linalg.LinAlgError("inner Newton system could not be regularized")


def _inner_maximize(model: ProblemModel, theta_k: np.ndarray, beta: float,
                    max_iters: int, tol: float):
    """Damped Newton on ``l - beta I(theta_k, .)``; returns (theta, iters, exact)."""

    def objective(t):
        return model.log_likelihood(t) - beta * model.kl_penalty(theta_k, t)

    def gradient(t):
        return (model.grad_log_likelihood(t)
                - beta * model.grad_kl_penalty(theta_k, t))

    eps = np.finfo(float).eps
    theta = theta_k.copy()
    f_start = f = objective(theta)
    g = gradient(theta)
    iters = 0
    for iters in range(1, max_iters + 1):
        g_sup = np.max(np.abs(g))
        if g_sup <= tol:
            iters -= 1
            break
        neg_hess = -(model.hess_log_likelihood(theta)
                     - beta * model.hess_kl_penalty(theta_k, theta))
        d = _newton_direction(0.5 * (neg_hess + neg_hess.T), g)
        if g @ d <= RESOLUTION_FACTOR * eps * (1.0 + abs(f)):
            # F can no longer rank the candidates; polish on the gradient.
            cand = theta + d
            if model.in_domain(cand):
                g_cand = gradient(cand)
                if np.max(np.abs(g_cand)) < g_sup:
                    theta, f, g = cand, objective(cand), g_cand
                    continue
            break
        t = 1.0
        moved = False
        for _ in range(MAX_HALVINGS + 1):
            cand = theta + t * d
            if model.in_domain(cand):
                f_cand = objective(cand)
                if f_cand >= f:
                    theta, f, moved = cand, f_cand, True
                    break
            t *= 0.5
        if not moved:
            break
        g = gradient(theta)
    if f < f_start - RESOLUTION_FACTOR * eps * (1.0 + abs(f_start)):
        raise MonotonicityError("monotonicity violated")
    exact = bool(np.max(np.abs(gradient(theta))) <= tol)
    return theta, iters, exact


def kpp_step(model: ProblemModel, theta_k, beta_k: float,
             cfg: Optional[SolverConfig] = None) -> np.ndarray:
    """One exact KPP step: approximate argmax of ``l - beta_k I(theta_k, .)``."""
    if not beta_k > 0:
        raise ValueError("beta_k must be positive")
    cfg = cfg or SolverConfig()
    theta_k = model.validate(theta_k)
    theta, _, _ = _inner_maximize(model, theta_k, beta_k,
                                  cfg.inner_max_iters, cfg.inner_tol)
    return theta


def run(model: ProblemModel, theta0, cfg: SolverConfig,
        algorithm: str = "kpp") -> IterateTrace:
    """Iterate KPP steps with ``beta_k`` from ``cfg.schedule`` until stationary.

    Stops when ``||grad l||_inf <= grad_tol``, after ``max_outer_iters``
    steps, or when a step leaves the iterate unchanged.
    """
    theta = model.validate(theta0).copy()
    trace = IterateTrace(algorithm, cfg.resolve_grad_tol(model, theta))
    t_start = time.perf_counter()
    k = 0
    stalled = False
    while True:
        g = model.grad_log_likelihood(theta)
        rec = IterateRecord(k, theta.copy(), model.log_likelihood(theta),
                            float(np.max(np.abs(g))),
                            wall_time=time.perf_counter() - t_start)
        trace.records.append(rec)
        if rec.grad_norm <= trace.grad_tol:
            trace.converged = True
            trace.stop_reason = "grad_tol"
            break
        if stalled:
            trace.stop_reason = "stalled"
            break
        if k >= cfg.max_outer_iters:
            trace.stop_reason = "max_outer_iters"
            break

        beta = beta_at(cfg.schedule, k)
        closed = None
        if beta == 1.0 and cfg.use_closed_form_em_when_beta_is_one:
            closed = model.closed_form_em_update(theta)
        if closed is not None:
            new, inner, exact = np.asarray(closed, dtype=float), 0, True
        else:
            new, inner, exact = _inner_maximize(model, theta, beta,
                                                cfg.inner_max_iters,
                                                cfg.inner_tol)
        rec.beta = beta
        rec.step_norm = float(np.linalg.norm(new - theta))
        rec.kl_step = model.kl_penalty(theta, new)
        rec.inner_iters = inner
        rec.inexact = not exact
        rec.accepted = True
        stalled = rec.step_norm == 0.0
        theta = new
        k += 1
    return trace


def em_run(model: ProblemModel, theta0, cfg: SolverConfig) -> IterateTrace:
    """EM as the constant ``beta = 1`` KPP run."""
    cfg = cfg.replace(schedule=RelaxationSchedule.constant(1.0))
    return run(model, theta0, cfg, algorithm="em")
