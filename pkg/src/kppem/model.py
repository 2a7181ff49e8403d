"""Problem interface, relaxation schedules and derivative checks.

Every solver in this package maximizes a log-likelihood ``l(theta)`` and
regularizes its steps with a Kullback-Leibler penalty ``I(theta_bar, theta)``
between posterior complete-data densities.  A :class:`ProblemModel` bundles
both functions together with their first and second derivatives.  Penalty
derivatives are always taken in the second slot ``theta``; the anchor
``theta_bar`` is held fixed.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = [
    "DomainError",
    "ProblemModel",
    "QuadraticProblem",
    "RelaxationSchedule",
    "beta_at",
    "check_gradient",
    "check_hessian",
    "check_kl_gradient",
    "check_kl_hessian",
    "decomposition_gap",
]


class DomainError(ValueError):
    """A point lies outside the domain on which a model is defined."""


class ProblemModel(abc.ABC):
    """Maximum-likelihood problem with a Kullback proximal penalty.

    Subclasses provide the log-likelihood, the penalty and their analytic
    derivatives.  Evaluations must be pure functions of their arguments.
    """

    @abc.abstractmethod
    def log_likelihood(self, theta: np.ndarray) -> float:
        ...

    @abc.abstractmethod
    def grad_log_likelihood(self, theta: np.ndarray) -> np.ndarray:
        ...

    @abc.abstractmethod
    def hess_log_likelihood(self, theta: np.ndarray) -> np.ndarray:
        ...

    @abc.abstractmethod
    def kl_penalty(self, theta_bar: np.ndarray, theta: np.ndarray) -> float:
        ...

    @abc.abstractmethod
    def grad_kl_penalty(self, theta_bar: np.ndarray,
                        theta: np.ndarray) -> np.ndarray:
        ...

    @abc.abstractmethod
    def hess_kl_penalty(self, theta_bar: np.ndarray,
                        theta: np.ndarray) -> np.ndarray:
        ...

    def closed_form_em_update(self, theta_bar: np.ndarray) -> Optional[np.ndarray]:
        """Return the EM update when the M-step has a closed form, else None."""
        return None

    def domain_floor(self) -> Optional[float]:
        """Lower bound every coordinate must respect, or None if unconstrained."""
        return None

    def q_function(self, theta: np.ndarray, theta_bar: np.ndarray) -> float:
        raise NotImplementedError("Q-function not available")

    @property
    def has_q_function(self) -> bool:
        return type(self).q_function is not ProblemModel.q_function

    def in_domain(self, theta: np.ndarray) -> bool:
        theta = np.asarray(theta, dtype=float)
        if not np.all(np.isfinite(theta)):
            return False
        floor = self.domain_floor()
        return floor is None or bool(np.all(theta >= floor))

    def validate(self, theta) -> np.ndarray:
        """Return ``theta`` as a float vector, raising if it leaves the domain."""
        theta = np.asarray(theta, dtype=float)
        if theta.ndim != 1 or theta.size < 1:
            raise DomainError("parameter must be a non-empty vector")
        if not np.all(np.isfinite(theta)):
            raise DomainError("parameter has non-finite entries")
        floor = self.domain_floor()
        if floor is not None and np.any(theta < floor):
            raise DomainError(
                f"parameter below domain floor {floor:g} "
                f"(min entry {theta.min():g})")
        return theta


class QuadraticProblem(ProblemModel):
    """Gaussian toy problem with exactly quadratic likelihood and penalty.

    ``l(theta) = -0.5 (theta - c)^T A (theta - c)`` and
    ``I(theta_bar, theta) = 0.5 (theta - theta_bar)^T B (theta - theta_bar)``,
    which is the KL divergence between two Gaussians sharing covariance
    ``B^{-1}``.  ``A`` and ``B`` must be symmetric positive definite.
    """

    def __init__(self, A, center, B=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.center = np.asarray(center, dtype=float)
        self.B = np.eye(self.center.size) if B is None else np.atleast_2d(
            np.asarray(B, dtype=float))
        n = self.center.size
        if self.A.shape != (n, n) or self.B.shape != (n, n):
            raise ValueError("A and B must be square with the size of center")

    def log_likelihood(self, theta):
        r = np.asarray(theta, dtype=float) - self.center
        return float(-0.5 * r @ self.A @ r)

    def grad_log_likelihood(self, theta):
        return -self.A @ (np.asarray(theta, dtype=float) - self.center)

    def hess_log_likelihood(self, theta):
        return -self.A.copy()

    def kl_penalty(self, theta_bar, theta):
        d = np.asarray(theta, dtype=float) - np.asarray(theta_bar, dtype=float)
        return float(0.5 * d @ self.B @ d)

    def grad_kl_penalty(self, theta_bar, theta):
        return self.B @ (np.asarray(theta, dtype=float)
                         - np.asarray(theta_bar, dtype=float))

    def hess_kl_penalty(self, theta_bar, theta):
        return self.B.copy()


@dataclass(frozen=True)
class RelaxationSchedule:
    """Rule producing the relaxation parameter ``beta_k``.

    Use the constructors :meth:`constant`, :meth:`geometric` and
    :meth:`trust_region_driven` rather than building instances by hand.
    """

    kind: str
    beta0: float = 1.0
    ratio: float = 1.0

    KINDS = ("constant", "geometric", "trust_region_driven")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind != "trust_region_driven" and not self.beta0 > 0:
            raise ValueError("beta0 must be positive")
        if self.kind == "geometric" and not 0 < self.ratio < 1:
            raise ValueError("geometric ratio must lie in (0, 1)")

    @classmethod
    def constant(cls, beta0: float = 1.0) -> "RelaxationSchedule":
        return cls("constant", float(beta0))

    @classmethod
    def geometric(cls, beta0: float, ratio: float) -> "RelaxationSchedule":
        return cls("geometric", float(beta0), float(ratio))

    @classmethod
    def trust_region_driven(cls) -> "RelaxationSchedule":
        return cls("trust_region_driven", 0.0)

    def beta_at(self, k: int) -> float:
        return beta_at(self, k)


def beta_at(schedule: RelaxationSchedule, k: int) -> float:
    """Relaxation parameter of ``schedule`` at iteration ``k >= 0``."""
    if k < 0:
        raise ValueError("iteration index must be non-negative")
    if schedule.kind == "constant":
        return schedule.beta0
    if schedule.kind == "geometric":
        return schedule.beta0 * schedule.ratio ** k
    raise ValueError("schedule is externally driven")


# -- finite differences -----------------------------------------------------

def _steps(theta, h, floor):
    """Per-coordinate central-difference steps, shrunk once near the floor."""
    steps = h * np.maximum(1.0, np.abs(theta))
    if floor is None:
        return steps
    low = theta - steps < floor
    if np.any(low):
        steps = np.where(low, steps / 10.0, steps)
        if np.any(theta - steps < floor):
            raise DomainError("domain too tight for finite differences")
    return steps


def _fd_gradient(f: Callable, theta, h, floor) -> np.ndarray:
    steps = _steps(theta, h, floor)
    out = np.empty_like(theta)
    for i, hi in enumerate(steps):
        e = np.zeros_like(theta)
        e[i] = hi
        out[i] = (f(theta + e) - f(theta - e)) / (2 * hi)
    return out


def _fd_jacobian(grad: Callable, theta, h, floor) -> np.ndarray:
    steps = _steps(theta, h, floor)
    cols = []
    for i, hi in enumerate(steps):
        e = np.zeros_like(theta)
        e[i] = hi
        cols.append((grad(theta + e) - grad(theta - e)) / (2 * hi))
    return np.column_stack(cols)


def _relative_error(analytic, numeric) -> float:
    # Normalized by the larger sup-norm so near-zero coordinates do not blow up.
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    err = np.max(np.abs(analytic - numeric))
    if scale == 0.0:
        return 0.0
    return float(err / scale)


def check_gradient(model: ProblemModel, theta, h: float = 1e-6) -> float:
    """Relative error of ``grad_log_likelihood`` against central differences.

    The error is ``max_i |a_i - n_i| / max(||a||_inf, ||n||_inf)`` where
    ``a`` is the analytic gradient and ``n`` the central difference with
    steps ``h * max(1, |theta_i|)``.
    """
    theta = model.validate(theta)
    numeric = _fd_gradient(model.log_likelihood, theta, h, model.domain_floor())
    return _relative_error(model.grad_log_likelihood(theta), numeric)


def check_hessian(model: ProblemModel, theta, h: float = 1e-6) -> float:
    """Relative error of ``hess_log_likelihood`` against differenced gradients."""
    theta = model.validate(theta)
    numeric = _fd_jacobian(model.grad_log_likelihood, theta, h,
                           model.domain_floor())
    return _relative_error(model.hess_log_likelihood(theta), numeric)


def check_kl_gradient(model: ProblemModel, theta_bar, theta,
                      h: float = 1e-6) -> float:
    """Relative error of ``grad_kl_penalty(theta_bar, .)`` at ``theta``."""
    theta_bar = model.validate(theta_bar)
    theta = model.validate(theta)
    numeric = _fd_gradient(lambda t: model.kl_penalty(theta_bar, t), theta, h,
                           model.domain_floor())
    return _relative_error(model.grad_kl_penalty(theta_bar, theta), numeric)


def check_kl_hessian(model: ProblemModel, theta_bar, theta,
                     h: float = 1e-6) -> float:
    """Relative error of ``hess_kl_penalty(theta_bar, .)`` at ``theta``."""
    theta_bar = model.validate(theta_bar)
    theta = model.validate(theta)
    numeric = _fd_jacobian(lambda t: model.grad_kl_penalty(theta_bar, t),
                           theta, h, model.domain_floor())
    return _relative_error(model.hess_kl_penalty(theta_bar, theta), numeric)


def decomposition_gap(model: ProblemModel, theta, theta_bar) -> float:
    """``Q(theta, theta_bar) - [l(theta) - l(theta_bar) - I(theta_bar, theta)]``.

    For a correct penalty this is constant in ``theta`` for fixed
    ``theta_bar``; Q is typically known only up to such a constant.
    """
    if not model.has_q_function:
        raise NotImplementedError("Q-function not available")
    theta = model.validate(theta)
    theta_bar = model.validate(theta_bar)
    bracket = (model.log_likelihood(theta) - model.log_likelihood(theta_bar)
               - model.kl_penalty(theta_bar, theta))
    return float(model.q_function(theta, theta_bar) - bracket)
