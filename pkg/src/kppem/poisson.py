"""Poisson linear inverse problem (emission deblurring).

Counts ``y_j`` are Poisson with rate ``(P theta)_j``.  The complete data are
the pixel-to-detector counts ``N_ji``; given ``y`` they are multinomial with
cell probabilities ``q_ji(theta) = P_ji theta_i / (P theta)_j``, which gives
the proximal penalty

    I(theta_bar, theta) = sum_j y_j sum_i q_ji(theta_bar)
                          * log(q_ji(theta_bar) / q_ji(theta)).

The log-likelihood drops the constant ``-sum_j log y_j!``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .model import DomainError, ProblemModel

__all__ = [
    "PhantomSpec",
    "PoissonDeblurModel",
    "gaussian_blur_matrix",
    "random_instance",
    "synthesize_data",
    "two_rail_phantom",
]


class PoissonDeblurModel(ProblemModel):
    """Poisson likelihood with transition matrix ``P`` and counts ``y``.

    Parameters
    ----------
    P : array_like, shape (m, p)
        Non-negative transition probabilities, detectors by pixels.
    y : array_like, shape (m,)
        Non-negative observed counts.  Real values are accepted so that
        noiseless data ``y = P theta`` can be used directly.
    floor : float, optional
        Positivity floor ``gamma`` for every pixel.  Defaults to
        ``1e-10`` times the mean count level ``sum(y) / sum(P)``.
    """

    def __init__(self, P, y, floor: Optional[float] = None):
        P = np.atleast_2d(np.asarray(P, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if P.ndim != 2 or y.ndim != 1 or P.shape[0] != y.size:
            raise ValueError("P must be (m, p) and y must have length m")
        if np.any(P < 0) or not np.all(np.isfinite(P)):
            raise ValueError("P must be finite and non-negative")
        if np.any(y < 0) or not np.all(np.isfinite(y)):
            raise ValueError("y must be finite and non-negative")
        if np.any(P.max(axis=0) <= 0):
            raise ValueError("pixel unobservable: a column of P has no "
                             "positive entry")
        if np.any((y > 0) & (P.sum(axis=1) <= 0)):
            raise ValueError("a detector with counts has an all-zero row in P")
        if floor is None:
            level = y.sum() / P.sum()
            floor = 1e-10 * level if level > 0 else 1e-10
        if not floor > 0:
            raise ValueError("domain floor must be positive")

        self.P = P
        self.y = y
        self.floor = float(floor)
        self.sensitivity = P.sum(axis=0)
        self._active = y > 0
        # sum_j y_j sum_i P_ji log P_ji is only needed by q_function
        with np.errstate(divide="ignore"):
            self._logP = np.where(P > 0, np.log(np.where(P > 0, P, 1.0)), 0.0)

    @property
    def shape(self):
        return self.P.shape

    def domain_floor(self):
        return self.floor

    def mean_count_level(self) -> float:
        """``sum(y) / sum(P)``, the uniform intensity matching total counts."""
        return float(self.y.sum() / self.P.sum())

    def _projection(self, theta):
        s = self.P @ theta
        if np.any(s[self._active] <= 0):
            raise DomainError("projection vanishes at active detector")
        return s

    def _ratio(self, s):
        # y_j / s_j with the 0/0 := 0 convention on idle detectors
        return np.divide(self.y, s, out=np.zeros_like(s), where=self._active)

    def _posterior_mass(self, theta_bar):
        """``a_i = sum_j y_j q_ji(theta_bar)``, expected complete counts per pixel."""
        return theta_bar * (self.P.T @ self._ratio(self._projection(theta_bar)))

    # -- likelihood -----------------------------------------------------------

    def log_likelihood(self, theta):
        theta = np.asarray(theta, dtype=float)
        s = self._projection(theta)
        act = self._active
        return float(np.sum(self.y[act] * np.log(s[act])) - s.sum())

    def grad_log_likelihood(self, theta):
        theta = np.asarray(theta, dtype=float)
        s = self._projection(theta)
        return self.P.T @ self._ratio(s) - self.sensitivity

    def hess_log_likelihood(self, theta):
        theta = np.asarray(theta, dtype=float)
        s = self._projection(theta)
        w = np.divide(self.y, s * s, out=np.zeros_like(s), where=self._active)
        return -(self.P.T * w) @ self.P

    def q_function(self, theta, theta_bar):
        """Conditional expectation of the complete-data log-likelihood."""
        theta = np.asarray(theta, dtype=float)
        theta_bar = np.asarray(theta_bar, dtype=float)
        ratio = self._ratio(self._projection(theta_bar))
        weights = (ratio[:, None] * self.P) * theta_bar[None, :]
        if np.any(theta <= 0):
            raise DomainError("Q-function needs a strictly positive theta")
        a = weights.sum(axis=0)
        return float(a @ np.log(theta) + np.sum(weights * self._logP)
                     - self.sensitivity @ theta)

    # -- proximal penalty -----------------------------------------------------

    def kl_penalty(self, theta_bar, theta):
        theta = np.asarray(theta, dtype=float)
        theta_bar = np.asarray(theta_bar, dtype=float)
        s = self._projection(theta)
        s_bar = self._projection(theta_bar)
        a = self._posterior_mass(theta_bar)
        act = self._active
        pixel_term = a @ np.log(theta_bar / theta)
        detector_term = self.y[act] @ np.log(s[act] / s_bar[act])
        return float(pixel_term + detector_term)

    def grad_kl_penalty(self, theta_bar, theta):
        theta = np.asarray(theta, dtype=float)
        theta_bar = np.asarray(theta_bar, dtype=float)
        s = self._projection(theta)
        a = self._posterior_mass(theta_bar)
        return self.P.T @ self._ratio(s) - a / theta

    def hess_kl_penalty(self, theta_bar, theta):
        theta = np.asarray(theta, dtype=float)
        theta_bar = np.asarray(theta_bar, dtype=float)
        s = self._projection(theta)
        a = self._posterior_mass(theta_bar)
        w = np.divide(self.y, s * s, out=np.zeros_like(s), where=self._active)
        return np.diag(a / theta ** 2) - (self.P.T * w) @ self.P

    # -- EM -------------------------------------------------------------------

    def closed_form_em_update(self, theta_bar):
        """Multiplicative Shepp-Vardi update, clamped to the domain floor."""
        theta_bar = np.asarray(theta_bar, dtype=float)
        if np.any(self.sensitivity <= 0):
            raise DomainError("pixel unobservable")
        update = self._posterior_mass(theta_bar) / self.sensitivity
        return np.maximum(update, self.floor)


def gaussian_blur_matrix(p: int, sigma: float) -> np.ndarray:
    """Row-normalized ``p x p`` Gaussian blur with width ``sigma`` pixels."""
    if p < 1:
        raise ValueError("need at least one pixel")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    idx = np.arange(p, dtype=float)
    P = np.exp(-(idx[:, None] - idx[None, :]) ** 2 / (2.0 * sigma ** 2))
    return P / P.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class PhantomSpec:
    """Two-rail test source: a flat background with two raised index sets."""

    p: int = 64
    rails: tuple = ((24,), (40,))
    rail_height: float = 1.0
    background: float = 0.1

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("phantom needs at least one pixel")
        if len(self.rails) != 2:
            raise ValueError("exactly two rails are required")
        rails = tuple(tuple(int(i) for i in r) for r in self.rails)
        object.__setattr__(self, "rails", rails)
        seen = set()
        for rail in rails:
            if not rail:
                raise ValueError("empty rail")
            for i in rail:
                if not 0 <= i < self.p:
                    raise ValueError(f"rail position {i} outside [0, {self.p})")
                if i in seen:
                    raise ValueError(f"rails overlap at position {i}")
                seen.add(i)
        if not self.background >= 0:
            raise ValueError("background must be non-negative")
        if not self.rail_height > self.background:
            raise ValueError("rail height must exceed the background")


def two_rail_phantom(spec: PhantomSpec, floor: Optional[float] = None) -> np.ndarray:
    """Build the phantom; a background below ``floor`` is raised to it."""
    background = spec.background
    if floor is not None and background < floor:
        background = floor
    theta = np.full(spec.p, float(background))
    for rail in spec.rails:
        theta[list(rail)] = spec.rail_height
    return theta


def synthesize_data(P, theta_true, noise: str = "noiseless",
                    seed: Optional[int] = None) -> np.ndarray:
    """Counts for ``theta_true``: exactly ``P theta`` or a seeded Poisson draw."""
    rate = np.asarray(P, dtype=float) @ np.asarray(theta_true, dtype=float)
    if noise == "noiseless":
        return rate
    if noise == "poisson":
        rng = np.random.default_rng(seed)
        return rng.poisson(rate).astype(float)
    raise ValueError(f"unknown noise mode {noise!r}")


def random_instance(rng: np.random.Generator, p: int, m: int,
                    counts: Sequence[float] = (1.0, 20.0)) -> PoissonDeblurModel:
    """Dense random instance with positive ``P`` and positive real counts."""
    P = rng.uniform(0.05, 1.0, size=(m, p))
    y = rng.uniform(counts[0], counts[1], size=m)
    return PoissonDeblurModel(P, y)
