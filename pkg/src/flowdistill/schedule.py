"""Variance-preserving noise schedules and timestep plans.

Continuous time is normalized to [0, 1].  A schedule provides the signal
and noise coefficients (alpha_t, sigma_t) of the interpolation

    x_t = alpha_t * x_0 + sigma_t * eps,    alpha_t**2 + sigma_t**2 = 1,

plus d(sigma_t/alpha_t)/dt, the coefficient that drives the deterministic
sampler.  Two kinds are implemented:

  vp-linear-beta   alpha_t = exp(-0.5 * B(t)),  B(t) = integral of
                   beta(s) = beta_min + (beta_max - beta_min) * s
  vp-cosine        alpha_t = cos(pi t / 2), sigma_t = sin(pi t / 2)

Timestep plans map optimization step tau to a diffusion time t(tau):
monotone anneals (linear or sqrt in tau/tau_end) or i.i.d. uniform draws.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError

SCHEDULE_KINDS = ("vp-linear-beta", "vp-cosine")
PLAN_KINDS = ("uniform-random", "linear-anneal", "sqrt-anneal")


@dataclass(frozen=True)
class NoiseSchedule:
    """A variance-preserving schedule over normalized time [0, 1].

    t_min/t_max bound the recommended operating window (endpoints are
    avoided because the epsilon parameterization degenerates at sigma=0
    and alpha~0); alpha_sigma itself accepts any t in [0, 1].
    """

    kind: str = "vp-linear-beta"
    beta_min: float = 0.1
    beta_max: float = 20.0
    t_min: float = 0.02
    t_max: float = 0.98

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")
        if not (0.0 < self.t_min <= 1.0) or not (0.0 <= self.t_max <= 1.0):
            raise ConfigurationError("t_min must be in (0,1], t_max in [0,1]")
        if self.kind == "vp-linear-beta" and not (0.0 < self.beta_min <= self.beta_max):
            raise ConfigurationError("need 0 < beta_min <= beta_max")


def _check_time(t, lo=0.0):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < lo) or np.any(t > 1.0):
        raise DomainError(f"t={t} outside [{lo}, 1]")
    return t


def _beta_integral(schedule: NoiseSchedule, t):
    return schedule.beta_min * t + 0.5 * (schedule.beta_max - schedule.beta_min) * t * t


def alpha_sigma(schedule: NoiseSchedule, t):
    """Signal/noise coefficients (alpha_t, sigma_t) at time t in [0, 1]."""
    t = _check_time(t)
    if schedule.kind == "vp-linear-beta":
        b = _beta_integral(schedule, t)
        alpha = np.exp(-0.5 * b)
        sigma = np.sqrt(-np.expm1(-b))  # sqrt(1 - alpha^2), accurate near t=0
    else:
        alpha = np.cos(0.5 * np.pi * t)
        sigma = np.sin(0.5 * np.pi * t)
    return alpha, sigma


def ratio_derivative(schedule: NoiseSchedule, t):
    """d(sigma_t/alpha_t)/dt, strictly positive on (0, 1].

    At t=0 the limit is returned: pi/2 for vp-cosine, +inf for
    vp-linear-beta (sigma_t ~ sqrt(beta_min t) there).
    """
    t = _check_time(t)
    if schedule.kind == "vp-linear-beta":
        b = _beta_integral(schedule, t)
        beta = schedule.beta_min + (schedule.beta_max - schedule.beta_min) * t
        em1 = np.expm1(b)  # sigma^2/alpha^2
        with np.errstate(divide="ignore"):
            out = beta * np.exp(b) / (2.0 * np.sqrt(em1))
        return out
    inv_cos2 = np.cos(0.5 * np.pi * t) ** 2
    with np.errstate(divide="ignore"):
        return 0.5 * np.pi / inv_cos2


@dataclass(frozen=True)
class TimestepPlan:
    """Maps optimization step tau in [0, tau_end] to diffusion time."""

    kind: str = "linear-anneal"
    tau_end: int = 500
    t_start: float = 0.98
    t_end: float = 0.02

    def __post_init__(self):
        if self.kind not in PLAN_KINDS:
            raise ConfigurationError(f"unknown plan kind {self.kind!r}")
        if self.tau_end < 1:
            raise ConfigurationError("tau_end must be a positive integer")
        if not (0.0 < self.t_end < self.t_start <= 1.0):
            raise ConfigurationError("need 0 < t_end < t_start <= 1")

    @property
    def is_annealed(self) -> bool:
        return self.kind != "uniform-random"


def anneal_t(plan: TimestepPlan, tau: int, rng=None) -> float:
    """Diffusion time for optimization step tau.

    uniform-random draws i.i.d. from U(t_end, t_start) and needs rng;
    the anneal kinds are deterministic in tau.
    """
    if tau < 0 or tau > plan.tau_end:
        raise DomainError(f"tau={tau} outside [0, {plan.tau_end}]")
    if plan.kind == "uniform-random":
        if rng is None:
            raise ConfigurationError("uniform-random plan requires a random stream")
        return rng.uniform(low=plan.t_end, high=plan.t_start)
    frac = tau / plan.tau_end
    if plan.kind == "sqrt-anneal":
        frac = np.sqrt(frac)
    return float(plan.t_start + (plan.t_end - plan.t_start) * frac)
