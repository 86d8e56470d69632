"""Closed-form noise prediction for Gaussian-mixture targets.

The target distribution is an isotropic Gaussian mixture over R^d.  Under
the forward interpolation x_t = alpha_t x_0 + sigma_t eps, the noisy
marginal stays a mixture with means alpha_t mu_i and per-component
variance alpha_t^2 s_i^2 + sigma_t^2, so the score -- and therefore the
ideal noise predictor

    eps_hat(x, t) = -sigma_t * grad_x log p_t(x | y)

-- is available exactly.  Conditions are named subsets of components
("∅" always denotes the full mixture), which is enough to express
classifier-free guidance and its negative-prompt variant.

All evaluation functions accept batched points of shape (..., d).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError, NumericDegenerateError, SingularScoreError
from .schedule import NoiseSchedule, alpha_sigma

UNCONDITIONAL = "∅"

GUIDANCE_MODES = ("none", "cfg", "nfsd-style")


class MixtureOracle:
    """Gaussian mixture with named condition subsets.

    weights: (k,) positive; renormalized within each condition set at
        evaluation time (only ratios matter for the score).
    means:   (k, d)
    stddevs: (k,) non-negative; 0 denotes a point mass.
    condition_sets: name -> list of component indices.  "∅" is added
        automatically and always covers every component.
    """

    def __init__(self, weights, means, stddevs, condition_sets=None):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        self.stddevs = np.asarray(stddevs, dtype=np.float64)
        k = self.weights.shape[0]
        if self.means.shape[0] != k or self.stddevs.shape[0] != k:
            raise ConfigurationError("weights, means, stddevs must agree on component count")
        if np.any(self.weights <= 0):
            raise ConfigurationError("component weights must be positive")
        if np.any(self.stddevs < 0):
            raise ConfigurationError("component stddevs must be non-negative")
        sets = {UNCONDITIONAL: list(range(k))}
        for name, idx in (condition_sets or {}).items():
            idx = list(idx)
            if not idx:
                raise ConfigurationError(f"condition set {name!r} is empty")
            if any(i < 0 or i >= k for i in idx):
                raise ConfigurationError(f"condition set {name!r} has out-of-range indices")
            sets[name] = idx
        if not sets[UNCONDITIONAL]:
            raise ConfigurationError("mixture needs at least one component")
        self.condition_sets = sets

    @property
    def dimension(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def component_indices(self, condition: str):
        try:
            return self.condition_sets[condition]
        except KeyError:
            raise ConfigurationError(f"unknown condition id {condition!r}") from None


@dataclass(frozen=True)
class GuidanceSpec:
    """Which noise prediction the sampler/distiller should use.

    none        -> eps(condition)
    cfg         -> eps(∅) + scale * (eps(condition) - eps(∅))
    nfsd-style  -> scale * (eps(condition) - eps(∅)) + eps(negative_condition)
    """

    mode: str = "none"
    scale: float = 1.0
    condition: str = UNCONDITIONAL
    negative_condition: str | None = None

    def __post_init__(self):
        if self.mode not in GUIDANCE_MODES:
            raise ConfigurationError(f"unknown guidance mode {self.mode!r}")
        if self.scale < 0:
            raise ConfigurationError("guidance scale must be >= 0")
        if self.mode == "nfsd-style" and self.negative_condition is None:
            raise ConfigurationError("nfsd-style guidance requires negative_condition")


def _moments(oracle: MixtureOracle, t, schedule: NoiseSchedule, condition: str):
    """Per-component (lognorm weights, noisy means, noisy variances) at t."""
    idx = oracle.component_indices(condition)
    alpha, sigma = alpha_sigma(schedule, t)
    s = oracle.stddevs[idx]
    var = (alpha * s) ** 2 + sigma ** 2
    if np.any(var == 0.0):
        raise SingularScoreError(
            "score undefined: point-mass component at sigma_t=0 (t=0)"
        )
    w = oracle.weights[idx]
    logw = np.log(w / w.sum())
    means = alpha * oracle.means[idx]
    return logw, means, var, float(alpha), float(sigma)


def _responsibilities(x, logw, means, var, d):
    diff = x[..., None, :] - means          # (..., k, d)
    sq = np.sum(diff * diff, axis=-1)       # (..., k)
    loglik = logw - 0.5 * sq / var - 0.5 * d * np.log(2.0 * np.pi * var)
    m = np.max(loglik, axis=-1, keepdims=True)
    g = np.exp(loglik - m)
    g /= np.sum(g, axis=-1, keepdims=True)
    return g, diff


def log_density(oracle: MixtureOracle, x_t, t, schedule: NoiseSchedule,
                condition: str = UNCONDITIONAL):
    """log p_t(x | condition); used by tests as the differentiation target."""
    x = np.asarray(x_t, dtype=np.float64)
    logw, means, var, _, _ = _moments(oracle, t, schedule, condition)
    d = oracle.dimension
    diff = x[..., None, :] - means
    sq = np.sum(diff * diff, axis=-1)
    loglik = logw - 0.5 * sq / var - 0.5 * d * np.log(2.0 * np.pi * var)
    m = np.max(loglik, axis=-1)
    return m + np.log(np.sum(np.exp(loglik - m[..., None]), axis=-1))


def epsilon_pred(oracle: MixtureOracle, x_t, t, schedule: NoiseSchedule,
                 condition: str = UNCONDITIONAL):
    """Exact eps_hat = -sigma_t * grad_x log p_t(x_t | condition)."""
    x = np.asarray(x_t, dtype=np.float64)
    if x.shape[-1] != oracle.dimension:
        raise DomainError(
            f"x_t has dimension {x.shape[-1]}, oracle expects {oracle.dimension}"
        )
    logw, means, var, _, sigma = _moments(oracle, t, schedule, condition)
    g, diff = _responsibilities(x, logw, means, var, oracle.dimension)
    # grad log p = sum_i g_i (mu_i - x) / var_i; eps_hat = -sigma * grad
    return sigma * np.sum((g / var)[..., None] * diff, axis=-2)


def guided_epsilon(oracle: MixtureOracle, x_t, t, schedule: NoiseSchedule,
                   spec: GuidanceSpec):
    """Combined noise prediction per the guidance spec."""
    if spec.mode == "none":
        return epsilon_pred(oracle, x_t, t, schedule, spec.condition)
    e_cond = epsilon_pred(oracle, x_t, t, schedule, spec.condition)
    e_unc = epsilon_pred(oracle, x_t, t, schedule, UNCONDITIONAL)
    if spec.mode == "cfg":
        return e_unc + spec.scale * (e_cond - e_unc)
    e_neg = epsilon_pred(oracle, x_t, t, schedule, spec.negative_condition)
    return spec.scale * (e_cond - e_unc) + e_neg


def x0_estimate(x_t, eps_hat, t, schedule: NoiseSchedule):
    """One-step denoised estimate (x_t - sigma_t eps_hat) / alpha_t."""
    alpha, sigma = alpha_sigma(schedule, t)
    if np.any(alpha < 1e-12):
        raise NumericDegenerateError(f"alpha_t={alpha} below 1e-12 at t={t}")
    return (np.asarray(x_t, dtype=np.float64) - sigma * np.asarray(eps_hat)) / alpha
