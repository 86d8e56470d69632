"""Score-distillation optimization engines.

Two families share one residual:

    residual = guided noise prediction at x_t  -  noise used to form x_t

With noise redrawn every iteration and uniformly random timesteps this is
the classic mode-seeking distillation update (SDS).  With one fixed noise
per run and a monotonically decreasing timestep plan the same update
follows the deterministic generation flow (FSD): rescaled by
d(sigma/alpha)/dt it is exactly the flow-ODE residual, and its explicit
Euler variant reproduces the deterministic sampler step for step.

The 3D engine drives a differentiable scene through a renderer: render,
add view-dependent noise, evaluate the residual in image space, and pull
it back through the renderer adjoint.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, OrderingError
from .noise_field import WorldMapNoise, world_map_query
from .oracle import (
    UNCONDITIONAL,
    GuidanceSpec,
    MixtureOracle,
    epsilon_pred,
    guided_epsilon,
    x0_estimate,
)
from .schedule import NoiseSchedule, TimestepPlan, alpha_sigma, anneal_t

log = logging.getLogger(__name__)

METHODS = ("sds", "fsd", "fsd-euler")
OPTIMIZERS = ("adam", "plain-gradient")
WEIGHTINGS = ("constant-one", "sigma-over-alpha")

RESIDUAL_CLAMP = 1e3


@dataclass(frozen=True)
class DistillConfig:
    method: str = "fsd"
    plan: TimestepPlan = field(default_factory=TimestepPlan)
    guidance: GuidanceSpec = field(default_factory=GuidanceSpec)
    weighting: str = "constant-one"  # inert under Adam; kept for ablations
    learning_rate: float | None = None  # None -> per-method default
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.weighting not in WEIGHTINGS:
            raise ConfigurationError(f"unknown weighting {self.weighting!r}")
        if self.method in ("fsd", "fsd-euler") and not self.plan.is_annealed:
            raise ConfigurationError(
                f"{self.method} requires a monotone timestep plan, "
                f"got {self.plan.kind!r}"
            )

    @property
    def eta(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 3e-3 if self.method in ("fsd", "fsd-euler") else 2e-2

    @property
    def iterations(self) -> int:
        return self.plan.tau_end


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(m=np.zeros(shape), v=np.zeros(shape), step=0)


def adam_step(state: AdamState, grad, eta: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns (new state, delta_theta)."""
    grad = np.asarray(grad, dtype=np.float64)
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    delta = -eta * m_hat / (np.sqrt(v_hat) + eps)
    return AdamState(m=m, v=v, step=step), delta


def _clamp_residual(residual):
    peak = float(np.max(np.abs(residual))) if residual.size else 0.0
    if peak > RESIDUAL_CLAMP:
        log.warning("residual peak %.3g clamped to %.3g", peak, RESIDUAL_CLAMP)
        return np.clip(residual, -RESIDUAL_CLAMP, RESIDUAL_CLAMP)
    return residual


def guided_residual(oracle: MixtureOracle, x_t, t, schedule: NoiseSchedule,
                    guidance: GuidanceSpec, added_noise):
    """Distillation residual at the noised point x_t.

    none / cfg subtract the noise that was mixed into x_t; the
    negative-prompt mode replaces that term with the negative-condition
    prediction and never sees the added noise:

        none        eps(y) - added_noise
        cfg         c (eps(y) - eps(∅)) + (eps(∅) - added_noise)
        nfsd-style  c (eps(y) - eps(∅)) + (eps(∅) - eps(y_neg))
    """
    if guidance.mode == "nfsd-style":
        e_cond = epsilon_pred(oracle, x_t, t, schedule, guidance.condition)
        e_unc = epsilon_pred(oracle, x_t, t, schedule, UNCONDITIONAL)
        e_neg = epsilon_pred(oracle, x_t, t, schedule, guidance.negative_condition)
        return guidance.scale * (e_cond - e_unc) + (e_unc - e_neg)
    return guided_epsilon(oracle, x_t, t, schedule, guidance) - added_noise


def sds_residual_2d(theta, eps, t, oracle: MixtureOracle,
                    guidance: GuidanceSpec, schedule: NoiseSchedule):
    """Residual for an image-valued parameter: noise theta, predict, subtract."""
    theta = np.asarray(theta, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    alpha, sigma = alpha_sigma(schedule, t)
    x_t = alpha * theta + sigma * eps
    return guided_residual(oracle, x_t, t, schedule, guidance, eps)


def fsd_euler_step_2d(xc_s, eps_init, s, t, oracle: MixtureOracle,
                      guidance: GuidanceSpec, schedule: NoiseSchedule):
    """Explicit Euler step of the clean-image flow from time s down to t:

        xc_t = xc_s + (sigma_t/alpha_t - sigma_s/alpha_s) * (eps_hat - eps_init)
    """
    if t >= s:
        raise OrderingError(f"euler step requires t < s, got t={t} >= s={s}")
    xc_s = np.asarray(xc_s, dtype=np.float64)
    eps_init = np.asarray(eps_init, dtype=np.float64)
    a_s, s_s = alpha_sigma(schedule, s)
    a_t, s_t = alpha_sigma(schedule, t)
    x_s = a_s * xc_s + s_s * eps_init
    eps_hat = guided_epsilon(oracle, x_s, s, schedule, guidance)
    return xc_s + (s_t / a_t - s_s / a_s) * (eps_hat - eps_init)


def _weight(config: DistillConfig, t, schedule: NoiseSchedule) -> float:
    if config.weighting == "constant-one":
        return 1.0
    alpha, sigma = alpha_sigma(schedule, t)
    return float(sigma / alpha)


@dataclass
class DistillLog:
    """Per-iteration record of a distillation run."""

    taus: np.ndarray
    ts: np.ndarray
    loss_proxy: np.ndarray      # 0.5 (alpha/sigma) |theta - xhat_gt|^2
    residual_norm: np.ndarray
    theta_norm: np.ndarray
    thetas: np.ndarray | None = None   # (iters, d); omitted for large params
    x_gts: np.ndarray | None = None


def run_distill_2d(theta0, config: DistillConfig, noise_source,
                   oracle: MixtureOracle, schedule: NoiseSchedule, rng,
                   record_params: bool = True):
    """Optimize an image-valued parameter against the oracle.

    noise_source: fixed noise array for fsd/fsd-euler (None draws one from
    rng at start); must be None for sds, which redraws every iteration.
    Returns (theta_final, DistillLog).
    """
    theta = np.asarray(theta0, dtype=np.float64).copy()
    fixed = config.method in ("fsd", "fsd-euler")
    if fixed:
        if noise_source is None:
            eps_tilde = rng.normal(theta.shape)
        else:
            eps_tilde = np.asarray(noise_source, dtype=np.float64)
            if eps_tilde.shape != theta.shape:
                raise ConfigurationError("fixed noise shape must match theta")
    else:
        if noise_source is not None:
            raise ConfigurationError("sds redraws noise; pass noise_source=None")
        eps_tilde = None

    n = config.iterations
    taus = np.arange(n)
    ts = np.empty(n)
    loss = np.empty(n)
    rnorm = np.empty(n)
    tnorm = np.empty(n)
    thetas = np.empty((n,) + theta.shape) if record_params else None
    xgts = np.empty((n,) + theta.shape) if record_params else None

    adam = AdamState.zeros(theta.shape)
    for tau in range(n):
        t = anneal_t(config.plan, tau, rng)
        if config.method == "fsd-euler":
            t_next = anneal_t(config.plan, tau + 1, rng)
            theta_new = fsd_euler_step_2d(theta, eps_tilde, t, t_next,
                                          oracle, config.guidance, schedule)
            residual = (theta_new - theta)  # for logging only
            theta = theta_new
            t = t_next  # theta now lives at the step's target time
        else:
            eps = eps_tilde if fixed else rng.normal(theta.shape)
            residual = sds_residual_2d(theta, eps, t, oracle,
                                       config.guidance, schedule)
            residual = _clamp_residual(residual)
            grad = _weight(config, t, schedule) * residual
            if config.optimizer == "adam":
                adam, delta = adam_step(adam, grad, config.eta,
                                        config.adam_beta1, config.adam_beta2,
                                        config.adam_eps)
            else:
                delta = -config.eta * grad
            theta = theta + delta

        alpha, sigma = alpha_sigma(schedule, t)
        eps_at = eps_tilde if fixed else eps
        x_t = alpha * theta + sigma * eps_at
        eps_hat = guided_epsilon(oracle, x_t, t, schedule, config.guidance)
        x_gt = x0_estimate(x_t, eps_hat, t, schedule)
        ts[tau] = t
        loss[tau] = 0.5 * (alpha / sigma) * float(np.sum((theta - x_gt) ** 2))
        rnorm[tau] = float(np.linalg.norm(residual))
        tnorm[tau] = float(np.linalg.norm(theta))
        if record_params:
            thetas[tau] = theta
            xgts[tau] = x_gt

    return theta, DistillLog(taus=taus, ts=ts, loss_proxy=loss,
                             residual_norm=rnorm, theta_norm=tnorm,
                             thetas=thetas, x_gts=xgts)


def run_distill_3d(scene0, config: DistillConfig, noise_field,
                   camera_sampler, oracle: MixtureOracle,
                   schedule: NoiseSchedule, rng, *,
                   image_hw=(8, 8), samples_per_ray=32,
                   alpha_threshold=0.5, fresh_rng=None):
    """Optimize a voxel scene: one random camera per iteration.

    noise_field: a WorldMapNoise (deterministic view-dependent noise) or
    None for i.i.d. noise per call (the mode-seeking baseline).
    fresh_rng: stream for the blended fresh component when the field has
    beta < 1 (defaults to rng).
    Returns (scene_final, DistillLog).
    """
    from .scene import render, render_vjp  # local import: scene is heavier

    scene = scene0.copy()
    d_img = 3 * image_hw[0] * image_hw[1]
    if oracle.dimension != d_img:
        raise ConfigurationError(
            f"oracle dimension {oracle.dimension} != rendered image size {d_img}"
        )
    if config.method == "fsd-euler":
        raise ConfigurationError("fsd-euler is a 2D-only method")
    if config.method == "fsd" and not isinstance(noise_field, WorldMapNoise):
        raise ConfigurationError("fsd in 3D requires a WorldMapNoise field")
    if config.method == "sds" and noise_field is not None:
        raise ConfigurationError("sds uses i.i.d. noise; pass noise_field=None")
    if fresh_rng is None:
        fresh_rng = rng

    n = config.iterations
    ts = np.empty(n)
    loss = np.empty(n)
    rnorm = np.empty(n)
    tnorm = np.empty(n)

    params = scene.params()
    adam = AdamState.zeros(params.shape)
    for tau in range(n):
        t = anneal_t(config.plan, tau, rng)
        cam = camera_sampler(rng)
        out = render(scene, cam, samples_per_ray, image_hw=image_hw,
                     alpha_threshold=alpha_threshold)
        if noise_field is not None:
            eps_img = world_map_query(noise_field, cam, out.mask, fresh_rng)
        else:
            eps_img = rng.normal((3,) + tuple(image_hw))
        alpha, sigma = alpha_sigma(schedule, t)
        x_t = (alpha * out.image + sigma * eps_img).reshape(-1)
        residual = guided_residual(oracle, x_t, t, schedule, config.guidance,
                                   eps_img.reshape(-1))
        residual = _clamp_residual(residual)
        residual_img = (_weight(config, t, schedule) * residual).reshape(eps_img.shape)
        grad = render_vjp(scene, cam, samples_per_ray, residual_img,
                          image_hw=image_hw).as_vector()
        if config.optimizer == "adam":
            adam, delta = adam_step(adam, grad, config.eta,
                                    config.adam_beta1, config.adam_beta2,
                                    config.adam_eps)
        else:
            delta = -config.eta * grad
        params = params + delta
        scene.set_params(params)

        ts[tau] = t
        x_gt = x0_estimate(x_t, guided_epsilon(oracle, x_t, t, schedule,
                                               config.guidance), t, schedule)
        loss[tau] = 0.5 * (alpha / sigma) * float(
            np.sum((out.image.reshape(-1) - x_gt) ** 2))
        rnorm[tau] = float(np.linalg.norm(residual))
        tnorm[tau] = float(np.linalg.norm(params))

    return scene, DistillLog(taus=np.arange(n), ts=ts, loss_proxy=loss,
                             residual_norm=rnorm, theta_norm=tnorm)
