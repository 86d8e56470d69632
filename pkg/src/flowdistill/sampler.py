"""Deterministic first-order sampling of the diffusion flow ODE.

The generation ODE is integrated in the rescaled variable x_t/alpha_t,
where its right-hand side is d(sigma_t/alpha_t)/dt times the predicted
noise.  One Euler step of that ODE from time s down to time t is the
familiar deterministic update

    x_t = alpha_t * xhat_gt(x_s) + sigma_t * eps_hat(x_s),

with xhat_gt the one-step denoised estimate.  Trajectories log, at every
grid time, the state x_t, the "clean image" xhat_c = (x_t - sigma_t
eps_init)/alpha_t implied by the fixed initial noise, and xhat_gt.  The
identity x_t = alpha_t xhat_c + sigma_t eps_init then holds at every
record by construction.

All state arrays may carry leading batch axes: shape (..., d).
"""

from dataclasses import dataclass

import numpy as np

from .errors import OrderingError
from .oracle import GuidanceSpec, MixtureOracle, guided_epsilon, x0_estimate
from .schedule import NoiseSchedule, alpha_sigma, ratio_derivative


@dataclass
class Trajectory:
    """Logged generation run: arrays indexed by grid step along axis 0."""

    ts: np.ndarray            # (n_records,)
    xs: np.ndarray            # (n_records, ..., d) noisy state
    x_clean: np.ndarray       # clean image under the fixed initial noise
    x_gt: np.ndarray          # one-step denoised estimate
    initial_noise: np.ndarray

    @property
    def final_sample(self) -> np.ndarray:
        return self.x_gt[-1]


def pf_ode_rhs(x_t, t, oracle: MixtureOracle, guidance: GuidanceSpec,
               schedule: NoiseSchedule):
    """Right-hand side of the flow ODE in the x/alpha variable."""
    return ratio_derivative(schedule, t) * guided_epsilon(oracle, x_t, t, schedule, guidance)


def _step_from_prediction(x_gt, eps_hat, t_next, schedule):
    alpha, sigma = alpha_sigma(schedule, t_next)
    return alpha * x_gt + sigma * eps_hat


def ddim_step(x_s, s, t, oracle: MixtureOracle, guidance: GuidanceSpec,
              schedule: NoiseSchedule):
    """One deterministic update from time s down to time t <= s."""
    if t > s:
        raise OrderingError(f"ddim step requires t <= s, got t={t} > s={s}")
    eps_hat = guided_epsilon(oracle, x_s, s, schedule, guidance)
    x_gt = x0_estimate(x_s, eps_hat, s, schedule)
    return _step_from_prediction(x_gt, eps_hat, t, schedule)


def time_grid(steps: int, t_start: float, t_end: float) -> np.ndarray:
    """Uniform grid from t_start down to t_end, steps+1 points."""
    if steps < 1:
        raise OrderingError("steps must be >= 1")
    if not t_end < t_start:
        raise OrderingError("need t_end < t_start")
    return np.linspace(t_start, t_end, steps + 1)


def ddim_trajectory(eps_init, steps: int, oracle: MixtureOracle,
                    guidance: GuidanceSpec, schedule: NoiseSchedule,
                    t_start: float | None = None,
                    t_end: float | None = None) -> Trajectory:
    """Run the sampler from x_{t_start} := eps_init down to t_end.

    Returns the full log; the generated sample is the final xhat_gt.
    """
    t_start = schedule.t_max if t_start is None else t_start
    t_end = schedule.t_min if t_end is None else t_end
    ts = time_grid(steps, t_start, t_end)
    eps_init = np.asarray(eps_init, dtype=np.float64)

    x = eps_init.copy()
    xs = np.empty((steps + 1,) + x.shape)
    xcs = np.empty_like(xs)
    xgts = np.empty_like(xs)
    for i, t in enumerate(ts):
        eps_hat = guided_epsilon(oracle, x, t, schedule, guidance)
        alpha, sigma = alpha_sigma(schedule, t)
        x_gt = (x - sigma * eps_hat) / alpha
        xs[i] = x
        xcs[i] = (x - sigma * eps_init) / alpha
        xgts[i] = x_gt
        if i < steps:
            x = _step_from_prediction(x_gt, eps_hat, ts[i + 1], schedule)
    traj = Trajectory(ts=ts, xs=xs, x_clean=xcs, x_gt=xgts,
                      initial_noise=eps_init)
    return traj


def trajectory_reconstruction_error(traj: Trajectory, schedule: NoiseSchedule) -> float:
    """Max relative |x - (alpha xhat_c + sigma eps_init)| over records."""
    worst = 0.0
    for i, t in enumerate(traj.ts):
        alpha, sigma = alpha_sigma(schedule, t)
        recon = alpha * traj.x_clean[i] + sigma * traj.initial_noise
        num = np.max(np.abs(traj.xs[i] - recon))
        den = max(float(np.max(np.abs(traj.xs[i]))), 1e-30)
        worst = max(worst, num / den)
    return worst
