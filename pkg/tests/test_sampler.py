import numpy as np
import pytest

from flowdistill.errors import OrderingError
from flowdistill.oracle import GuidanceSpec, MixtureOracle, epsilon_pred
from flowdistill.prng import RandomStream
from flowdistill.sampler import (
    ddim_step,
    ddim_trajectory,
    pf_ode_rhs,
    time_grid,
    trajectory_reconstruction_error,
)
from flowdistill.schedule import NoiseSchedule, alpha_sigma, ratio_derivative

SCHED = NoiseSchedule()
NOG = GuidanceSpec()


def gaussian_flow_endpoint(mu, s0, x_hi, t_hi, schedule):
    """Closed-form generation endpoint for a single-Gaussian target.

    Along the flow the standardized variable (x - alpha mu)/sqrt(v) is
    invariant, so the t=0 endpoint is mu + s0 * z with z taken at t_hi.
    """
    a, s = alpha_sigma(schedule, t_hi)
    z = (x_hi - a * mu) / np.sqrt((a * s0) ** 2 + s ** 2)
    return mu + s0 * z


def test_rhs_symmetric_mixture_zero():
    orc = MixtureOracle([0.5, 0.5], [[1.5], [-1.5]], [0.2, 0.2])
    assert np.allclose(pf_ode_rhs(np.zeros(1), 0.5, orc, NOG, SCHED), 0.0)


def test_rhs_point_mass_formula():
    mu = np.array([1.0, -2.0])
    orc = MixtureOracle([1.0], [mu], [0.0])
    x = np.array([0.4, 0.1])
    t = 0.7
    a, s = alpha_sigma(SCHED, t)
    ref = ratio_derivative(SCHED, t) * (x - a * mu) / s
    assert np.allclose(pf_ode_rhs(x, t, orc, NOG, SCHED), ref, atol=1e-12)


def test_rhs_matches_fine_trajectory_derivative():
    # centered finite difference of x/alpha along a fine run
    orc = MixtureOracle([0.6, 0.4], [[1.0, 0.0], [-1.0, 0.5]], [0.4, 0.3])
    eps = RandomStream(3, 1).normal(2)
    steps = 20_000
    traj = ddim_trajectory(eps, steps, orc, NOG, SCHED, t_start=0.9, t_end=0.1)
    dt = traj.ts[1] - traj.ts[0]
    for i in (5_000, 10_000, 15_000):
        a_m, _ = alpha_sigma(SCHED, traj.ts[i - 1])
        a_p, _ = alpha_sigma(SCHED, traj.ts[i + 1])
        fd = (traj.xs[i + 1] / a_p - traj.xs[i - 1] / a_m) / (2 * dt)
        rhs = pf_ode_rhs(traj.xs[i], traj.ts[i], orc, NOG, SCHED)
        assert np.max(np.abs(fd - rhs)) / np.max(np.abs(rhs)) <= 1e-3


def test_step_zero_length():
    orc = MixtureOracle([1.0], [[0.5, 0.5]], [0.3])
    x = np.array([0.2, -0.4])
    out = ddim_step(x, 0.6, 0.6, orc, NOG, SCHED)
    assert np.allclose(out, x, atol=1e-12)


def test_step_ordering_error():
    orc = MixtureOracle([1.0], [[0.0]], [0.3])
    with pytest.raises(OrderingError):
        ddim_step(np.zeros(1), 0.5, 0.6, orc, NOG, SCHED)
    with pytest.raises(OrderingError):
        time_grid(0, 0.9, 0.1)


def test_step_point_mass_formula():
    mu = np.array([2.0])
    orc = MixtureOracle([1.0], [mu], [0.0])
    x = np.array([0.5])
    s_t, t_t = 0.8, 0.5
    a_s, s_s = alpha_sigma(SCHED, s_t)
    a_t, s_tt = alpha_sigma(SCHED, t_t)
    ref = a_t * mu + s_tt * (x - a_s * mu) / s_s
    assert np.allclose(ddim_step(x, s_t, t_t, orc, NOG, SCHED), ref, atol=1e-12)


def test_gaussian_closed_form_and_first_order_convergence():
    mu = np.array([1.3, -0.7])
    orc = MixtureOracle([1.0], [mu], [0.5])
    eps = np.array([0.37, -1.2])
    closed = gaussian_flow_endpoint(mu, 0.5, eps, 1.0, SCHED)
    errs = {}
    for steps in (500, 1000):
        traj = ddim_trajectory(eps, steps, orc, NOG, SCHED, t_start=1.0, t_end=0.0)
        errs[steps] = np.linalg.norm(traj.final_sample - closed) / np.linalg.norm(closed)
    assert errs[1000] <= 1e-3
    assert 1.5 <= errs[500] / errs[1000] <= 2.5


def test_point_mass_trajectory_exact():
    mu = np.array([0.3, -0.9, 1.1])
    orc = MixtureOracle([1.0], [mu], [0.0])
    eps = RandomStream(5, 1).normal(3)
    traj = ddim_trajectory(eps, 40, orc, NOG, SCHED)
    # every record's denoised estimate is the point mass
    assert np.max(np.abs(traj.x_gt - mu)) <= 1e-9


def test_trajectory_reconstruction_invariant():
    orc = MixtureOracle([0.5, 0.3, 0.2], [[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]],
                        [0.3, 0.2, 0.4], {"y": [0, 1]})
    g = GuidanceSpec(mode="cfg", scale=3.0, condition="y")
    eps = RandomStream(6, 1).normal(2)
    traj = ddim_trajectory(eps, 200, orc, g, SCHED)
    assert trajectory_reconstruction_error(traj, SCHED) <= 1e-9
    assert traj.ts[0] == SCHED.t_max and np.isclose(traj.ts[-1], SCHED.t_min)
    assert np.array_equal(traj.xs[0], eps)


def test_trajectory_deterministic():
    orc = MixtureOracle([0.5, 0.5], [[2.0], [-2.0]], [0.1, 0.1])
    eps = RandomStream(8, 1).normal(1)
    a = ddim_trajectory(eps, 100, orc, NOG, SCHED)
    b = ddim_trajectory(eps, 100, orc, NOG, SCHED)
    assert np.array_equal(a.xs, b.xs)
    assert np.array_equal(a.x_gt, b.x_gt)


def test_batched_marginal_statistics():
    # light version of the acceptance marginal check
    orc = MixtureOracle([0.5, 0.5], [[2.0], [-2.0]], [0.1, 0.1])
    eps = RandomStream(11, 1).normal((2000, 1))
    traj = ddim_trajectory(eps, 200, orc, NOG, SCHED, t_start=0.98, t_end=0.0)
    ends = traj.final_sample[:, 0]
    plus = ends > 0
    assert abs(plus.mean() - 0.5) <= 0.05
    assert abs(ends[plus].mean() - 2.0) <= 0.1
    assert abs(ends[~plus].mean() + 2.0) <= 0.1
